//! Weight files: a versioned header followed by named row-major tensors.
//!
//! Layout (little-endian): magic `TVSW`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::flow::pconv::ConvLayer;

pub const MAGIC: &[u8; 4] = b"TVSW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    pub tensors: BTreeMap<String, Tensor>,
}

impl NamedTensors {
    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), Tensor { dims, data });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("weight file has no tensor `{name}`")))
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, vec![1], vec![v]);
    }

    pub fn scalar_usize(&self, name: &str) -> Result<usize> {
        let t = self.get(name)?;
        match t.data.as_slice() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
            _ => Err(Error::Config(format!("`{name}` is not a non-negative integer scalar"))),
        }
    }

    /// Weight as `[out, in, kz, ky, kx]` and bias as `[out]`.
    pub fn insert_layer(&mut self, name: &str, layer: &ConvLayer) {
        let [kz, ky, kx] = layer.kernel;
        self.insert(
            &format!("{name}.weight"),
            vec![layer.out_channels, layer.in_channels, kz, ky, kx],
            layer.weight.iter().copied().collect(),
        );
        self.insert(&format!("{name}.bias"), vec![layer.out_channels], layer.bias.to_vec());
    }

    /// Fill `layer` (already shaped) from the file, rejecting any shape
    /// difference.
    pub fn load_layer(&self, name: &str, layer: &mut ConvLayer) -> Result<()> {
        let [kz, ky, kx] = layer.kernel;
        let want = vec![layer.out_channels, layer.in_channels, kz, ky, kx];
        let w = self.get(&format!("{name}.weight"))?;
        if w.dims != want {
            return Err(Error::Config(format!(
                "`{name}.weight` has shape {:?}, architecture needs {want:?}",
                w.dims
            )));
        }
        let b = self.get(&format!("{name}.bias"))?;
        if b.dims != [layer.out_channels] {
            return Err(Error::Config(format!(
                "`{name}.bias` has shape {:?}, architecture needs [{}]",
                b.dims, layer.out_channels
            )));
        }
        layer.weight = Array2::from_shape_vec(layer.weight.dim(), w.data.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        layer.bias = Array1::from(b.data.clone());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Config("not a weight file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Config(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()?;
        let mut out = Self::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Config("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Config(format!("`{name}` is too large")))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Config(format!("`{name}` is truncated")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            out.tensors.insert(name, Tensor { dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Config(format!("{} trailing bytes in weight file", r.remaining())));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Config("weight file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowNetworkConfig, FlowNetworkWeights};

    #[test]
    fn round_trip_bytes() {
        let mut t = NamedTensors::default();
        t.insert("a", vec![2, 3], (0..6).map(f64::from).collect());
        t.insert_scalar("meta.x", 4.0);
        let back = NamedTensors::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.scalar_usize("meta.x").unwrap(), 4);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(NamedTensors::from_bytes(b"NOPE").is_err());
        let mut bytes = NamedTensors::default().to_bytes();
        bytes[4] = 9;
        assert!(NamedTensors::from_bytes(&bytes).is_err());
        let mut t = NamedTensors::default();
        t.insert("a", vec![4], vec![1.0; 4]);
        let bytes = t.to_bytes();
        assert!(NamedTensors::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn network_weights_survive_a_file() {
        let w = FlowNetworkWeights::seeded(FlowNetworkConfig { radius_xy: 2, s_z: 1 }, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.tvsw");
        w.to_tensors().save(&path).unwrap();
        let back = FlowNetworkWeights::from_tensors(&NamedTensors::load(&path).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn wrong_layer_shape_is_a_config_error() {
        let w = FlowNetworkWeights::zeros(FlowNetworkConfig::default());
        let mut t = w.to_tensors();
        t.insert("decoder.2.bias", vec![3], vec![0.0; 3]);
        assert!(matches!(FlowNetworkWeights::from_tensors(&t), Err(Error::Config(_))));
    }
}

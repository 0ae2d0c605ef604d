//! File formats for sequences and outputs.
//!
//! - `NNNN.png`: 8- or 16-bit RGB(A) frames, read as `H × W × 3` in [0, 1].
//! - `NNNN.dpt`: `u32` height, `u32` width, then `f32` depths, little-endian.
//! - `NNNN.pfm`: greyscale PFM depth (rows stored bottom to top).
//! - `poses.txt`: one row-major 4×4 world-to-camera matrix per line.
//! - `intrinsics.txt`: nine numbers, row-major 3×3.
//! - `.raw` dumps: `u32` rank, `u32` dims, then `f32` data, little-endian.

use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use nalgebra::{Matrix3, Matrix4};
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn input(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {msg}", path.display()))
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let color = img.color();
    let wide = color.bits_per_pixel() / color.channel_count() as u16 > 8;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(if wide {
        let rgb = img.to_rgb16();
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0)
    } else {
        let rgb = img.to_rgb8();
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Quantise `[0, 1]` colour to 8 bits (values are clamped first).
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, rgb: ArrayView3<f64>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(rgb[(y, x, 0)]), to_u8(rgb[(y, x, 1)]), to_u8(rgb[(y, x, 2)])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Greyscale PNG of a `[0, 1]` mask or map.
pub fn write_gray_png(path: &Path, v: ArrayView2<f64>) -> Result<()> {
    let (h, w) = v.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(v[(y as usize, x as usize)])]));
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn read_dpt(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 8 {
        return Err(input(path, "truncated depth header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = h.checked_mul(w).ok_or_else(|| input(path, "depth size overflows"))?;
    if bytes.len() != 8 + 4 * n {
        return Err(input(path, format!("{} bytes for a {h}×{w} depth map", bytes.len())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| input(path, e))
}

pub fn write_dpt(path: &Path, depth: ArrayView2<f64>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut out = Vec::with_capacity(8 + 4 * h * w);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &d in depth.iter() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

/// Greyscale (`Pf`) PFM. The sign of the scale gives the byte order.
pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_bytes(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(input(path, "truncated PFM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(input(path, format!("unsupported PFM type `{magic}`, expected greyscale `Pf`")));
    }
    let parse = |t: String| t.parse::<f64>().map_err(|_| input(path, format!("bad PFM header field `{t}`")));
    let w = parse(token()?)? as usize;
    let h = parse(token()?)? as usize;
    let scale = parse(token()?)?;
    if pos >= bytes.len() {
        return Err(input(path, "PFM has no data"));
    }
    // Exactly one whitespace byte separates the header from the data.
    let data = &bytes[pos + 1..];
    if data.len() != 4 * w * h {
        return Err(input(path, format!("{} data bytes for a {h}×{w} PFM", data.len())));
    }
    let little = scale < 0.0;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let i = 4 * ((h - 1 - y) * w + x);
        let b: [u8; 4] = data[i..i + 4].try_into().unwrap();
        (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    }))
}

pub fn write_pfm(path: &Path, depth: ArrayView2<f64>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth[(y, x)] as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Depth from `.dpt` or `.pfm`, chosen by extension.
pub fn read_depth(path: &Path) -> Result<Array2<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dpt") => read_dpt(path),
        Some("pfm") => read_pfm(path),
        _ => Err(input(path, "depth maps must be .dpt or .pfm")),
    }
}

fn numbers(path: &Path, line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| input(path, format!("`{t}` is not a number"))))
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_poses(path: &Path) -> Result<Vec<Matrix4<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    content_lines(&text)
        .enumerate()
        .map(|(i, line)| {
            let v = numbers(path, line)?;
            if v.len() != 16 {
                return Err(input(path, format!("pose {i} has {} numbers, expected 16", v.len())));
            }
            Ok(Matrix4::from_row_slice(&v))
        })
        .collect()
}

pub fn write_poses(path: &Path, poses: &[Matrix4<f64>]) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:?}", p[(r, c)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<Matrix3<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v = Vec::new();
    for line in content_lines(&text) {
        v.extend(numbers(path, line)?);
    }
    if v.len() != 9 {
        return Err(input(path, format!("{} numbers, expected 9", v.len())));
    }
    Ok(Matrix3::from_row_slice(&v))
}

pub fn write_intrinsics(path: &Path, k: &Matrix3<f64>) -> Result<()> {
    let mut out = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:?}", k[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn write_raw(path: &Path, a: ArrayViewD<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut put = |b: &[u8]| out.write_all(b).map_err(|e| Error::io(path, e));
    put(&(a.ndim() as u32).to_le_bytes())?;
    for &d in a.shape() {
        put(&(d as u32).to_le_bytes())?;
    }
    for &v in a.iter() {
        put(&(v as f32).to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = read_bytes(path)?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| input(path, "truncated raw dump"))
    };
    let rank = word(0)? as usize;
    let dims = (0..rank).map(|i| word(1 + i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let body = &bytes[4 * (1 + rank).min(bytes.len() / 4)..];
    if body.len() != 4 * n {
        return Err(input(path, format!("{} data bytes for shape {dims:?}", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| input(path, e))
}

/// `NNNN` with at least four digits.
pub fn frame_stem(index: usize) -> String {
    format!("{index:04}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let rgb = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 31 + x * 17 + c * 5) % 256) as f64 / 255.0);
        write_png(&p, rgb.view()).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back, rgb);
    }

    #[test]
    fn dpt_and_pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Array2::from_shape_fn((4, 6), |(y, x)| 1.5 + y as f64 * 0.25 + x as f64);
        let a = dir.path().join("d.dpt");
        write_dpt(&a, d.view()).unwrap();
        assert_eq!(read_depth(&a).unwrap(), d);
        let b = dir.path().join("d.pfm");
        write_pfm(&b, d.view()).unwrap();
        assert_eq!(read_depth(&b).unwrap(), d);
    }

    #[test]
    fn pfm_big_endian_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        // Bottom row first.
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let d = read_pfm(&p).unwrap();
        assert_eq!(d, ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]));
    }

    #[test]
    fn truncated_depth_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dpt");
        let mut bytes = 3u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0; 8]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dpt(&p), Err(Error::Input(_))));
    }

    #[test]
    fn poses_and_intrinsics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses = vec![
            Matrix4::identity(),
            crate::geometry::rigid_transform(nalgebra::Vector3::new(0.01, -0.02, 0.03), nalgebra::Vector3::new(0.1, 0.2, -0.3)),
        ];
        let p = dir.path().join("poses.txt");
        write_poses(&p, &poses).unwrap();
        assert_eq!(read_poses(&p).unwrap(), poses);
        let k = crate::geometry::pinhole(100.0, 110.0, 32.5, 24.0);
        let q = dir.path().join("intrinsics.txt");
        write_intrinsics(&q, &k).unwrap();
        assert_eq!(read_intrinsics(&q).unwrap(), k);
    }

    #[test]
    fn malformed_pose_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.txt");
        std::fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0\n").unwrap();
        assert!(matches!(read_poses(&p), Err(Error::Input(_))));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.raw");
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64 * 0.5);
        write_raw(&p, a.view()).unwrap();
        assert_eq!(read_raw(&p).unwrap(), a);
    }
}

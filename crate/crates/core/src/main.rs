fn main() {
    std::process::exit(tvs_core::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(mfgem::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(recon_core::harness::cli::cli_main(std::env::args_os()));
}

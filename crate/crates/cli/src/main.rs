fn main() {
    std::process::exit(dcvae_cli::run(std::env::args_os()));
}

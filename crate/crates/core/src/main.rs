fn main() {
    std::process::exit(latent_ssl::cli::main_with_args(std::env::args_os()));
}

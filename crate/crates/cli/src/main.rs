fn main() {
    std::process::exit(rcnet_cli::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(cpgg_cli::run(std::env::args_os()));
}

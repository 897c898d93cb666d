fn main() {
    std::process::exit(membp_cli::run(std::env::args_os()));
}

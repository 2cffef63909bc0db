fn main() {
    std::process::exit(siting_cli::run(std::env::args_os()));
}

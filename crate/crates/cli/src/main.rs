fn main() {
    std::process::exit(gazecloak_cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(otoc::cli::run_cli(std::env::args_os()));
}

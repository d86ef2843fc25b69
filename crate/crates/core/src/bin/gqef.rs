fn main() {
    std::process::exit(gqef::cli::run_cli(std::env::args_os()));
}

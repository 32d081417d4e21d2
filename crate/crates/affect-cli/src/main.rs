fn main() {
    std::process::exit(affect_cli::cli_dispatch(std::env::args()));
}

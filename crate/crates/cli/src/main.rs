fn main() {
    std::process::exit(shiftseg_cli::run_cli(std::env::args()));
}

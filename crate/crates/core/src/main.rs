fn main() {
    std::process::exit(sensproj::cli::run_cli(std::env::args_os()));
}

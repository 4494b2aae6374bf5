fn main() {
    std::process::exit(polrep_cli::run_command(std::env::args_os()));
}

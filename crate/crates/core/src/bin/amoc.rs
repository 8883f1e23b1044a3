fn main() {
    std::process::exit(amoc::cli::run_command(std::env::args_os()));
}

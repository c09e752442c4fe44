fn main() {
    std::process::exit(meanflow::cli::run_command(std::env::args_os()));
}

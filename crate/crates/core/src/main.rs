fn main() {
    std::process::exit(ditblock::cli::main_with_args(std::env::args_os()));
}

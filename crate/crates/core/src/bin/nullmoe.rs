fn main() {
    std::process::exit(nullmoe::cli::main_with_args(std::env::args_os()));
}

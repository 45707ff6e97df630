fn main() {
    std::process::exit(hafx::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(fringeforge::cli::main_with_args(std::env::args_os()));
}

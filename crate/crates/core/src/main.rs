fn main() {
    std::process::exit(splitforge::cli::main_with_args(std::env::args_os()));
}

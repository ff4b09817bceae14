fn main() {
    std::process::exit(clockforge::cli::main_with_args(std::env::args_os()));
}

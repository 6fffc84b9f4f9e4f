fn main() {
    std::process::exit(linebo::harness::cli::main_with_args(std::env::args_os()));
}

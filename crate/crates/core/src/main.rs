fn main() {
    std::process::exit(rocnet::cli::main_with_args(std::env::args_os()));
}

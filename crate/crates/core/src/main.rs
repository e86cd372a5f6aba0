fn main() {
    std::process::exit(dichoman::cli::main_with_args(std::env::args_os()));
}

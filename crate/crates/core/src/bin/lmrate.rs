fn main() {
    std::process::exit(lmrate::cli::main_with_args(std::env::args_os()));
}

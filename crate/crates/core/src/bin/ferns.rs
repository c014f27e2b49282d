fn main() {
    std::process::exit(ferns::cli::main_with_args(std::env::args_os()));
}

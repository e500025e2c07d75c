fn main() {
    std::process::exit(gainsearch::cli::main_with_args(std::env::args_os()));
}

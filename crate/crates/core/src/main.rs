fn main() {
    std::process::exit(lpmarg::cli::main_with_args(std::env::args_os()));
}

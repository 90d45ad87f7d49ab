fn main() {
    std::process::exit(bomhe::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(privcase::cli::main_with_args(std::env::args_os()));
}

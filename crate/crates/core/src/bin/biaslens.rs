fn main() {
    std::process::exit(biaslens::cli::main_with_args(std::env::args_os()));
}

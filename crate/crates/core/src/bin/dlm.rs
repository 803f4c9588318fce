fn main() {
    std::process::exit(dlm_core::cli::main_with_args(std::env::args_os()));
}

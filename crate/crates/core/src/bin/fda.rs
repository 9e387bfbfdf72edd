fn main() {
    std::process::exit(fda_core::cli::main_with_args(std::env::args_os()));
}

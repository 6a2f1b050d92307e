fn main() {
    std::process::exit(dera::harness::cli::main_with_args(std::env::args_os()));
}

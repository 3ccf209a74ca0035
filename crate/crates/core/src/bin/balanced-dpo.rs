fn main() {
    std::process::exit(balanced_dpo::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(se3oc::cli::main_with_args(std::env::args_os()));
}

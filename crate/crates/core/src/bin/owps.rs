fn main() {
    std::process::exit(owpsnet::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(hybrid4d::cli::main_with_args(std::env::args_os()));
}

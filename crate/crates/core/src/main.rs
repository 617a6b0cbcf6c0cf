fn main() {
    std::process::exit(tomoseg::cli::main_with_args(std::env::args_os()));
}

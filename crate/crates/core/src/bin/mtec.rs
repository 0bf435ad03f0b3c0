fn main() {
    std::process::exit(mtec::cli::main_with_args(std::env::args_os()));
}

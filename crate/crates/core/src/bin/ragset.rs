fn main() {
    std::process::exit(ragset::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(allmatch_cli::main_with_args(std::env::args_os()));
}

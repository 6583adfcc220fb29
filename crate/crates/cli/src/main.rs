fn main() {
    std::process::exit(tsedit_cli::main_with_args(std::env::args_os()));
}

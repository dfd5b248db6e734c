fn main() {
    std::process::exit(cellkd_cli::main_with_args(std::env::args_os()));
}

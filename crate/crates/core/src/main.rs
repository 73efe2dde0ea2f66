fn main() {
    std::process::exit(msfnet::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(wnet_core::cli::main_with_args(std::env::args_os()));
}

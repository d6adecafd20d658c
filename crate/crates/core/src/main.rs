fn main() {
    std::process::exit(noisy_cp::cli::main_with_args(std::env::args_os()));
}

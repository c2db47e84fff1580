fn main() {
    std::process::exit(orthoprune::cli::main_with(std::env::args_os()));
}

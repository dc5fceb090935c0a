fn main() {
    std::process::exit(teso::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(gridcast::cli::main_with(std::env::args_os()));
}

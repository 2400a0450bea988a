fn main() {
    std::process::exit(tdann::cli::main_with(std::env::args_os()));
}

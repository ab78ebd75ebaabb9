fn main() {
    std::process::exit(pneumo_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(anselect::cli::run(std::env::args_os()));
}

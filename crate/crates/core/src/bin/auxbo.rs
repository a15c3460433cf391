fn main() {
    std::process::exit(auxbo::cli::run(std::env::args_os()));
}

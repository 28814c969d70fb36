fn main() {
    std::process::exit(cacl::cli::run(std::env::args_os()));
}

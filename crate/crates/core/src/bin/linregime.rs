fn main() {
    std::process::exit(linregime::cli::run(std::env::args_os()));
}

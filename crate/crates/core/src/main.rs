fn main() {
    std::process::exit(hatrec::cli::run(std::env::args_os()));
}

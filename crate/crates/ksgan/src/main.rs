fn main() {
    std::process::exit(ksgan::cli::run(std::env::args_os()));
}

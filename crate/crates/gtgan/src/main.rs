fn main() {
    std::process::exit(gtgan::cli::run(std::env::args_os()));
}

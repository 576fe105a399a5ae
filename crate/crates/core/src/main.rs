fn main() {
    std::process::exit(explainseg::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(lgatt::cli::run(std::env::args_os()));
}

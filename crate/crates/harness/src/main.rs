fn main() {
    std::process::exit(dcedit::cli::run(std::env::args_os()));
}

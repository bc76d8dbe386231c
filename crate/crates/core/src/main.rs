fn main() {
    std::process::exit(uxmil::cli::run(std::env::args_os()));
}

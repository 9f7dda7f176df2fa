fn main() {
    std::process::exit(deformreg::cli::run(std::env::args_os()));
}

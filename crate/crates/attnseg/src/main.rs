fn main() {
    std::process::exit(attnseg::cli::run());
}

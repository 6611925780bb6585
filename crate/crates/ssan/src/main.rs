fn main() {
    std::process::exit(ssan::cli::run());
}

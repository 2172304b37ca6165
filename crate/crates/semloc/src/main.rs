fn main() {
    std::process::exit(semloc::cli::run());
}

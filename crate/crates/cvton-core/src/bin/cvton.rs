fn main() {
    std::process::exit(cvton_core::cli::run());
}

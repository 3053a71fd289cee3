fn main() {
    std::process::exit(iltm_cli::commands::run());
}

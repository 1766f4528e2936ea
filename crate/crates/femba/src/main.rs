fn main() {
    std::process::exit(femba::cli::main());
}

fn main() {
    std::process::exit(dips::cli::main());
}

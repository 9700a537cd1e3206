fn main() {
    std::process::exit(moma::cli::main());
}

fn main() {
    std::process::exit(uts::cli::main());
}

fn main() {
    std::process::exit(fsqs::cli::main());
}

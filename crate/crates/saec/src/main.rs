fn main() {
    std::process::exit(saec::cli::main());
}

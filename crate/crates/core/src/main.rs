fn main() {
    std::process::exit(accelsim::cli::main());
}

fn main() {
    std::process::exit(hdanet::cli::main());
}

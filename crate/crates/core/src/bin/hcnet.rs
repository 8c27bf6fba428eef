fn main() {
    std::process::exit(hcnet::cli::main());
}

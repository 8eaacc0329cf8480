fn main() {
    std::process::exit(rdsim::cli::main());
}

fn main() {
    std::process::exit(vulnrepair::harness::cli(std::env::args()));
}

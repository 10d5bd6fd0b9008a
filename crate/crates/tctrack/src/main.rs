fn main() {
    std::process::exit(tctrack::run_cli());
}

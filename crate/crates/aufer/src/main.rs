fn main() {
    std::process::exit(aufer::run());
}

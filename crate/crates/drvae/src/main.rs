fn main() {
    std::process::exit(drvae::run_cli());
}

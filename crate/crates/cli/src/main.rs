fn main() {
    std::process::exit(ptstab::run(std::env::args_os()));
}

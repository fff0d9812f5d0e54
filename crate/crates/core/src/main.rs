fn main() {
    std::process::exit(mmsparse::cli::main());
}

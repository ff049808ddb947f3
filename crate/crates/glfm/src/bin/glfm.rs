fn main() {
    // CLI wiring lands with the io module.
    eprintln!("glfm: command line interface not built yet");
    std::process::exit(1);
}

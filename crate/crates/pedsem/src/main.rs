fn main() {
    // CLI wiring lands after the library modules.
    eprintln!("pedsem: not yet wired");
    std::process::exit(2);
}

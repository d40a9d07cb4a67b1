fn main() {
    eprintln!("miniswift: command-line interface not wired up yet");
    std::process::exit(2);
}

fn main() {
    eprintln!("rblab: not wired up yet");
    std::process::exit(2);
}

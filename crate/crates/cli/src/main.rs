fn main() {
    eprintln!("gxrt: not yet wired up");
    std::process::exit(2);
}

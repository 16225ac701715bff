fn main() {
    println!("acceptance: suite not yet implemented");
}

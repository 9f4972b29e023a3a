fn main() {
    println!("drhuman CLI placeholder");
}

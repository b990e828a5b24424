fn main() {
    println!("crowd3d");
}

fn main() { println!("swr"); }

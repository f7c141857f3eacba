fn main() { println!("tungate"); }

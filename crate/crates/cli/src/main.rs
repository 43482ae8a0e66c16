//! CLI placeholder
fn main() {}

fn main() { nam::harness::unimplemented_cli(); }

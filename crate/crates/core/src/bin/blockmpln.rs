fn main() { std::process::exit(blockmpln::cli::main()) }

fn main() {
    std::process::exit(sera_harness::cli::main_with(std::env::args_os()));
}

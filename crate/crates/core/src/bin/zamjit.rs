fn main() {
    std::process::exit(zamjit::harness::cli_main(std::env::args_os()));
}

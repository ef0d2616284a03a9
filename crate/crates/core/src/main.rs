fn main() {
    std::process::exit(mimo_resample::harness::main_cli(std::env::args_os()));
}

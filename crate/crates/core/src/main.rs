fn main() {
    std::process::exit(cyclebalance::harness::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(memseg::harness::cli::run(std::env::args_os()));
}

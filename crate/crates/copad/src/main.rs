fn main() {
    std::process::exit(copad::cli::run(std::env::args_os()));
}

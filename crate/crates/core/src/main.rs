fn main() {
    std::process::exit(goboed::io::run_command(std::env::args_os()));
}

fn main() -> std::process::ExitCode {
    advart_cli::run()
}

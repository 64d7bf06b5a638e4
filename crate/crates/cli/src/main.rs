fn main() -> std::process::ExitCode {
    tide_cli::main()
}

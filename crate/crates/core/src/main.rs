fn main() -> std::process::ExitCode {
    critart::cli::main()
}

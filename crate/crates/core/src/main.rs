fn main() -> std::process::ExitCode {
    mambax::cli::main()
}

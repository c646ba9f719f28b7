fn main() -> std::process::ExitCode {
    nfuse::cli::main()
}

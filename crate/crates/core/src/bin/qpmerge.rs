fn main() -> std::process::ExitCode {
    qpmerge::cli::main()
}

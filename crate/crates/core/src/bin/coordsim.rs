fn main() -> std::process::ExitCode {
    coordsim::cli::main()
}

fn main() -> std::process::ExitCode {
    inrprop_cli::main()
}

fn main() -> std::process::ExitCode {
    ksmon::cli::main_entry()
}

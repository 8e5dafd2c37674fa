fn main() -> std::process::ExitCode {
    cts::cli::main_entry()
}

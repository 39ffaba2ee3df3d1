fn main() -> std::process::ExitCode {
    overq::cli::main_exit()
}

fn main() -> std::process::ExitCode {
    mixspeech::cli::main_with_args(std::env::args_os())
}

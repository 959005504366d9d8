fn main() {
    std::process::exit(ssheat::cli::main_with_env());
}

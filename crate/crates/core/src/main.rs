fn main() {
    std::process::exit(rulesmith::cli::run(std::env::args_os()));
}

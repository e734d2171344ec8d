fn main() {
    std::process::exit(concept_reasoner_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(metapt::cli::run(std::env::args()));
}

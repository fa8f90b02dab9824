fn main() {
    std::process::exit(spmamba::cli::run());
}

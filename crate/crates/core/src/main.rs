fn main() {
    std::process::exit(grokscale::cli::main());
}

fn main() {
    std::process::exit(mmgraph_cli::run(std::env::args_os()));
}

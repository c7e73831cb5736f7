use hrtr::cli;

fn main() {
    std::process::exit(cli::run());
}

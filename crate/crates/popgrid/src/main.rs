use popgrid::cli;

fn main() {
    let code = cli::run(std::env::args());
    std::process::exit(code);
}

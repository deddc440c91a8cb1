use clap::Parser;

fn main() {
    let cli = cavity_xf::cli::Cli::parse();
    std::process::exit(cavity_xf::cli::execute(cli));
}

use clap::Parser;
use stochastic_transport::cli::{run, Args};

fn main() {
    let args = Args::parse();
    std::process::exit(run(&args));
}

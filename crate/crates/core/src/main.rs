use clap::Parser;
use ssd_array_sim::cli::{main_with, Args};

fn main() {
    std::process::exit(main_with(Args::parse()));
}

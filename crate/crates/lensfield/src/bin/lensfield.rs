use std::process::exit;

fn main() {
    exit(lensfield::cli::run());
}

use std::process;

fn main() {
    process::exit(coco_bert::cli::run(std::env::args()));
}

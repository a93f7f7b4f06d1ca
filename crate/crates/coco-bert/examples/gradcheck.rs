//! Verify every differentiable component against central finite
//! differences, 20 random seeds each, and print one line per component.
//!
//!     cargo run --release --example gradcheck

use coco_bert::gradcheck::{run_suite, SuiteOptions};

fn main() -> coco_bert::Result<()> {
    let report = run_suite(&SuiteOptions::default())?;
    print!("{}", report.render());
    if report.all_passed() {
        println!("all components agree with finite differences");
        Ok(())
    } else {
        std::process::exit(1);
    }
}

//! Check parameter sets against the admissibility rules.
//!
//! cargo run --example validate_params

use market_inference::model::{validate_params, ModelParams, ParamBounds};

fn main() {
    let bounds = ParamBounds::default();
    let mut cases = vec![("defaults", ModelParams::paper_defaults())];

    let mut flipped = ModelParams::paper_defaults();
    flipped.mu1 = -0.5;
    cases.push(("negative informed drift", flipped));

    let mut tiny = ModelParams::paper_defaults();
    tiny.sigma2 = 0.01;
    cases.push(("noise scale below floor", tiny));

    cases.push(("omega off the simplex", ModelParams::paper_defaults().with_omega([0.5, 0.5, 0.5])));

    let mut heavy = ModelParams::paper_defaults();
    heavy.nu = 2.0;
    cases.push(("tail index too small", heavy));

    for (name, theta) in cases {
        let report = validate_params(&theta, &bounds);
        print!("{name}: {report}");
    }
}

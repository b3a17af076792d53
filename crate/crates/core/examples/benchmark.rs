//! Runs every preset scenario once and prints its result table.
//!
//! ```text
//! cargo run --release -p tamoo --example benchmark
//! ```

use tamoo::harness::{presets, run_experiment, train_victims, Scenario};

fn main() -> tamoo::Result<()> {
    let mut specs = vec![presets::ens(true), presets::ens(false)];
    specs.extend([1, 4, 8, 16].map(presets::uni));
    specs.push(presets::eot());
    specs.push(presets::adv_train());
    for spec in specs {
        let victims = match spec.scenario {
            Scenario::AdvTrain => Vec::new(),
            _ => train_victims(&spec)?,
        };
        let out = run_experiment(&spec, &victims, None)?;
        println!("== {} ({})", spec.name, spec.hash());
        print!("{}", out.table.to_text());
    }
    Ok(())
}

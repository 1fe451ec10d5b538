//! Run the interpolation factor table on a small city and print one row
//! per input variant.

use gridcast::experiment::{matrix, run_experiment, RunOptions, Scale};
use gridcast::synth::{simulate, WorldConfig};

fn main() -> gridcast::Result<()> {
    let world = WorldConfig { hours: 240, ..WorldConfig::tiny() };
    let data = simulate(&world)?.dataset()?;
    let opts = RunOptions {
        scale: Scale::Desk,
        steps: Some(60),
        ..RunOptions::default()
    };
    println!("{:<16} {:>3} {:>8} {:>8} {:>8}", "experiment", "C", "RMSE", "spRMSE", "seconds");
    for spec in matrix("factors-interp")? {
        let (_, r) = run_experiment(&spec, &data, &opts)?;
        println!(
            "{:<16} {:>3} {:>8.3} {:>8.3} {:>8.1}",
            spec.name,
            r.channels.len(),
            r.rmse,
            r.sp_rmse.unwrap_or(f64::NAN),
            r.wall_clock_seconds
        );
    }
    Ok(())
}

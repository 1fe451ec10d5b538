//! Train the three-layer ConvLSTM encoder-forecaster on a small city and
//! print the RMSE of each of the 12 forecast hours.

use gridcast::experiment::{lookup, run_experiment, RunOptions, Scale};
use gridcast::synth::{simulate, WorldConfig};

fn main() -> gridcast::Result<()> {
    let world = WorldConfig { hours: 360, ..WorldConfig::tiny() };
    let data = simulate(&world)?.dataset()?;
    let opts = RunOptions {
        scale: Scale::Desk,
        steps: Some(150),
        ..RunOptions::default()
    };
    let (model, report) = run_experiment(&lookup("forecast_base")?, &data, &opts)?;
    println!(
        "{} layers {:?}, K = {}, final loss {:.5}",
        model.config.encoder_layers,
        model.config.channels,
        report.k,
        report.final_loss.unwrap_or(f64::NAN)
    );
    for (h, e) in report.per_step_rmse.iter().enumerate() {
        println!("  +{:2} h  RMSE {e:.3}", h + 1);
    }
    println!("overall {:.3}, persistence {:.3}", report.rmse, report.persistence_rmse);
    Ok(())
}

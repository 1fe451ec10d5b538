//! Train the one-step ConvLSTM interpolator on the benchmark city and
//! compare it with persistence.

use gridcast::experiment::{build_model, evaluate, lookup, train_model, RunOptions, Scale};
use gridcast::synth::{simulate, WorldConfig};

fn main() -> gridcast::Result<()> {
    let data = simulate(&WorldConfig::benchmark())?.dataset()?;
    let opts = RunOptions {
        scale: Scale::Desk,
        steps: Some(200),
        ..RunOptions::default()
    };
    let spec = lookup("interp_base")?;
    let (mut model, cfg) = build_model(&spec, &data, &opts)?;
    println!(
        "{} channels {:?}, {} steps of batch {} at lr {}",
        model.config.arch.name(),
        model.config.channels,
        cfg.steps,
        cfg.batch_size,
        cfg.learning_rate
    );
    let curve = train_model(&mut model, &data, &cfg, opts.train_stride)?;
    println!(
        "loss {:.5} -> {:.5}",
        curve.initial().unwrap_or(f64::NAN),
        curve.last().unwrap_or(f64::NAN)
    );
    let report = evaluate(&model, &data, &opts)?;
    println!(
        "test RMSE {:.3} (persistence {:.3}) over {} windows",
        report.rmse, report.persistence_rmse, report.test_windows
    );
    Ok(())
}

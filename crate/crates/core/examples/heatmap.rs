//! Predict one test hour and write the predicted and true pollutant
//! fields as PGM and CSV heatmaps.

use gridcast::experiment::{build_model, input_channels, lookup, train_model, RunOptions, Scale};
use gridcast::report::export_heatmap;
use gridcast::synth::{simulate, WorldConfig};

fn main() -> gridcast::Result<()> {
    let world = WorldConfig { hours: 300, ..WorldConfig::benchmark() };
    let sim = simulate(&world)?;
    let data = sim.dataset()?;
    let opts = RunOptions {
        scale: Scale::Desk,
        steps: Some(100),
        ..RunOptions::default()
    };
    let (mut model, cfg) = build_model(&lookup("interp_base")?, &data, &opts)?;
    train_model(&mut model, &data, &cfg, 1)?;

    let c = &model.config;
    let w = data.test_windows(c.j, c.k, 1)?.windows[0];
    let pred = model.predict(&data.inputs(&w, &input_channels(&data, c)))?;
    let hour = w.start + c.j;
    let pol = data.stats.pollutant();
    let truth = sim.truth_tensor().index0(hour).map(|v| pol.normalize(v as f64) as f32);

    let dir = std::env::temp_dir().join("gridcast_heatmap");
    export_heatmap(&dir, "predicted", &pred.index0(0))?;
    export_heatmap(&dir, "truth", &truth)?;
    println!("hour {hour}: wrote predicted and truth heatmaps to {}", dir.display());
    Ok(())
}

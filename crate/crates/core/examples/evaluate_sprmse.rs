//! Leave-one-station-out error of a trained interpolator: each station is
//! blanked from the inputs and predicted from its neighbours.

use gridcast::experiment::{build_model, input_channels, lookup, train_model, RunOptions, Scale};
use gridcast::metrics::{sp_rmse, NearestFill, SpRmseOptions};
use gridcast::synth::{simulate, WorldConfig};
use gridcast::train::DatasetSamples;

fn main() -> gridcast::Result<()> {
    let world = WorldConfig { hours: 600, ..WorldConfig::benchmark() };
    let data = simulate(&world)?.dataset()?;
    let opts = RunOptions {
        scale: Scale::Desk,
        steps: Some(150),
        ..RunOptions::default()
    };
    let (mut model, cfg) = build_model(&lookup("interp_base")?, &data, &opts)?;
    train_model(&mut model, &data, &cfg, 1)?;

    let c = &model.config;
    let windows = data.test_windows(c.j, c.k, 4)?.windows;
    let samples = DatasetSamples::new(&data, windows, input_channels(&data, c));
    let pol = data.stats.pollutant();
    let scale = pol.max - pol.min;
    let opts = SpRmseOptions::default();
    let convlstm = sp_rmse(&model, &samples, opts, scale)?;
    let nearest = sp_rmse(&NearestFill, &samples, opts, scale)?;
    println!("spRMSE convlstm {:.3}, nearest station {:.3}", convlstm.mean, nearest.mean);
    for (a, b) in convlstm.stations.iter().zip(&nearest.stations) {
        println!("  station ({:2},{:2})  {:7.3}  {:7.3}", a.row, a.col, a.rmse, b.rmse);
    }
    Ok(())
}

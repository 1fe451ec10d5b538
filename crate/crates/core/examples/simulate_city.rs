//! Generate the synthetic benchmark city, rasterize it and print a summary.

use gridcast::synth::{simulate, WorldConfig};

fn main() -> gridcast::Result<()> {
    let world = WorldConfig::benchmark();
    let sim = simulate(&world)?;
    let all: Vec<f64> = sim.truth.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let (lo, hi) = all
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "{} hours on {}x{}; field mean {mean:.1}, range [{lo:.1}, {hi:.1}]",
        sim.hours.len(),
        world.rows,
        world.cols
    );
    let spatial_var: f64 = sim
        .truth
        .iter()
        .map(|f| {
            let m = f.iter().sum::<f64>() / f.len() as f64;
            f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f.len() as f64
        })
        .sum::<f64>()
        / sim.truth.len() as f64;
    let step_change: f64 = sim
        .truth
        .windows(2)
        .map(|w| {
            w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / w[0].len() as f64
        })
        .sum::<f64>()
        / (sim.truth.len() - 1) as f64;
    println!("mean spatial variance {spatial_var:.1}; hour-to-hour RMS change {:.2}", step_change.sqrt());

    let data = sim.dataset()?;
    println!(
        "{} records -> {} frames of {} channels; train/test split at hour {}",
        data.report.records,
        data.len(),
        data.channels(),
        data.split
    );
    let stations = data.masks[0].sum();
    println!("{stations} of {} cells carry a pollution station", world.rows * world.cols);
    Ok(())
}

//! Export a simulated city as sensor CSV, rasterize it into a dataset
//! bundle and reload the bundle.

use gridcast::pipeline::{build_dataset, read_csv, Dataset};
use gridcast::synth::{simulate, WorldConfig, SENSORS_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("gridcast_rasterize_bundle");
    let world = WorldConfig { hours: 240, ..WorldConfig::default() };
    let sim = simulate(&world)?;
    sim.export(&dir)?;
    let csv = dir.join(SENSORS_FILE);
    let file = std::fs::File::open(&csv)?;
    let records = read_csv(file)?;
    println!("read {} records from {}", records.len(), csv.display());

    let data = build_dataset(&records, &world.raster_config()?)?;
    let r = &data.report;
    println!(
        "{} hours on a {}x{} grid, {} channels; {} outside the bounding box",
        data.len(),
        data.grid.rows,
        data.grid.cols,
        data.channels(),
        r.outside_bbox
    );
    for (i, c) in data.layout.channels().iter().enumerate() {
        let s = &data.stats.channels[i];
        println!("  {i:2} {:<18} [{:.2}, {:.2}]", c.name, s.min, s.max);
    }

    let bundle = dir.join("bundle");
    data.save(&bundle)?;
    let back = Dataset::load(&bundle)?;
    let windows = back.train_windows(12, 1, 1)?.windows.len();
    println!("bundle at {}: {} training windows of 12 + 1 hours", bundle.display(), windows);
    Ok(())
}

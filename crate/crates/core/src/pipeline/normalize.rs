//! Min-max scaling with statistics fitted on the training period.

use serde::{Deserialize, Serialize};

use super::grid::{ChannelGroup, ChannelLayout, GridFrame};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// One-hot channels pass through untouched.
    pub one_hot: bool,
    /// `max == min` on the training data; such channels normalize to 0.
    pub degenerate: bool,
}

impl ChannelStats {
    pub fn normalize(&self, v: f64) -> f64 {
        if self.one_hot {
            v
        } else if self.degenerate {
            0.0
        } else {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        if self.one_hot {
            v
        } else {
            self.min + v * (self.max - self.min)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<ChannelStats>,
}

impl NormStats {
    /// Fits per-channel ranges on `train`. The pollutant channel only looks
    /// at cells with a station; other channels use every cell.
    pub fn fit(train: &[GridFrame], layout: &ChannelLayout) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot fit normalization on zero frames".into()));
        }
        let infos = layout.channels();
        let cells = train[0].station_mask.len();
        let mut lo = vec![f64::INFINITY; infos.len()];
        let mut hi = vec![f64::NEG_INFINITY; infos.len()];
        for f in train {
            let data = f.channels.data();
            let mask = f.station_mask.data();
            for (c, info) in infos.iter().enumerate() {
                for cell in 0..cells {
                    if info.group == ChannelGroup::Pollution && mask[cell] < 0.5 {
                        continue;
                    }
                    let v = data[c * cells + cell] as f64;
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
        }
        let channels = infos
            .into_iter()
            .enumerate()
            .map(|(c, info)| {
                let one_hot = info.group == ChannelGroup::Wind;
                let (min, max) = if lo[c].is_finite() { (lo[c], hi[c]) } else { (0.0, 0.0) };
                ChannelStats {
                    name: info.name,
                    min,
                    max,
                    one_hot,
                    degenerate: !one_hot && max <= min,
                }
            })
            .collect();
        Ok(NormStats { channels })
    }

    pub fn pollutant(&self) -> &ChannelStats {
        &self.channels[0]
    }

    pub fn degenerate_channels(&self) -> Vec<&str> {
        self.channels
            .iter()
            .filter(|c| c.degenerate)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Scales frames in place. Pollutant cells without a station stay 0.
pub fn normalize(frames: &mut [GridFrame], stats: &NormStats) -> Result<()> {
    for f in frames.iter_mut() {
        let nc = f.channels.shape()[0];
        if nc != stats.channels.len() {
            return Err(Error::dim(
                "normalize",
                f.channels.shape(),
                &[stats.channels.len()],
            ));
        }
        let cells = f.station_mask.len();
        let mask = f.station_mask.data().to_vec();
        let data = f.channels.data_mut();
        for (c, s) in stats.channels.iter().enumerate() {
            for cell in 0..cells {
                let v = &mut data[c * cells + cell];
                *v = if c == 0 && mask[cell] < 0.5 {
                    0.0
                } else {
                    s.normalize(*v as f64) as f32
                };
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(min: f64, max: f64) -> ChannelStats {
        ChannelStats {
            name: "x".into(),
            min,
            max,
            one_hot: false,
            degenerate: max <= min,
        }
    }

    #[test]
    fn scaling_examples() {
        let s = stats(2.0, 6.0);
        let got: Vec<f64> = [2.0, 4.0, 6.0].iter().map(|&v| s.normalize(v)).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0]);
        assert_eq!(s.normalize(8.0), 1.0);
        assert_eq!(s.normalize(-1.0), 0.0);
        for v in [2.0, 3.3, 5.999] {
            assert!((s.denormalize(s.normalize(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_channel_maps_to_zero() {
        let s = stats(3.0, 3.0);
        assert!(s.degenerate);
        assert_eq!(s.normalize(3.0), 0.0);
        assert_eq!(s.normalize(10.0), 0.0);
    }
}

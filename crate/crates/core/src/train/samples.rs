use crate::pipeline::{Dataset, SampleWindow};
use crate::tensor::Tensor;

/// One supervised window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `J` frames `[C_in, M, N]`.
    pub inputs: Vec<Tensor<f32>>,
    /// Normalized pollutant `[K, M, N]`.
    pub target: Tensor<f32>,
    /// Station mask `[K, M, N]`.
    pub mask: Tensor<f32>,
}

/// Indexed source of samples, materialized on demand.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Sample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Sample {
        self[i].clone()
    }
}

impl Samples for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, i: usize) -> Sample {
        self[i].clone()
    }
}

/// Windows of a dataset restricted to a channel subset.
#[derive(Clone, Debug)]
pub struct DatasetSamples<'a> {
    pub dataset: &'a Dataset,
    pub windows: Vec<SampleWindow>,
    pub channels: Vec<usize>,
}

impl<'a> DatasetSamples<'a> {
    pub fn new(dataset: &'a Dataset, windows: Vec<SampleWindow>, channels: Vec<usize>) -> Self {
        DatasetSamples {
            dataset,
            windows,
            channels,
        }
    }
}

impl Samples for DatasetSamples<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn get(&self, i: usize) -> Sample {
        let w = &self.windows[i];
        Sample {
            inputs: self.dataset.inputs(w, &self.channels),
            target: self.dataset.targets(w),
            mask: self.dataset.target_mask(w),
        }
    }
}

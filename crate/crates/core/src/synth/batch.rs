use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use crate::error::DataError;

/// Position of one sample: dataset index and sample index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub dataset: usize,
    pub index: usize,
}

/// Mixed batches with a fixed number of samples per dataset.
///
/// Each dataset is walked through a seed-determined permutation that is
/// redrawn every epoch; batch `k` can be computed without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sizes: Vec<usize>,
    ratios: Vec<usize>,
    seed: u64,
    shuffle: bool,
}

impl BatchSampler {
    pub fn new(sizes: &[usize], ratios: &[usize], seed: u64, shuffle: bool) -> Result<Self, DataError> {
        if sizes.len() != ratios.len() || sizes.is_empty() {
            return Err(DataError::Geometry(format!(
                "{} datasets but {} ratios",
                sizes.len(),
                ratios.len()
            )));
        }
        if let Some(d) = sizes.iter().position(|&n| n == 0) {
            return Err(DataError::EmptyDataset(format!("#{d}")));
        }
        if ratios.iter().all(|&r| r == 0) {
            return Err(DataError::Geometry("ratios sum to zero".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            ratios: ratios.to_vec(),
            seed,
            shuffle,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ratios.iter().sum()
    }

    fn order(&self, dataset: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sizes[dataset]).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[dataset as u64, epoch as u64]));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Epoch dataset `dataset` is in at `step`.
    pub fn epoch(&self, dataset: usize, step: usize) -> usize {
        step * self.ratios[dataset] / self.sizes[dataset]
    }

    /// Steps needed for one pass over `dataset`.
    pub fn steps_per_epoch(&self, dataset: usize) -> usize {
        let r = self.ratios[dataset].max(1);
        self.sizes[dataset].div_ceil(r)
    }

    /// Samples of batch `step`, grouped by dataset in dataset order.
    pub fn batch(&self, step: usize) -> Vec<SampleRef> {
        let mut out = Vec::with_capacity(self.batch_size());
        for (d, (&n, &r)) in self.sizes.iter().zip(&self.ratios).enumerate() {
            let mut cached: Option<(usize, Vec<usize>)> = None;
            for i in 0..r {
                let pos = step * r + i;
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.order(d, epoch)));
                }
                let order = &cached.as_ref().expect("filled above").1;
                out.push(SampleRef {
                    dataset: d,
                    index: order[pos % n],
                });
            }
        }
        out
    }
}

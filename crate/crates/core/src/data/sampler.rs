//! Mixed-dataset batch sampling: draw a dataset per the normalized weights,
//! then a sample uniformly within it.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::CaptionSample;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixSpec {
    /// Dataset name -> nonnegative sampling weight. Empty means "proportional
    /// to dataset size".
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(weights: &[(&str, f64)], seed: u64) -> Self {
        MixSpec {
            weights: weights
                .iter()
                .map(|(n, w)| (n.to_string(), *w))
                .collect(),
            seed,
        }
    }

    /// Names with a strictly positive weight (all names when proportional).
    pub fn active_names(&self) -> Vec<&str> {
        self.weights
            .iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Infinite deterministic stream of batches over named datasets.
pub struct BatchStream<'a> {
    datasets: Vec<(&'a str, &'a [CaptionSample])>,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
    batch_size: usize,
}

pub fn sample_batches<'a>(
    mix: &MixSpec,
    datasets: &'a [(String, Vec<CaptionSample>)],
    batch_size: usize,
) -> Result<BatchStream<'a>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be >= 2 for in-batch negatives, got {batch_size}"
        )));
    }
    let mut active: Vec<(&str, &[CaptionSample], f64)> = Vec::new();
    for (name, samples) in datasets {
        let w = if mix.weights.is_empty() {
            samples.len() as f64
        } else {
            match mix.weights.get(name) {
                Some(&w) if w < 0.0 => {
                    return Err(Error::Config(format!(
                        "negative weight for dataset \"{name}\""
                    )))
                }
                Some(&w) => w,
                None => 0.0,
            }
        };
        if w > 0.0 {
            if samples.is_empty() {
                return Err(Error::Data(format!(
                    "dataset \"{name}\" has positive weight but no samples"
                )));
            }
            active.push((name.as_str(), samples.as_slice(), w));
        }
    }
    let total: f64 = active.iter().map(|(_, _, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Config(
            "mix has no dataset with positive weight".into(),
        ));
    }
    let mut cumulative = Vec::with_capacity(active.len());
    let mut acc = 0.0;
    for (_, _, w) in &active {
        acc += w / total;
        cumulative.push(acc);
    }
    // Guard against accumulated rounding at the top end.
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    Ok(BatchStream {
        datasets: active.iter().map(|(n, s, _)| (*n, *s)).collect(),
        cumulative,
        rng: ChaCha8Rng::seed_from_u64(mix.seed),
        batch_size,
    })
}

impl<'a> BatchStream<'a> {
    /// Total samples across active datasets; used for epoch accounting.
    pub fn active_len(&self) -> usize {
        self.datasets.iter().map(|(_, s)| s.len()).sum()
    }

    /// The stream's RNG, for checkpointing mid-run.
    pub fn rng_state(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng_state(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    fn draw(&mut self) -> (&'a str, &'a CaptionSample) {
        let r: f64 = self.rng.random();
        let mut k = 0;
        while k + 1 < self.cumulative.len() && r >= self.cumulative[k] {
            k += 1;
        }
        let (name, samples) = self.datasets[k];
        let idx = self.rng.random_range(0..samples.len());
        (name, &samples[idx])
    }

    /// Next batch along with the dataset name each element came from.
    pub fn next_batch(&mut self) -> Vec<(&'a str, &'a CaptionSample)> {
        (0..self.batch_size).map(|_| self.draw()).collect()
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Vec<&'a CaptionSample>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch().into_iter().map(|(_, s)| s).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Split};

    fn dataset(name: &str, n: usize, domain: Domain) -> (String, Vec<CaptionSample>) {
        let samples = (0..n)
            .map(|i| CaptionSample {
                image_ref: format!("{name}_{i}.ppm"),
                caption: format!("sample {i}"),
                domain,
                split: Split::Train,
            })
            .collect();
        (name.to_string(), samples)
    }

    fn medical_fraction(weights: &[(&str, f64)], draws: usize) -> f64 {
        let data = vec![
            dataset("general", 40, Domain::General),
            dataset("medical", 40, Domain::Medical),
        ];
        let mix = MixSpec::new(weights, 99);
        let mut stream = sample_batches(&mix, &data, 2).unwrap();
        let mut medical = 0usize;
        let mut total = 0usize;
        while total < draws {
            for (name, _) in stream.next_batch() {
                if name == "medical" {
                    medical += 1;
                }
                total += 1;
            }
        }
        medical as f64 / total as f64
    }

    #[test]
    fn degenerate_mix_is_pure() {
        assert_eq!(medical_fraction(&[("general", 1.0), ("medical", 0.0)], 500), 0.0);
    }

    #[test]
    fn even_mix_is_half_medical() {
        let f = medical_fraction(&[("general", 1.0), ("medical", 1.0)], 10_000);
        assert!((f - 0.5).abs() <= 0.02, "fraction {f}");
    }

    #[test]
    fn three_to_one_mix_is_quarter_medical() {
        let f = medical_fraction(&[("general", 3.0), ("medical", 1.0)], 10_000);
        assert!((f - 0.25).abs() <= 0.02, "fraction {f}");
    }

    #[test]
    fn proportional_default_follows_sizes() {
        let data = vec![
            dataset("general", 30, Domain::General),
            dataset("medical", 10, Domain::Medical),
        ];
        let mix = MixSpec {
            weights: BTreeMap::new(),
            seed: 3,
        };
        let mut stream = sample_batches(&mix, &data, 4).unwrap();
        let mut medical = 0usize;
        let total = 10_000;
        for _ in 0..total / 4 {
            for (name, _) in stream.next_batch() {
                if name == "medical" {
                    medical += 1;
                }
            }
        }
        let f = medical as f64 / total as f64;
        assert!((f - 0.25).abs() <= 0.02, "fraction {f}");
    }

    #[test]
    fn small_batch_and_zero_weights_error() {
        let data = vec![dataset("general", 5, Domain::General)];
        assert!(sample_batches(&MixSpec::new(&[("general", 1.0)], 0), &data, 1).is_err());
        assert!(sample_batches(&MixSpec::new(&[("general", 0.0)], 0), &data, 2).is_err());
    }

    #[test]
    fn stream_is_reproducible() {
        let data = vec![
            dataset("general", 17, Domain::General),
            dataset("medical", 13, Domain::Medical),
        ];
        let mix = MixSpec::new(&[("general", 1.0), ("medical", 2.0)], 42);
        let collect = || {
            let mut s = sample_batches(&mix, &data, 3).unwrap();
            (0..20)
                .flat_map(|_| s.next_batch())
                .map(|(_, smp)| smp.image_ref.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(), collect());
    }
}

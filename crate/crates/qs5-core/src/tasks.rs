//! Synthetic tasks used by the experiment harness.
//!
//! The toy classification task asks which of K frequency patterns
//! generated a noisy length-256 sequence. Fully generated, no downloads.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynsys::ForecastDataset;
use crate::error::{QssmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassificationConfig {
    pub classes: usize,
    pub seq_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyClassificationConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            seq_len: 256,
            train_per_class: 24,
            test_per_class: 12,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyDataset {
    pub train: Vec<(Array2<f64>, usize)>,
    pub test: Vec<(Array2<f64>, usize)>,
    pub classes: usize,
}

/// Datasets the training loop understands.
#[derive(Debug, Clone)]
pub enum TaskData {
    Forecast(ForecastDataset),
    Classify(ClassifyDataset),
}

fn class_frequency(k: usize) -> f64 {
    // well-separated frequencies, cycles per step
    0.01 * (k + 1) as f64 * 2.0
}

fn make_example(cfg: &ToyClassificationConfig, class: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let f = class_frequency(class);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    Array2::from_shape_fn((cfg.seq_len, 1), |(t, _)| {
        let x = (std::f64::consts::TAU * f * t as f64 + phase).sin();
        x + cfg.noise * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn generate_toy_classification(cfg: &ToyClassificationConfig) -> Result<ClassifyDataset> {
    if cfg.classes < 2 || cfg.seq_len < 2 {
        return Err(QssmError::InvalidConfig(
            "toy classification needs >= 2 classes and seq_len >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..cfg.classes {
        for _ in 0..cfg.train_per_class {
            train.push((make_example(cfg, class, &mut rng), class));
        }
        for _ in 0..cfg.test_per_class {
            test.push((make_example(cfg, class, &mut rng), class));
        }
    }
    Ok(ClassifyDataset {
        train,
        test,
        classes: cfg.classes,
    })
}

//! Contrastive datasets drawn from the subject by rejection sampling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Behavior, Subject};
use crate::error::{Error, Result};
use crate::linalg::{serde_vectors, Vector};

/// Radii this close to r₀ are redrawn; the label there is decided by rounding.
const BOUNDARY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    #[serde(with = "serde_vectors")]
    pub tokens: Vec<Vector>,
    pub label: Behavior,
    /// Ground-truth planted radius, for diagnostics only.
    pub radius: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_test_pos: usize,
    pub n_test_neg: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg: 100,
            n_test_pos: 100,
            n_test_neg: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContrastiveDataset {
    pub examples: Vec<Example>,
}

impl ContrastiveDataset {
    pub fn select(&self, label: Behavior, split: Split) -> Vec<&Example> {
        self.examples
            .iter()
            .filter(|e| e.label == label && e.split == split)
            .collect()
    }

    pub fn positives(&self, split: Split) -> Vec<&Example> {
        self.select(Behavior::Comply, split)
    }

    pub fn negatives(&self, split: Split) -> Vec<&Example> {
        self.select(Behavior::Refuse, split)
    }
}

/// Draws inputs with uniform angle and uniform radius until every
/// (label, split) quota is met; every kept example passes the planted check.
pub fn generate_dataset(subject: &Subject, config: &DatasetConfig, seed: u64) -> Result<ContrastiveDataset> {
    if config.n_pos == 0 || config.n_neg == 0 {
        return Err(Error::invalid("n_pos and n_neg must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = subject.config().radius_range;
    let r0 = subject.r0();
    let mut examples = Vec::new();
    for (split, n_pos, n_neg) in [
        (Split::Train, config.n_pos, config.n_neg),
        (Split::Test, config.n_test_pos, config.n_test_neg),
    ] {
        let (mut pos, mut neg) = (0, 0);
        let budget = 100 * (n_pos + n_neg) + 1000;
        let mut attempts = 0;
        while pos < n_pos || neg < n_neg {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Sampling(format!(
                    "{split:?} split still needs {} positives and {} negatives after {budget} draws",
                    n_pos - pos,
                    n_neg - neg
                )));
            }
            let radius = rng.random_range(lo..hi);
            if (radius - r0).abs() < BOUNDARY_MARGIN {
                continue;
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let tokens = subject.make_input(radius, angle, &mut rng);
            let run = subject.forward(&tokens)?;
            subject.check_planted(&run)?;
            let want = match run.behavior {
                Behavior::Comply => pos < n_pos,
                Behavior::Refuse => neg < n_neg,
            };
            if !want {
                continue;
            }
            match run.behavior {
                Behavior::Comply => pos += 1,
                Behavior::Refuse => neg += 1,
            }
            examples.push(Example {
                tokens,
                label: run.behavior,
                radius,
                split,
            });
        }
    }
    Ok(ContrastiveDataset { examples })
}

pub fn write_jsonl(dataset: &ContrastiveDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in &dataset.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<ContrastiveDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    Ok(ContrastiveDataset { examples })
}

//! Deterministic synthetic action-stream generator: class-conditional
//! Gaussian features over segments of sub-second scale, with no immediately
//! repeating segment class so transcripts and segments coincide.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassVocabulary, Dataset, DatasetSplit, FeatureSequence, LabelSequence};
use crate::error::{HrtrError, Result};

fn default_sample_rate() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_trials: usize,
    pub num_classes: usize,
    /// Frames per segment, inclusive. The default 20..150 is 0.2-1.5 s at
    /// 100 Hz.
    pub duration_range: (usize, usize),
    pub segments_range: (usize, usize),
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Optional explicit per-class mean vectors; defaults to orthogonal unit
    /// vectors (requires num_classes <= feature_dim).
    #[serde(default)]
    pub class_means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_trials: 20,
            num_classes: 5,
            duration_range: (20, 150),
            segments_range: (3, 8),
            feature_dim: 8,
            noise_std: 0.1,
            seed: 0,
            class_means: None,
            val_fraction: 0.0,
            test_fraction: 0.0,
            sample_rate_hz: 100.0,
        }
    }
}

impl SynthSpec {
    fn means(&self) -> Result<Vec<Vec<f64>>> {
        let means = match &self.class_means {
            Some(m) => m.clone(),
            None => {
                if self.num_classes > self.feature_dim {
                    return Err(HrtrError::Config(
                        "default class means need num_classes <= feature_dim; provide class_means"
                            .into(),
                    ));
                }
                (0..self.num_classes)
                    .map(|c| {
                        let mut v = vec![0.0; self.feature_dim];
                        v[c] = 1.0;
                        v
                    })
                    .collect()
            }
        };
        if means.len() != self.num_classes
            || means.iter().any(|m| m.len() != self.feature_dim)
        {
            return Err(HrtrError::Config(format!(
                "class_means must be {} vectors of length {}",
                self.num_classes, self.feature_dim
            )));
        }
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                if means[a] == means[b] {
                    return Err(HrtrError::Config(format!(
                        "class means {a} and {b} are identical"
                    )));
                }
            }
        }
        Ok(means)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trials == 0 || self.num_classes < 2 || self.feature_dim == 0 {
            return Err(HrtrError::Config(
                "num_trials, feature_dim must be positive and num_classes >= 2".into(),
            ));
        }
        let (dmin, dmax) = self.duration_range;
        if dmin < 1 || dmax < dmin {
            return Err(HrtrError::Config(format!(
                "bad duration range [{dmin}, {dmax}]"
            )));
        }
        let (smin, smax) = self.segments_range;
        if smin < 1 || smax < smin {
            return Err(HrtrError::Config(format!(
                "bad segments range [{smin}, {smax}]"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(HrtrError::Config("noise_std must be non-negative".into()));
        }
        if self.val_fraction < 0.0
            || self.test_fraction < 0.0
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(HrtrError::Config("val/test fractions must leave a train share".into()));
        }
        self.means().map(|_| ())
    }
}

/// Generates a dataset. Trials derive per-trial seeds from the top-level
/// seed, so output is bitwise deterministic.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.means()?;
    let vocab = ClassVocabulary::new(
        (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
    )?;
    let mut sequences = Vec::with_capacity(spec.num_trials);
    for trial in 0..spec.num_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(trial as u64 + 1);
        let trial_id = format!("trial{trial:04}");
        let num_segments = rng.gen_range(spec.segments_range.0..=spec.segments_range.1);
        let mut labels = Vec::new();
        let mut prev_class: Option<usize> = None;
        for _ in 0..num_segments {
            // resample to forbid immediate repeats
            let class = loop {
                let c = rng.gen_range(0..spec.num_classes);
                if Some(c) != prev_class {
                    break c;
                }
            };
            prev_class = Some(class);
            let duration = rng.gen_range(spec.duration_range.0..=spec.duration_range.1);
            labels.extend(std::iter::repeat(class).take(duration));
        }
        let t = labels.len();
        let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
            .map_err(|e| HrtrError::Config(e.to_string()))?;
        let mut features = Array2::zeros((t, spec.feature_dim));
        for (i, &class) in labels.iter().enumerate() {
            for j in 0..spec.feature_dim {
                let n = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                features[[i, j]] = (means[class][j] + n) as f32;
            }
        }
        let fseq = FeatureSequence::new(trial_id.clone(), features, spec.sample_rate_hz)?;
        let lseq = LabelSequence { trial_id, labels };
        sequences.push((fseq, lseq));
    }

    let n = spec.num_trials;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_train = n - n_val - n_test;
    let ids: Vec<String> = sequences.iter().map(|(f, _)| f.trial_id.clone()).collect();
    let split = DatasetSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    Dataset::from_parts(vocab, split, sequences)
}

//! Domain types and file ingestion for feature streams, labels, vocabularies
//! and dataset splits.
//!
//! Feature files are a short text header followed by row-major little-endian
//! f32 values, so loads are bit-exact. Labels are CSV of
//! `(frame_index, class_name)` and the vocabulary is an ordered list of class
//! names, one per line; its ordering fixes class ids and confusion-matrix axes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{HrtrError, Result};

const FEATURE_MAGIC: &str = "HRTR-FEATURES 1";

/// Ordered class names; position in the list is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(HrtrError::Data(format!(
                "vocabulary needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(HrtrError::Data("empty class name".into()));
            }
            if !seen.insert(n.clone()) {
                return Err(HrtrError::Data(format!("duplicate class name: {n}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| HrtrError::Data(format!("unknown class: {name}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for n in &self.names {
            out.push_str(n);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// One trial's feature stream: a T x D matrix plus its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub trial_id: String,
    pub features: Array2<f32>,
    pub sample_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(trial_id: String, features: Array2<f32>, sample_rate_hz: f64) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(HrtrError::Data(format!(
                "trial {trial_id}: feature matrix must be at least 1x1"
            )));
        }
        if sample_rate_hz <= 0.0 {
            return Err(HrtrError::Data(format!(
                "trial {trial_id}: sample rate must be positive"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(HrtrError::Data(format!(
                "corrupt feature data in trial {trial_id}: non-finite value"
            )));
        }
        Ok(Self {
            trial_id,
            features,
            sample_rate_hz,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let mut next_line = |what: &str| -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| HrtrError::Data(format!("{}: truncated header ({what})", path.display())))?;
            let line = String::from_utf8(rest[..end].to_vec())
                .map_err(|_| HrtrError::Data(format!("{}: non-utf8 header", path.display())))?;
            pos += end + 1;
            Ok(line)
        };

        let magic = next_line("magic")?;
        if magic != FEATURE_MAGIC {
            return Err(HrtrError::Data(format!(
                "{}: not a feature file (bad magic)",
                path.display()
            )));
        }
        let mut fields = HashMap::new();
        for what in ["trial_id", "frames", "dims", "sample_rate_hz"] {
            let line = next_line(what)?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HrtrError::Data(format!("{}: malformed header line '{line}'", path.display())))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| HrtrError::Data(format!("{}: missing header field {k}", path.display())))
        };
        let trial_id = get("trial_id")?.clone();
        let t: usize = get("frames")?
            .parse()
            .map_err(|_| HrtrError::Data(format!("{}: bad frames field", path.display())))?;
        let d: usize = get("dims")?
            .parse()
            .map_err(|_| HrtrError::Data(format!("{}: bad dims field", path.display())))?;
        let rate: f64 = get("sample_rate_hz")?
            .parse()
            .map_err(|_| HrtrError::Data(format!("{}: bad sample_rate_hz field", path.display())))?;

        let payload = &bytes[pos..];
        if payload.len() != t * d * 4 {
            return Err(HrtrError::Data(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                t * d * 4,
                payload.len()
            )));
        }
        let mut values = Vec::with_capacity(t * d);
        for chunk in payload.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let features = Array2::from_shape_vec((t, d), values)
            .map_err(|e| HrtrError::Data(format!("{}: {e}", path.display())))?;
        Self::new(trial_id, features, rate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        write!(
            file,
            "{FEATURE_MAGIC}\ntrial_id={}\nframes={}\ndims={}\nsample_rate_hz={}\n",
            self.trial_id,
            self.num_frames(),
            self.dim(),
            self.sample_rate_hz
        )?;
        let mut buf = Vec::with_capacity(self.features.len() * 4);
        for v in self.features.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
        Ok(())
    }
}

/// Per-frame class ids for one trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub trial_id: String,
    pub labels: Vec<usize>,
}

impl LabelSequence {
    pub fn load(path: &Path, trial_id: &str, vocab: &ClassVocabulary) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("frame_index") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (idx, name) = line
                .split_once(',')
                .ok_or_else(|| HrtrError::Data(format!("{}: malformed label row '{line}'", path.display())))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| HrtrError::Data(format!("{}: bad frame index '{idx}'", path.display())))?;
            if idx != labels.len() {
                return Err(HrtrError::Data(format!(
                    "{}: frame indices must be contiguous from 0, got {idx} at row {}",
                    path.display(),
                    labels.len()
                )));
            }
            labels.push(vocab.id_of(name.trim())?);
        }
        Ok(Self {
            trial_id: trial_id.to_string(),
            labels,
        })
    }

    pub fn save(&self, path: &Path, vocab: &ClassVocabulary) -> Result<()> {
        let mut out = String::from("frame_index,class_name\n");
        for (i, &c) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", vocab.name(c)));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Disjoint train/val/test lists of trial ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.all_ids() {
            if !seen.insert(id.clone()) {
                return Err(HrtrError::Data(format!(
                    "trial {id} appears in more than one split section"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut split = DatasetSplit::default();
        let mut current: Option<&mut Vec<String>> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "train:" => current = Some(&mut split.train),
                "val:" => current = Some(&mut split.val),
                "test:" => current = Some(&mut split.test),
                id => match current {
                    Some(ref mut section) => section.push(id.to_string()),
                    None => {
                        return Err(HrtrError::Data(format!(
                            "{}: trial id '{id}' before any section header",
                            path.display()
                        )))
                    }
                },
            }
        }
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (header, ids) in [("train:", &self.train), ("val:", &self.val), ("test:", &self.test)] {
            out.push_str(header);
            out.push('\n');
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// A fully validated dataset: vocabulary, splits and per-trial sequences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: ClassVocabulary,
    pub split: DatasetSplit,
    trials: HashMap<String, (FeatureSequence, LabelSequence)>,
    feature_dim: usize,
}

impl Dataset {
    pub fn from_parts(
        vocab: ClassVocabulary,
        split: DatasetSplit,
        sequences: Vec<(FeatureSequence, LabelSequence)>,
    ) -> Result<Self> {
        split.validate()?;
        let mut trials = HashMap::new();
        let mut feature_dim = None;
        for (f, l) in sequences {
            if f.trial_id != l.trial_id {
                return Err(HrtrError::Data(format!(
                    "feature/label trial id mismatch: {} vs {}",
                    f.trial_id, l.trial_id
                )));
            }
            if f.num_frames() != l.labels.len() {
                return Err(HrtrError::Data(format!(
                    "length mismatch in trial {}: {} feature frames vs {} labels",
                    f.trial_id,
                    f.num_frames(),
                    l.labels.len()
                )));
            }
            if let Some(&bad) = l.labels.iter().find(|&&c| c >= vocab.len()) {
                return Err(HrtrError::Data(format!(
                    "trial {}: class id {bad} out of range for {} classes",
                    f.trial_id,
                    vocab.len()
                )));
            }
            match feature_dim {
                None => feature_dim = Some(f.dim()),
                Some(d) if d != f.dim() => {
                    return Err(HrtrError::Data(format!(
                        "feature dimension mismatch: trial {} has D={}, expected D={d}",
                        f.trial_id,
                        f.dim()
                    )))
                }
                _ => {}
            }
            trials.insert(f.trial_id.clone(), (f, l));
        }
        for id in split.all_ids() {
            if !trials.contains_key(id) {
                return Err(HrtrError::Data(format!("trial not found: {id}")));
            }
        }
        let feature_dim =
            feature_dim.ok_or_else(|| HrtrError::Data("dataset has no trials".into()))?;
        Ok(Self {
            vocab,
            split,
            trials,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn trial(&self, id: &str) -> Result<(&FeatureSequence, &LabelSequence)> {
        self.trials
            .get(id)
            .map(|(f, l)| (f, l))
            .ok_or_else(|| HrtrError::Data(format!("trial not found: {id}")))
    }

    pub fn trial_ids(&self) -> impl Iterator<Item = &String> {
        self.trials.keys()
    }
}

fn feature_path(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("{trial_id}.feat"))
}

fn label_path(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("{trial_id}.csv"))
}

/// Loads and validates a dataset from its four on-disk pieces. Every trial
/// named in the split file must resolve to one feature and one label file.
pub fn load_dataset(
    features_dir: &Path,
    labels_dir: &Path,
    vocab_file: &Path,
    split_file: &Path,
) -> Result<Dataset> {
    let vocab = ClassVocabulary::load(vocab_file)?;
    let split = DatasetSplit::load(split_file)?;
    let mut sequences = Vec::new();
    for id in split.all_ids() {
        let fpath = feature_path(features_dir, id);
        let lpath = label_path(labels_dir, id);
        if !fpath.exists() || !lpath.exists() {
            return Err(HrtrError::Data(format!("trial not found: {id}")));
        }
        let features = FeatureSequence::load(&fpath)?;
        if features.trial_id != *id {
            return Err(HrtrError::Data(format!(
                "{}: header trial_id '{}' does not match file name",
                fpath.display(),
                features.trial_id
            )));
        }
        let labels = LabelSequence::load(&lpath, id, &vocab)?;
        sequences.push((features, labels));
    }
    Dataset::from_parts(vocab, split, sequences)
}

/// Writes a dataset back out in the same on-disk layout `load_dataset` reads.
pub fn save_dataset(dataset: &Dataset, features_dir: &Path, labels_dir: &Path) -> Result<()> {
    fs::create_dir_all(features_dir)?;
    fs::create_dir_all(labels_dir)?;
    for id in dataset.split.all_ids() {
        let (f, l) = dataset.trial(id)?;
        f.save(&feature_path(features_dir, id))?;
        l.save(&label_path(labels_dir, id), &dataset.vocab)?;
    }
    Ok(())
}

/// Emits one CSV row per frame: frame index, argmax class name (ties broken by
/// lowest class id), then the C probability columns.
pub fn write_predictions(
    path: &Path,
    probs: ArrayView2<f64>,
    vocab: &ClassVocabulary,
) -> Result<()> {
    if probs.ncols() != vocab.len() {
        return Err(HrtrError::Data(format!(
            "prediction width {} does not match vocabulary size {}",
            probs.ncols(),
            vocab.len()
        )));
    }
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(HrtrError::Numeric("non-finite prediction probability".into()));
    }
    let mut out = String::from("frame_index,label");
    for name in vocab.names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, row) in probs.outer_iter().enumerate() {
        let best = argmax(row.as_slice().unwrap());
        out.push_str(&format!("{i},{}", vocab.name(best)));
        for v in row.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Index of the largest value; first occurrence wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

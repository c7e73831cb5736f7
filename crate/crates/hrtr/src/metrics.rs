//! Segment-transcript metrics (Levenshtein, edit score, action error rate),
//! frame-level classification metrics, and the end-to-end evaluation over a
//! dataset split.

use ndarray::{Array2, Array3, ArrayView2};
use serde::Serialize;

use crate::data::{argmax, Dataset};
use crate::error::{HrtrError, Result};
use crate::model::{forward_eval, ModelParams};
use crate::windowing::{make_inference_windows, reassemble, smooth, SmoothSpec, WindowSpec};

/// Ordered segment labels with adjacent duplicates collapsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript(pub Vec<usize>);

/// Run-length collapse of a frame label sequence.
pub fn to_transcript(labels: &[usize]) -> Transcript {
    let mut out = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    Transcript(out)
}

/// Unit-cost edit distance via the standard two-row dynamic program.
pub fn levenshtein(g: &Transcript, p: &Transcript) -> usize {
    let (a, b) = (&g.0, &p.0);
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(1 - L/max(|G|,|P|)) * 100`. Two empty transcripts agree perfectly: 100.
pub fn edit_score(g: &Transcript, p: &Transcript) -> f64 {
    let denom = g.0.len().max(p.0.len());
    if denom == 0 {
        return 100.0;
    }
    (1.0 - levenshtein(g, p) as f64 / denom as f64) * 100.0
}

/// `L / |G|`; exceeds 1 when P over-produces segments. Errors on empty G.
pub fn aer(g: &Transcript, p: &Transcript) -> Result<f64> {
    if g.0.is_empty() {
        return Err(HrtrError::Data("AER undefined for empty ground-truth transcript".into()));
    }
    Ok(levenshtein(g, p) as f64 / g.0.len() as f64)
}

/// Per-class one-vs-rest frame metrics.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub edit_score: f64,
    pub aer: f64,
    pub frame_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are ground truth, columns predictions, in vocabulary order.
    pub confusion: Vec<Vec<usize>>,
}

/// How per-trial segment metrics are combined into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of per-trial ES and AER.
    #[default]
    PerTrialMean,
    /// Distances and normalizers summed over trials before dividing.
    Pooled,
}

fn div0(num: f64, den: f64, empty: f64) -> f64 {
    if den == 0.0 {
        empty
    } else {
        num / den
    }
}

/// Confusion matrix plus the derived per-class and frame-level metrics.
pub fn frame_metrics(
    gt_frames: &[usize],
    pred_frames: &[usize],
    class_names: &[String],
) -> Result<(Vec<Vec<usize>>, f64, Vec<ClassMetrics>)> {
    if gt_frames.len() != pred_frames.len() {
        return Err(HrtrError::Data(format!(
            "frame metric length mismatch: {} vs {}",
            gt_frames.len(),
            pred_frames.len()
        )));
    }
    let c = class_names.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&g, &p) in gt_frames.iter().zip(pred_frames.iter()) {
        if g >= c || p >= c {
            return Err(HrtrError::Data(format!("class id out of range: gt {g}, pred {p}")));
        }
        confusion[g][p] += 1;
    }
    let total = gt_frames.len() as f64;
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let frame_accuracy = if total > 0.0 { correct as f64 / total } else { 0.0 };

    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let fn_ = confusion[k].iter().sum::<usize>() as f64 - tp;
        let fp = (0..c).map(|g| confusion[g][k]).sum::<usize>() as f64 - tp;
        let tn = total - tp - fn_ - fp;
        let sensitivity = div0(tp, tp + fn_, 0.0);
        let specificity = div0(tn, tn + fp, 1.0);
        let precision = div0(tp, tp + fp, 0.0);
        let f1 = div0(
            2.0 * precision * sensitivity,
            precision + sensitivity,
            0.0,
        );
        per_class.push(ClassMetrics {
            class: class_names[k].clone(),
            sensitivity,
            specificity,
            f1,
        });
    }
    Ok((confusion, frame_accuracy, per_class))
}

/// Non-overlapping window inference for one trial: returns T x C softmax
/// probabilities (pre-smoothing).
pub fn predict_probs(
    params: &ModelParams,
    features: ArrayView2<f32>,
    window_size: usize,
) -> Result<Array2<f64>> {
    let t = features.nrows();
    let d = features.ncols();
    let c = params.config.num_classes;
    let tiles = make_inference_windows(t, window_size);
    let mut batch = Array3::zeros((tiles.len(), window_size, d));
    for (bi, &(start, valid)) in tiles.iter().enumerate() {
        for i in 0..valid {
            for j in 0..d {
                batch[[bi, i, j]] = features[[start + i, j]] as f64;
            }
        }
        // padded tail frames stay zero
    }
    let logits = forward_eval(params, &batch)?;
    let pieces: Vec<(usize, usize, Array2<f64>)> = tiles
        .iter()
        .enumerate()
        .map(|(bi, &(start, valid))| {
            let mut probs = logits.slice(ndarray::s![bi, .., ..]).to_owned();
            for mut row in probs.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            (start, valid, probs)
        })
        .collect();
    reassemble(&pieces, t, c)
}

/// Evaluates arbitrary per-trial probability predictors. `predict` maps a
/// trial id to T x C probabilities; smoothing, argmax, transcript collapse
/// and metric aggregation happen here.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    trial_ids: &[String],
    mut predict: F,
    smooth_spec: Option<SmoothSpec>,
    aggregation: Aggregation,
) -> Result<MetricsReport>
where
    F: FnMut(&str) -> Result<Array2<f64>>,
{
    if trial_ids.is_empty() {
        return Err(HrtrError::Data("evaluation split is empty".into()));
    }
    let class_names = dataset.vocab.names().to_vec();
    let mut es_sum = 0.0;
    let mut aer_sum = 0.0;
    let mut lev_sum = 0usize;
    let mut max_sum = 0usize;
    let mut glen_sum = 0usize;
    let mut gt_all = Vec::new();
    let mut pred_all = Vec::new();
    for id in trial_ids {
        let (_, labels) = dataset.trial(id)?;
        let mut probs = predict(id)?;
        if probs.nrows() != labels.labels.len() || probs.ncols() != dataset.num_classes() {
            return Err(HrtrError::Data(format!(
                "trial {id}: prediction shape {}x{} does not match {} frames x {} classes",
                probs.nrows(),
                probs.ncols(),
                labels.labels.len(),
                dataset.num_classes()
            )));
        }
        if let Some(spec) = smooth_spec {
            probs = smooth(probs.view(), &spec);
        }
        let pred_frames: Vec<usize> = probs
            .rows()
            .into_iter()
            .map(|row| argmax(row.as_slice().unwrap()))
            .collect();
        let g = to_transcript(&labels.labels);
        let p = to_transcript(&pred_frames);
        es_sum += edit_score(&g, &p);
        aer_sum += aer(&g, &p)?;
        lev_sum += levenshtein(&g, &p);
        max_sum += g.0.len().max(p.0.len());
        glen_sum += g.0.len();
        gt_all.extend_from_slice(&labels.labels);
        pred_all.extend_from_slice(&pred_frames);
    }
    let n = trial_ids.len() as f64;
    let (edit_score, aer) = match aggregation {
        Aggregation::PerTrialMean => (es_sum / n, aer_sum / n),
        Aggregation::Pooled => (
            (1.0 - lev_sum as f64 / max_sum as f64) * 100.0,
            lev_sum as f64 / glen_sum as f64,
        ),
    };
    let (confusion, frame_accuracy, per_class) =
        frame_metrics(&gt_all, &pred_all, &class_names)?;
    Ok(MetricsReport {
        edit_score,
        aer,
        frame_accuracy,
        per_class,
        confusion,
    })
}

/// Standard model-backed evaluation over a split.
pub fn evaluate(
    dataset: &Dataset,
    trial_ids: &[String],
    params: &ModelParams,
    window_spec: &WindowSpec,
    smooth_spec: Option<SmoothSpec>,
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    if dataset.feature_dim() != params.config.input_dim
        || dataset.num_classes() != params.config.num_classes
    {
        return Err(HrtrError::Data(format!(
            "checkpoint expects D={} C={}, dataset has D={} C={}",
            params.config.input_dim,
            params.config.num_classes,
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }
    evaluate_with(
        dataset,
        trial_ids,
        |id| {
            let (features, _) = dataset.trial(id)?;
            predict_probs(params, features.features.view(), window_spec.size)
        },
        smooth_spec,
        aggregation,
    )
}

/// One-hot probabilities built from the ground-truth labels; the oracle
/// predictor used by `eval --oracle` and self-evaluation tests.
pub fn oracle_probs(dataset: &Dataset, trial_id: &str) -> Result<Array2<f64>> {
    let (_, labels) = dataset.trial(trial_id)?;
    let mut probs = Array2::zeros((labels.labels.len(), dataset.num_classes()));
    for (i, &c) in labels.labels.iter().enumerate() {
        probs[[i, c]] = 1.0;
    }
    Ok(probs)
}

/// Confusion matrix as CSV with vocabulary-ordered headers.
pub fn confusion_csv(confusion: &[Vec<usize>], class_names: &[String]) -> String {
    let mut out = String::from("gt\\pred");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (g, row) in confusion.iter().enumerate() {
        out.push_str(&class_names[g]);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

//! Sliding windows for training, non-overlapping inference tiling with
//! reassembly, and the moving-average output smoothing used by the "+"
//! variants.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{HrtrError, Result};

/// Window size and training stride, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 1 {
            return Err(HrtrError::Config("window size must be >= 1".into()));
        }
        if self.stride < 1 || self.stride > self.size {
            return Err(HrtrError::Config(format!(
                "stride must be in 1..={}, got {}",
                self.size, self.stride
            )));
        }
        Ok(())
    }
}

/// Smoothing kernel width in frames. Even widths centre left-heavy at k/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub kernel: usize,
}

impl SmoothSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 {
            return Err(HrtrError::Config("smoothing kernel must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training start offsets: aligned strides plus one tail window at T - w when
/// the stride grid misses the final frames. Trials shorter than w yield a
/// single padded window at 0.
pub fn make_training_windows(num_frames: usize, spec: &WindowSpec) -> Vec<usize> {
    assert!(num_frames >= 1);
    let (w, s) = (spec.size, spec.stride);
    if num_frames < w {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=(num_frames - w)).step_by(s).collect();
    if (num_frames - w) % s != 0 {
        starts.push(num_frames - w);
    }
    starts
}

/// Non-overlapping inference tiling: (start, valid_len) pairs. Only the last
/// window may be partial; its tail frames are zero-padded by the caller.
pub fn make_inference_windows(num_frames: usize, window_size: usize) -> Vec<(usize, usize)> {
    assert!(num_frames >= 1);
    (0..num_frames)
        .step_by(window_size)
        .map(|start| (start, window_size.min(num_frames - start)))
        .collect()
}

/// Concatenates the valid prefixes of per-window outputs back into a T x C
/// matrix. Windows must tile [0, T) exactly.
pub fn reassemble(
    window_probs: &[(usize, usize, Array2<f64>)],
    num_frames: usize,
    num_classes: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((num_frames, num_classes));
    let mut next = 0usize;
    for (start, valid_len, probs) in window_probs {
        if *start != next {
            return Err(HrtrError::Tiling(format!(
                "expected window at frame {next}, got {start}"
            )));
        }
        if start + valid_len > num_frames {
            return Err(HrtrError::Tiling(format!(
                "window ({start}, {valid_len}) overruns T={num_frames}"
            )));
        }
        if probs.nrows() < *valid_len || probs.ncols() != num_classes {
            return Err(HrtrError::Tiling(format!(
                "window output {}x{} cannot supply {valid_len} rows of {num_classes} classes",
                probs.nrows(),
                probs.ncols()
            )));
        }
        out.slice_mut(ndarray::s![*start..start + valid_len, ..])
            .assign(&probs.slice(ndarray::s![..*valid_len, ..]));
        next = start + valid_len;
    }
    if next != num_frames {
        return Err(HrtrError::Tiling(format!(
            "coverage gap: windows end at {next}, T={num_frames}"
        )));
    }
    Ok(out)
}

/// Centered moving average over the time axis. At the boundaries the window
/// truncates to the frames that exist and divides by the actual count, so
/// normalized rows stay normalized.
pub fn smooth(probs: ArrayView2<f64>, spec: &SmoothSpec) -> Array2<f64> {
    let k = spec.kernel;
    let t = probs.nrows();
    if k <= 1 || t == 0 {
        return probs.to_owned();
    }
    let left = k / 2;
    let right = k - 1 - left;
    let mut out = Array2::zeros(probs.raw_dim());
    for i in 0..t {
        let lo = i.saturating_sub(left);
        let hi = (i + right).min(t - 1);
        let count = (hi - lo + 1) as f64;
        let mut acc = probs.row(lo).to_owned();
        for j in lo + 1..=hi {
            acc += &probs.row(j);
        }
        acc /= count;
        out.row_mut(i).assign(&acc);
    }
    out
}

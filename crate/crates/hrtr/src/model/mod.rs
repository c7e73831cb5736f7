//! The HRTR network: input projection, sinusoidal positional encoding, a
//! stack of transformer encoder layers and a per-frame classification head.
//!
//! Parameters live in plain `ndarray` arrays in f64; checkpoints serialize
//! them as little-endian f32 behind a JSON config header.

mod net;

pub use net::{
    backward, forward_eval, forward_eval_no_positional, forward_eval_with_cache, forward_train,
    Cache,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HrtrError, Result};

/// Architecture hyperparameters. Paper operating points keep the residual
/// stream at `embed_dim` = 1024 end to end; `ffn_hidden` is the encoder
/// feed-forward inner width (512 StrokeRehab, 256 50Salads).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HrtrError::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(HrtrError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(HrtrError::Config("embed_dim must be even for sinusoidal encoding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HrtrError::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.num_classes < 2 {
            return Err(HrtrError::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // symmetric uniform scaled by fan-in
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..bound)),
        }
    }

}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    fn zeros(dim: usize) -> Self {
        Self {
            scale: Array1::zeros(dim),
            shift: Array1::zeros(dim),
        }
    }

    fn init(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_attn: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNorm,
}

/// All learned tensors. Gradients reuse this type with matching shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub proj: Linear,
    pub input_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    pub out_linear: Linear,
    pub head: Linear,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.embed_dim;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                wq: Linear::zeros(e, e),
                wk: Linear::zeros(e, e),
                wv: Linear::zeros(e, e),
                wo: Linear::zeros(e, e),
                ln_attn: LayerNorm::zeros(e),
                ff1: Linear::zeros(e, config.ffn_hidden),
                ff2: Linear::zeros(config.ffn_hidden, e),
                ln_ff: LayerNorm::zeros(e),
            })
            .collect();
        Self {
            config: *config,
            proj: Linear::zeros(config.input_dim, e),
            input_ln: LayerNorm::zeros(e),
            layers,
            final_ln: LayerNorm::zeros(e),
            out_linear: Linear::zeros(e, e),
            head: Linear::zeros(e, config.num_classes),
        }
    }

    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = config.embed_dim;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                wq: Linear::init(e, e, rng),
                wk: Linear::init(e, e, rng),
                wv: Linear::init(e, e, rng),
                wo: Linear::init(e, e, rng),
                ln_attn: LayerNorm::init(e),
                ff1: Linear::init(e, config.ffn_hidden, rng),
                ff2: Linear::init(config.ffn_hidden, e, rng),
                ln_ff: LayerNorm::init(e),
            })
            .collect();
        Self {
            config: *config,
            proj: Linear::init(config.input_dim, e, rng),
            input_ln: LayerNorm::init(e),
            layers,
            final_ln: LayerNorm::init(e),
            out_linear: Linear::init(e, e, rng),
            head: Linear::init(e, config.num_classes, rng),
        }
    }

    /// Named flat views over every tensor, in a fixed canonical order shared
    /// by checkpoints, the optimizer and gradient checks.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn flat2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().unwrap()
        }
        fn flat1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().unwrap()
        }
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("proj.w".into(), flat2(&mut self.proj.w)));
        out.push(("proj.b".into(), flat1(&mut self.proj.b)));
        out.push(("input_ln.scale".into(), flat1(&mut self.input_ln.scale)));
        out.push(("input_ln.shift".into(), flat1(&mut self.input_ln.shift)));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (tag, lin) in [
                ("wq", &mut layer.wq),
                ("wk", &mut layer.wk),
                ("wv", &mut layer.wv),
                ("wo", &mut layer.wo),
            ] {
                out.push((format!("layer{i}.{tag}.w"), flat2(&mut lin.w)));
                out.push((format!("layer{i}.{tag}.b"), flat1(&mut lin.b)));
            }
            out.push((format!("layer{i}.ln_attn.scale"), flat1(&mut layer.ln_attn.scale)));
            out.push((format!("layer{i}.ln_attn.shift"), flat1(&mut layer.ln_attn.shift)));
            out.push((format!("layer{i}.ff1.w"), flat2(&mut layer.ff1.w)));
            out.push((format!("layer{i}.ff1.b"), flat1(&mut layer.ff1.b)));
            out.push((format!("layer{i}.ff2.w"), flat2(&mut layer.ff2.w)));
            out.push((format!("layer{i}.ff2.b"), flat1(&mut layer.ff2.b)));
            out.push((format!("layer{i}.ln_ff.scale"), flat1(&mut layer.ln_ff.scale)));
            out.push((format!("layer{i}.ln_ff.shift"), flat1(&mut layer.ln_ff.shift)));
        }
        out.push(("final_ln.scale".into(), flat1(&mut self.final_ln.scale)));
        out.push(("final_ln.shift".into(), flat1(&mut self.final_ln.shift)));
        out.push(("out.w".into(), flat2(&mut self.out_linear.w)));
        out.push(("out.b".into(), flat1(&mut self.out_linear.b)));
        out.push(("head.w".into(), flat2(&mut self.head.w)));
        out.push(("head.b".into(), flat1(&mut self.head.b)));
        out
    }

    /// Total number of scalars across all allocated tensors.
    pub fn allocated_count(&mut self) -> usize {
        self.tensors_mut().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "HRTR-CHECKPOINT 1")?;
        writeln!(file, "{}", serde_json::to_string(&self.config).map_err(|e| HrtrError::Config(e.to_string()))?)?;
        let mut buf = Vec::new();
        for (_, slice) in self.tensors_mut() {
            for &v in slice.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| HrtrError::Data(format!("{}: truncated checkpoint", path.display())))?;
            let line = String::from_utf8(rest[..end].to_vec())
                .map_err(|_| HrtrError::Data(format!("{}: non-utf8 header", path.display())))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != "HRTR-CHECKPOINT 1" {
            return Err(HrtrError::Data(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let config: ModelConfig = serde_json::from_str(&next_line()?)
            .map_err(|e| HrtrError::Data(format!("{}: bad config header: {e}", path.display())))?;
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        let expected = params.allocated_count() * 4;
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(HrtrError::Data(format!(
                "{}: expected {expected} payload bytes, found {}",
                path.display(),
                payload.len()
            )));
        }
        let mut offset = 0usize;
        for (_, slice) in params.tensors_mut() {
            for v in slice.iter_mut() {
                let chunk = &payload[offset..offset + 4];
                *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                offset += 4;
            }
        }
        Ok(params)
    }
}

/// Closed-form parameter count for a config.
pub fn param_count(config: &ModelConfig) -> usize {
    let (d, e, f, c) = (
        config.input_dim,
        config.embed_dim,
        config.ffn_hidden,
        config.num_classes,
    );
    let proj = d * e + e;
    let input_ln = 2 * e;
    let per_layer = 4 * (e * e + e) + (e * f + f) + (f * e + e) + 2 * (2 * e);
    let final_ln = 2 * e;
    let out = e * e + e;
    let head = e * c + c;
    proj + input_ln + config.num_layers * per_layer + final_ln + out + head
}

/// Window-local sinusoidal positional encoding:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Array2<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(HrtrError::Config(format!(
            "positional encoding dimension must be even and >= 2, got {dim}"
        )));
    }
    let mut pe = Array2::zeros((length, dim));
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

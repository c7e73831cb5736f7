//! Forward and backward passes, written directly against `ndarray`.
//!
//! Activations flow as (B*W, dim) matrices; attention reshapes to per-window
//! views. The backward pass mirrors the forward exactly and fills a gradient
//! `ModelParams` of matching shapes.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{positional_encoding, LayerNorm, Linear, ModelParams};
use crate::error::{HrtrError, Result};

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * pdf
}

fn linear_fwd(x: &Array2<f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.w) + &lin.b
}

fn linear_bwd(x: &Array2<f64>, dy: &Array2<f64>, lin: &Linear, grad: &mut Linear) -> Array2<f64> {
    grad.w += &x.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&lin.w.t())
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_fwd(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let dim = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / dim;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *inv);
    }
    let y = &xhat * &ln.scale + &ln.shift;
    (y, LnCache { xhat, inv_std })
}

fn ln_bwd(cache: &LnCache, dy: &Array2<f64>, ln: &LayerNorm, grad: &mut LayerNorm) -> Array2<f64> {
    grad.scale += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.shift += &dy.sum_axis(Axis(0));
    let dim = dy.ncols() as f64;
    let dxhat = dy * &ln.scale;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dxh.sum() / dim;
        let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / dim;
        let inv = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = inv * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Inverted dropout: scales kept activations by 1/(1-p) in place.
fn dropout_fwd(x: &mut Array2<f64>, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            1.0 / keep
        }
    });
    *x *= &mask;
    mask
}

struct LayerCache {
    input: Array2<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    attn: Array4<f64>,
    concat: Array2<f64>,
    attn_drop_mask: Option<Array2<f64>>,
    ln_attn: LnCache,
    ln_attn_out: Array2<f64>,
    z1: Array2<f64>,
    g1: Array2<f64>,
    ff_drop_mask: Option<Array2<f64>>,
    ln_ff: LnCache,
}

/// Everything the backward pass needs, captured during a forward pass.
pub struct Cache {
    batch: usize,
    window: usize,
    x2: Array2<f64>,
    proj_drop_mask: Option<Array2<f64>>,
    gelu_in: Array2<f64>,
    ln_in: LnCache,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_ln_out: Array2<f64>,
    out_out: Array2<f64>,
}

fn reshape3(x: Array2<f64>, b: usize, w: usize) -> Array3<f64> {
    let e = x.ncols();
    x.into_shape_with_order((b, w, e)).unwrap()
}

fn flatten2(x: Array3<f64>) -> Array2<f64> {
    let (b, w, e) = x.dim();
    x.into_shape_with_order((b * w, e)).unwrap()
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn run_forward(
    params: &ModelParams,
    features: &Array3<f64>,
    dropout_p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    apply_pe: bool,
) -> Result<(Array3<f64>, Cache)> {
    let config = &params.config;
    config.validate()?;
    let (b, w, d) = features.dim();
    if d != config.input_dim {
        return Err(HrtrError::Config(format!(
            "input feature dim {d} does not match model input_dim {}",
            config.input_dim
        )));
    }
    if b == 0 || w == 0 {
        return Err(HrtrError::Config("empty batch or window".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(HrtrError::Numeric("non-finite input features".into()));
    }
    let e = config.embed_dim;
    let heads = config.num_heads;
    let head_dim = e / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let x2 = features
        .clone()
        .into_shape_with_order((b * w, d))
        .unwrap();

    // input block: projection, dropout, GELU, layer norm, positional encoding
    let mut h = linear_fwd(&x2, &params.proj);
    let proj_drop_mask = match (dropout_p > 0.0).then_some(()).and(rng.as_deref_mut()) {
        Some(r) => Some(dropout_fwd(&mut h, dropout_p, r)),
        None => None,
    };
    let gelu_in = h.clone();
    h.mapv_inplace(gelu);
    let (mut h, ln_in) = ln_fwd(&h, &params.input_ln);
    if apply_pe {
        let pe = positional_encoding(w, e)?;
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &pe.row(i % w);
        }
    }

    let mut layer_caches = Vec::with_capacity(config.num_layers);
    for layer in &params.layers {
        let input = h;
        let q = reshape3(linear_fwd(&input, &layer.wq), b, w);
        let k = reshape3(linear_fwd(&input, &layer.wk), b, w);
        let v = reshape3(linear_fwd(&input, &layer.wv), b, w);

        let mut attn = Array4::zeros((b, heads, w, w));
        let mut concat3 = Array3::zeros((b, w, e));
        for bi in 0..b {
            for hi in 0..heads {
                let cols = hi * head_dim..(hi + 1) * head_dim;
                let qh = q.slice(s![bi, .., cols.clone()]);
                let kh = k.slice(s![bi, .., cols.clone()]);
                let vh = v.slice(s![bi, .., cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows_inplace(&mut scores);
                let oh = scores.dot(&vh);
                concat3.slice_mut(s![bi, .., cols]).assign(&oh);
                attn.slice_mut(s![bi, hi, .., ..]).assign(&scores);
            }
        }
        let concat = flatten2(concat3);
        let mut attn_out = linear_fwd(&concat, &layer.wo);
        let attn_drop_mask = match (dropout_p > 0.0).then_some(()).and(rng.as_deref_mut()) {
            Some(r) => Some(dropout_fwd(&mut attn_out, dropout_p, r)),
            None => None,
        };
        let r1 = &input + &attn_out;
        let (ln_attn_out, ln_attn) = ln_fwd(&r1, &layer.ln_attn);

        let z1 = linear_fwd(&ln_attn_out, &layer.ff1);
        let g1 = z1.mapv(gelu);
        let mut ff_out = linear_fwd(&g1, &layer.ff2);
        let ff_drop_mask = match (dropout_p > 0.0).then_some(()).and(rng.as_deref_mut()) {
            Some(r) => Some(dropout_fwd(&mut ff_out, dropout_p, r)),
            None => None,
        };
        let r2 = &ln_attn_out + &ff_out;
        let (out, ln_ff) = ln_fwd(&r2, &layer.ln_ff);
        h = out;

        layer_caches.push(LayerCache {
            input,
            q,
            k,
            v,
            attn,
            concat,
            attn_drop_mask,
            ln_attn,
            ln_attn_out,
            z1,
            g1,
            ff_drop_mask,
            ln_ff,
        });
    }

    let (final_ln_out, final_ln) = ln_fwd(&h, &params.final_ln);
    let out_out = linear_fwd(&final_ln_out, &params.out_linear);
    let logits2 = linear_fwd(&out_out, &params.head);
    if logits2.iter().any(|v| !v.is_finite()) {
        return Err(HrtrError::Numeric("non-finite logits in forward pass".into()));
    }
    let logits = logits2
        .into_shape_with_order((b, w, config.num_classes))
        .unwrap();
    let cache = Cache {
        batch: b,
        window: w,
        x2,
        proj_drop_mask,
        gelu_in,
        ln_in,
        layers: layer_caches,
        final_ln,
        final_ln_out,
        out_out,
    };
    Ok((logits, cache))
}

/// Training-mode forward with dropout; caches intermediates for `backward`.
pub fn forward_train(
    params: &ModelParams,
    features: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f64>, Cache)> {
    run_forward(params, features, params.config.dropout, Some(rng), true)
}

/// Deterministic eval-mode forward (dropout disabled).
pub fn forward_eval(params: &ModelParams, features: &Array3<f64>) -> Result<Array3<f64>> {
    run_forward(params, features, 0.0, None, true).map(|(logits, _)| logits)
}

/// Eval-mode forward that also returns the cache, for gradient checks.
pub fn forward_eval_with_cache(
    params: &ModelParams,
    features: &Array3<f64>,
) -> Result<(Array3<f64>, Cache)> {
    run_forward(params, features, 0.0, None, true)
}

/// Eval-mode forward with the positional encoding suppressed. Without it the
/// encoder is permutation-equivariant across frames, which the tests exploit
/// to verify the encoding is actually wired in.
pub fn forward_eval_no_positional(
    params: &ModelParams,
    features: &Array3<f64>,
) -> Result<Array3<f64>> {
    run_forward(params, features, 0.0, None, false).map(|(logits, _)| logits)
}

/// Gradient of a scalar loss w.r.t. every parameter, given dLoss/dlogits.
pub fn backward(params: &ModelParams, cache: &Cache, dlogits: &Array3<f64>) -> ModelParams {
    let config = &params.config;
    let (b, w) = (cache.batch, cache.window);
    let e = config.embed_dim;
    let heads = config.num_heads;
    let head_dim = e / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut grads = ModelParams::zeros(config);

    let dlogits2 = dlogits
        .clone()
        .into_shape_with_order((b * w, config.num_classes))
        .unwrap();
    let d_out_out = linear_bwd(&cache.out_out, &dlogits2, &params.head, &mut grads.head);
    let d_final_ln_out = linear_bwd(
        &cache.final_ln_out,
        &d_out_out,
        &params.out_linear,
        &mut grads.out_linear,
    );
    let mut dh = ln_bwd(&cache.final_ln, &d_final_ln_out, &params.final_ln, &mut grads.final_ln);

    for (layer, (lp, lg)) in cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
        .map(|(c, pg)| (c, pg))
    {
        // ln_ff over r2 = ln_attn_out + dropout(ff_out)
        let dr2 = ln_bwd(&layer.ln_ff, &dh, &lp.ln_ff, &mut lg.ln_ff);
        let mut dff_out = dr2.clone();
        if let Some(mask) = &layer.ff_drop_mask {
            dff_out *= mask;
        }
        let dg1 = linear_bwd(&layer.g1, &dff_out, &lp.ff2, &mut lg.ff2);
        let dz1 = &dg1 * &layer.z1.mapv(gelu_grad);
        let mut dln_attn_out = linear_bwd(&layer.ln_attn_out, &dz1, &lp.ff1, &mut lg.ff1);
        dln_attn_out += &dr2; // residual branch

        // ln_attn over r1 = input + dropout(attn_out)
        let dr1 = ln_bwd(&layer.ln_attn, &dln_attn_out, &lp.ln_attn, &mut lg.ln_attn);
        let mut dattn_out = dr1.clone();
        if let Some(mask) = &layer.attn_drop_mask {
            dattn_out *= mask;
        }
        let dconcat = linear_bwd(&layer.concat, &dattn_out, &lp.wo, &mut lg.wo);
        let dconcat3 = reshape3(dconcat, b, w);

        let mut dq = Array3::zeros((b, w, e));
        let mut dk = Array3::zeros((b, w, e));
        let mut dv = Array3::zeros((b, w, e));
        for bi in 0..b {
            for hi in 0..heads {
                let cols = hi * head_dim..(hi + 1) * head_dim;
                let a = layer.attn.slice(s![bi, hi, .., ..]);
                let doh = dconcat3.slice(s![bi, .., cols.clone()]);
                let qh = layer.q.slice(s![bi, .., cols.clone()]);
                let kh = layer.k.slice(s![bi, .., cols.clone()]);
                let vh = layer.v.slice(s![bi, .., cols.clone()]);

                let da = doh.dot(&vh.t());
                dv.slice_mut(s![bi, .., cols.clone()])
                    .assign(&a.t().dot(&doh));
                // softmax backward per row
                let mut ds = Array2::zeros((w, w));
                for r in 0..w {
                    let arow = a.row(r);
                    let darow = da.row(r);
                    let dot: f64 = arow.iter().zip(darow.iter()).map(|(x, y)| x * y).sum();
                    for cidx in 0..w {
                        ds[[r, cidx]] = arow[cidx] * (darow[cidx] - dot);
                    }
                }
                ds *= scale;
                dq.slice_mut(s![bi, .., cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![bi, .., cols]).assign(&ds.t().dot(&qh));
            }
        }
        let mut dinput = dr1; // residual branch through r1
        dinput += &linear_bwd(&layer.input, &flatten2(dq), &lp.wq, &mut lg.wq);
        dinput += &linear_bwd(&layer.input, &flatten2(dk), &lp.wk, &mut lg.wk);
        dinput += &linear_bwd(&layer.input, &flatten2(dv), &lp.wv, &mut lg.wv);
        dh = dinput;
    }

    // positional encoding is constant: gradient passes straight through
    let dg0 = ln_bwd(&cache.ln_in, &dh, &params.input_ln, &mut grads.input_ln);
    let mut dd0 = &dg0 * &cache.gelu_in.mapv(gelu_grad);
    if let Some(mask) = &cache.proj_drop_mask {
        dd0 *= mask;
    }
    linear_bwd(&cache.x2, &dd0, &params.proj, &mut grads.proj);
    grads
}

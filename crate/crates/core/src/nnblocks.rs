//! Layers and losses: gradient reversal, speaker-conditioned convolution,
//! positional encoding, windowed attention, angular-margin softmax, L1.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::{softmax_in_place, ConvMode, Tensor, Var};
use crate::error::{config, contract, Error, Result};

/// Score added outside the attention window before the softmax.
pub const MASK_SENTINEL: f64 = -1e30;
/// Attention weights below this are flushed to exactly zero.
pub const FLUSH_BELOW: f64 = 1e-300;
/// Row-norm guard used by the angular-margin loss.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlConfig {
    pub lambda: f64,
}

impl GrlConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(config(format!("GRL lambda must be >= 0, got {lambda}")));
        }
        Ok(GrlConfig { lambda })
    }
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig { lambda: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmSoftmaxConfig {
    pub scale: f64,
    pub margin: f64,
    pub num_classes: usize,
}

impl AmSoftmaxConfig {
    pub fn new(scale: f64, margin: f64, num_classes: usize) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(config(format!("AM-softmax scale must be > 0, got {scale}")));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(config(format!("AM-softmax margin must be in [0,1), got {margin}")));
        }
        if num_classes == 0 {
            return Err(config("AM-softmax needs at least one class"));
        }
        Ok(AmSoftmaxConfig {
            scale,
            margin,
            num_classes,
        })
    }

    /// s = 40, m = 0.6.
    pub fn reference(num_classes: usize) -> Self {
        AmSoftmaxConfig {
            scale: 40.0,
            margin: 0.6,
            num_classes,
        }
    }
}

/// Band of encoder positions a decoder step may attend to, relative to the
/// previously attended position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWindow {
    pub back: usize,
    pub forward: usize,
}

impl Default for AttentionWindow {
    fn default() -> Self {
        AttentionWindow { back: 1, forward: 3 }
    }
}

impl AttentionWindow {
    /// Inclusive `[lo, hi]` clipped to `[0, len-1]`.
    pub fn bounds(&self, prev_pos: usize, len: usize) -> Result<(usize, usize)> {
        if prev_pos >= len {
            return Err(contract(format!(
                "attention anchor {prev_pos} outside encoder length {len}"
            )));
        }
        let lo = prev_pos.saturating_sub(self.back);
        let hi = (prev_pos + self.forward).min(len - 1);
        Ok((lo, hi))
    }

    /// Additive score mask for one decoder step.
    pub fn mask_row(&self, prev_pos: usize, len: usize) -> Result<Vec<f64>> {
        let (lo, hi) = self.bounds(prev_pos, len)?;
        Ok((0..len)
            .map(|j| if (lo..=hi).contains(&j) { 0.0 } else { MASK_SENTINEL })
            .collect())
    }
}

/// Identity forward; the backward pass multiplies the upstream gradient by `-λ`.
pub fn gradient_reversal<'t>(x: Var<'t>, cfg: GrlConfig) -> Var<'t> {
    let neg = -cfg.lambda;
    let out = (*x.value()).clone();
    x.tape().custom(&[x], out, move |args| vec![args.grad.map(|g| neg * g)])
}

/// Gradient reversal whose reversed gradient is additionally clipped to
/// global L2 norm `max_norm`.
pub fn gradient_reversal_clipped<'t>(x: Var<'t>, cfg: GrlConfig, max_norm: f64) -> Var<'t> {
    let neg = -cfg.lambda;
    let out = (*x.value()).clone();
    x.tape().custom(&[x], out, move |args| {
        let g = args.grad.map(|g| neg * g);
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            vec![g.map(|v| v * k)]
        } else {
            vec![g]
        }
    })
}

/// Learnable arrays of one conditioned convolution block.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock<'t> {
    /// `W×C×C`
    pub kernel: Var<'t>,
    /// `S×C`
    pub speaker_proj: Var<'t>,
}

/// `y = (softsign(conv(x) + e_spk·P) + x) · √0.5`.
///
/// The speaker term is broadcast over every time step, so each block sees the
/// speaker embedding directly.
pub fn conditioned_conv_block<'t>(
    x: Var<'t>,
    speaker_emb: Var<'t>,
    block: ConvBlock<'t>,
    mode: ConvMode,
) -> Result<Var<'t>> {
    let channels = x.value().cols();
    let proj = block.speaker_proj.value();
    let spk = speaker_emb.value();
    if proj.shape() != [spk.cols(), channels] || spk.rows() != 1 {
        return Err(config(format!(
            "speaker projection {:?} does not map a {:?} embedding to {channels} channels",
            proj.shape(),
            spk.shape()
        )));
    }
    let conv = x.conv1d(block.kernel, mode)?;
    let cond = speaker_emb.matmul(block.speaker_proj)?;
    Ok(conv.add(cond)?.softsign().add(x)?.scale(FRAC_1_SQRT_2))
}

/// Sinusoidal encoding, `length×dim`: sin on even columns, cos on odd ones.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(config(format!("positional encoding needs an even dim, got {dim}")));
    }
    if length == 0 {
        return Err(config("positional encoding needs length >= 1"));
    }
    let mut data = Vec::with_capacity(length * dim);
    for t in 0..length {
        for col in 0..dim {
            let i = col / 2;
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(if col % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![length, dim], data)
}

/// Zeroes entries below [`FLUSH_BELOW`]; gradient passes only where kept.
fn flush_tiny(w: Var<'_>) -> Var<'_> {
    let out = w.value().map(|v| if v < FLUSH_BELOW { 0.0 } else { v });
    w.tape().custom(&[w], out, |args| {
        let g = args
            .grad
            .data()
            .iter()
            .zip(args.output.data())
            .map(|(&g, &y)| if y == 0.0 { 0.0 } else { g })
            .collect();
        vec![Tensor::new(args.grad.shape().to_vec(), g).expect("shape preserved")]
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Attention<'t> {
    /// `T×D`, one row per query.
    pub context: Var<'t>,
    /// `T×Te`, rows sum to one.
    pub weights: Var<'t>,
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attention query/keys",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "attention keys/values",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok(())
}

/// Scaled dot-product attention for every query row, with an optional
/// additive score mask (`T×Te`).
pub fn attention_rows<'t>(
    queries: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    mask: Option<Tensor>,
) -> Result<Attention<'t>> {
    let (q, k, v) = (queries.value(), keys.value(), values.value());
    check_attention_shapes(&q, &k, &v)?;
    let tape = queries.tape();
    let mut scores = queries.matmul(keys.transpose()?)?.scale(1.0 / (q.cols() as f64).sqrt());
    let masked = mask.is_some();
    if let Some(m) = mask {
        scores = scores.add(tape.constant(m))?;
    }
    let mut weights = scores.softmax_rows();
    if masked {
        weights = flush_tiny(weights);
    }
    Ok(Attention {
        context: weights.matmul(values)?,
        weights,
    })
}

/// Single-step attention, optionally restricted to the window around
/// `prev_pos`. Returns the attention and the attended (argmax) position.
pub fn windowed_attention<'t>(
    query: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    prev_pos: usize,
    window: AttentionWindow,
    enforce: bool,
) -> Result<(Attention<'t>, usize)> {
    let q = query.value();
    if q.rows() != 1 {
        return Err(contract(format!("query must be a single row, got {:?}", q.shape())));
    }
    let len = keys.value().rows();
    let mask = if enforce {
        Some(Tensor::row(window.mask_row(prev_pos, len)?))
    } else {
        None
    };
    let att = attention_rows(query, keys, values, mask)?;
    let pos = argmax(att.weights.value().data());
    Ok((att, pos))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds the teacher-forced window mask by replaying the monotonic anchor
/// rule over raw attention scores (`T×Te`). Row 0 anchors at position 0.
pub fn sequential_window_mask(scores: &Tensor, window: AttentionWindow) -> Result<Tensor> {
    let (rows, len) = (scores.rows(), scores.cols());
    let mut mask = Vec::with_capacity(rows * len);
    let mut prev = 0;
    for r in 0..rows {
        let m = window.mask_row(prev, len)?;
        let mut w: Vec<f64> = scores.row_slice(r).iter().zip(&m).map(|(s, m)| s + m).collect();
        softmax_in_place(&mut w);
        w.iter_mut().filter(|v| **v < FLUSH_BELOW).for_each(|v| *v = 0.0);
        prev = argmax(&w);
        mask.extend(m);
    }
    Tensor::new(vec![rows, len], mask)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(contract(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// `s · cos θ`, the unmargined logits of normalized features against
/// normalized class weights (`n×C`).
pub fn cosine_logits<'t>(features: Var<'t>, class_weights: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let f = features.l2_normalize_rows(NORM_EPS);
    let w = class_weights.l2_normalize_rows(NORM_EPS);
    Ok(f.matmul(w.transpose()?)?.scale(scale))
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn softmax_cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let l = logits.value();
    if labels.len() != l.rows() || labels.is_empty() {
        return Err(contract(format!("{} labels for {} logit rows", labels.len(), l.rows())));
    }
    let hot = logits.tape().constant(one_hot(labels, l.cols())?);
    let n = labels.len() as f64;
    Ok(logits.log_softmax_rows().mul(hot)?.sum().scale(-1.0 / n))
}

/// Additive-cosine-margin softmax loss.
///
/// Rows of `features` (`n×D`) and `class_weights` (`C×D`) are L2-normalized;
/// the target logit is `s·(cos θ_y − m)` and the others are `s·cos θ_j`.
pub fn am_softmax_loss<'t>(
    features: Var<'t>,
    class_weights: Var<'t>,
    labels: &[usize],
    cfg: &AmSoftmaxConfig,
) -> Result<Var<'t>> {
    let (f, w) = (features.value(), class_weights.value());
    if labels.is_empty() || labels.len() != f.rows() {
        return Err(contract(format!(
            "{} labels for {} feature rows",
            labels.len(),
            f.rows()
        )));
    }
    if w.rows() != cfg.num_classes || w.cols() != f.cols() {
        return Err(Error::Dimension {
            op: "am_softmax_loss",
            lhs: f.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let hot = one_hot(labels, cfg.num_classes)?;
    let margin = features.tape().constant(hot.map(|v| v * cfg.scale * cfg.margin));
    let logits = cosine_logits(features, class_weights, cfg.scale)?.sub(margin)?;
    softmax_cross_entropy(logits, labels)
}

/// Mean absolute error over all elements.
pub fn l1_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let (p, t) = (pred.value(), target.value());
    if p.shape() != t.shape() {
        return Err(contract(format!(
            "l1_loss shape mismatch: {:?} vs {:?}",
            p.shape(),
            t.shape()
        )));
    }
    Ok(pred.sub(target)?.mean_abs())
}

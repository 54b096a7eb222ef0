//! Diagnostics: a fresh probe classifier measuring how much speaker identity
//! is recoverable from frozen features, and alignment-path statistics.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{at, contract, Result};
use crate::model::{text_embedding, ModelParams};
use crate::nnblocks::{argmax, softmax_cross_entropy, AttentionWindow};
use crate::rng::Prng;
use crate::synthdata::Utterance;
use crate::trainopt::{adam_update, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// One feature row per utterance: the mean over timesteps.
    Mean,
    /// One feature row per timestep, each labelled with the utterance speaker.
    Timestep,
}

/// Feature rows with their speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn pool(matrix: &Tensor, speaker: usize, pooling: Pooling, out: &mut Features) {
    match pooling {
        Pooling::Mean => {
            out.rows.push(matrix.mean_rows());
            out.labels.push(speaker);
        }
        Pooling::Timestep => {
            for r in 0..matrix.rows() {
                out.rows.push(matrix.row_slice(r).to_vec());
                out.labels.push(speaker);
            }
        }
    }
}

/// Text embeddings `e_c`, computed without a gradient tape.
pub fn extract_embeddings(params: &ModelParams, utts: &[Utterance], pooling: Pooling) -> Result<Features> {
    let mut out = Features {
        rows: Vec::new(),
        labels: Vec::new(),
    };
    for u in utts {
        let e = text_embedding(params, &u.symbols, u.speaker)?;
        pool(&e, u.speaker, pooling, &mut out);
    }
    Ok(out)
}

/// Raw acoustic frames, for validating the probe itself.
pub fn frame_features(utts: &[Utterance], pooling: Pooling) -> Features {
    let mut out = Features {
        rows: Vec::new(),
        labels: Vec::new(),
    };
    for u in utts {
        pool(&u.frames, u.speaker, pooling, &mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once the training loss has not improved by `tolerance` for this
    /// many epochs.
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            lr: 0.01,
            max_epochs: 2000,
            patience: 50,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub num_eval: usize,
}

impl ProbeResult {
    pub const HEADER: &'static str = "accuracy,chance,num_eval";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{:?},{:?},{}\n",
            Self::HEADER,
            self.accuracy,
            self.chance,
            self.num_eval
        )
    }
}

/// Trains a one-hidden-layer softmax classifier on a seeded 80/20 split and
/// reports accuracy on the held-back 20%.
pub fn train_probe(features: &Features, num_classes: usize, seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.rows.len();
    if n != features.labels.len() || n == 0 {
        return Err(contract("probe needs equally many feature rows and labels"));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in &features.labels {
        if y >= num_classes {
            return Err(contract(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        return Err(contract(format!("class {k} has fewer than 2 examples")));
    }
    let dim = features.rows[0].len();
    if features.rows.iter().any(|r| r.len() != dim) || dim == 0 {
        return Err(contract("feature rows must share a positive width"));
    }

    let mut rng = Prng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = (n * 4 / 5).clamp(1, n - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);

    // Standardize with training statistics.
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in train_idx {
        mean.iter_mut().zip(&features.rows[i]).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train_idx {
        for ((s, x), m) in std.iter_mut().zip(&features.rows[i]).zip(&mean) {
            *s += (x - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n_train as f64).sqrt().max(1e-8));
    let matrix = |idx: &[usize]| {
        let data = idx
            .iter()
            .flat_map(|&i| {
                features.rows[i]
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((x, m), s)| (x - m) / s)
            })
            .collect();
        Tensor::new(vec![idx.len(), dim], data)
    };
    let x_train = matrix(train_idx)?;
    let x_eval = matrix(eval_idx)?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| features.labels[i]).collect();
    let y_eval: Vec<usize> = eval_idx.iter().map(|&i| features.labels[i]).collect();

    let h = cfg.hidden;
    let shapes = [vec![dim, h], vec![1, h], vec![h, num_classes], vec![1, num_classes]];
    let fan_in = [dim, 0, h, 0];
    let mut weights: Vec<f64> = Vec::new();
    for (shape, &f) in shapes.iter().zip(&fan_in) {
        let len: usize = shape.iter().product();
        if f == 0 {
            weights.extend(std::iter::repeat_n(0.0, len));
        } else {
            let b = (1.0 / f as f64).sqrt();
            weights.extend((0..len).map(|_| rng.uniform(-b, b)));
        }
    }
    fn logits<'t>(tape: &'t Tape, shapes: &[Vec<usize>], w: &[f64], x: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let mut off = 0;
        let p: Vec<Var<'t>> = shapes
            .iter()
            .map(|s| {
                let len: usize = s.iter().product();
                let t = Tensor::new(s.clone(), w[off..off + len].to_vec()).expect("probe shapes");
                off += len;
                tape.leaf(t)
            })
            .collect();
        let hidden = tape.constant(x.clone()).matmul(p[0])?.add(p[1])?.relu();
        Ok((hidden.matmul(p[2])?.add(p[3])?, p))
    }

    let adam = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        lr_peak: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(weights.len());
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.max_epochs {
        let tape = Tape::new();
        let (z, p) = logits(&tape, &shapes, &weights, &x_train)?;
        let loss = softmax_cross_entropy(z, &y_train)?;
        let value = loss.value().data()[0];
        let g = tape.backward(loss)?;
        let flat: Vec<f64> = p.iter().flat_map(|v| g.get_or_zeros(*v).into_data()).collect();
        adam_update(&mut weights, &flat, &mut state, &adam, cfg.lr)?;
        if value < best - cfg.tolerance {
            best = value;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let tape = Tape::no_grad();
    let (z, _) = logits(&tape, &shapes, &weights, &x_eval)?;
    let z = z.value();
    let correct = (0..z.rows()).filter(|&r| argmax(z.row_slice(r)) == y_eval[r]).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / y_eval.len() as f64,
        chance: 1.0 / num_classes as f64,
        num_eval: y_eval.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Fraction of consecutive path steps advancing by `0..=forward`.
    pub monotonicity: f64,
    /// Fraction of encoder positions visited by the path.
    pub coverage: f64,
    /// Argmax encoder position per decoder step.
    pub path: Vec<usize>,
}

pub fn alignment_report(alignment: &Tensor, window: AttentionWindow) -> AlignmentReport {
    let path: Vec<usize> = (0..alignment.rows()).map(|r| argmax(alignment.row_slice(r))).collect();
    let monotonicity = if path.len() < 2 {
        1.0
    } else {
        let ok = path
            .windows(2)
            .filter(|w| w[1] >= w[0] && w[1] - w[0] <= window.forward)
            .count();
        ok as f64 / (path.len() - 1) as f64
    };
    let mut seen = vec![false; alignment.cols()];
    path.iter().for_each(|&p| seen[p] = true);
    let coverage = seen.iter().filter(|&&s| s).count() as f64 / seen.len() as f64;
    AlignmentReport {
        monotonicity,
        coverage,
        path,
    }
}

/// `%g`-style rendering with six significant digits.
pub fn fmt_g6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

pub fn alignment_csv(alignment: &Tensor) -> String {
    (0..alignment.rows())
        .map(|r| {
            let row: Vec<String> = alignment.row_slice(r).iter().map(|&w| fmt_g6(w)).collect();
            row.join(",") + "\n"
        })
        .collect()
}

pub fn parse_alignment_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|_| crate::error::Error::Parse {
                        line: i + 1,
                        msg: format!("invalid weight `{v}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Binary greyscale image, one pixel per weight scaled by the matrix max.
pub fn alignment_pgm(alignment: &Tensor) -> Vec<u8> {
    let (h, w) = (alignment.rows(), alignment.cols());
    let max = alignment.data().iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(alignment.data().iter().map(|&x| {
        if max > 0.0 {
            (255.0 * x / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm`, returning both paths.
pub fn export_alignment(alignment: &Tensor, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    fs::write(&csv, alignment_csv(alignment)).map_err(at(&csv))?;
    fs::write(&pgm, alignment_pgm(alignment)).map_err(at(&pgm))?;
    Ok((csv, pgm))
}

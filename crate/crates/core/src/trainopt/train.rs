use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{adam_update, clip_gradients, global_norm, noam_lr, AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::error::{at, config, contract, Error, Result};
use crate::model::{forward_teacher_forced, joint_loss, ModelParams, Reversal};
use crate::nnblocks::GrlConfig;
use crate::rng::Prng;
use crate::synthdata::Utterance;

/// Which gradients the clip norm applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipScope {
    /// Every model gradient, by global L2 norm.
    Global,
    /// Only the reversed gradient entering the encoder from the classifier.
    Classifier,
}

impl std::str::FromStr for ClipScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ClipScope::Global),
            "classifier" => Ok(ClipScope::Classifier),
            _ => Err(config(format!("clip_scope must be global or classifier, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for ClipScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClipScope::Global => "global",
            ClipScope::Classifier => "classifier",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// When false the reversal layer runs with `λ = 0`.
    pub adversarial: bool,
    /// Seeds batch sampling.
    pub seed: u64,
    pub clip_scope: ClipScope,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 3000,
            batch_size: 16,
            adversarial: true,
            seed: 1,
            clip_scope: ClipScope::Global,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub ams: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,lr,l1,ams,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(s, "{},{:?},{:?},{:?},{:?}", r.step, r.lr, r.l1, r.ams, r.grad_norm).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{}`", Self::HEADER),
                })
            }
        }
        let records = lines
            .map(|(i, l)| {
                let bad = || Error::Parse {
                    line: i + 1,
                    msg: format!("malformed log row `{l}`"),
                };
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                Ok(TrainRecord {
                    step: f[0].parse().map_err(|_| bad())?,
                    lr: num(f[1])?,
                    l1: num(f[2])?,
                    ams: num(f[3])?,
                    grad_norm: num(f[4])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(at(path))?;
        Ok(())
    }

    /// Mean L1 over the first and last `n` records.
    pub fn l1_endpoints(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.records.len().max(1));
        let mean = |rs: &[TrainRecord]| rs.iter().map(|r| r.l1).sum::<f64>() / rs.len() as f64;
        let k = self.records.len();
        (mean(&self.records[..n]), mean(&self.records[k - n..]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: AdamState,
    pub log: TrainLog,
}

pub fn train(
    corpus: &[Utterance],
    params: ModelParams,
    adam: &AdamConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with(corpus, params, None, adam, opts, |_| {})
}

/// Training loop with an optional resumed optimizer state and a per-step
/// callback.
///
/// Each step samples `batch_size` utterances with replacement from
/// `Prng(opts.seed)`, averages their joint losses on one tape, clips, and
/// applies one scheduled Adam update.
pub fn train_with(
    corpus: &[Utterance],
    mut params: ModelParams,
    state: Option<AdamState>,
    adam: &AdamConfig,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    adam.validate()?;
    if corpus.is_empty() {
        return Err(contract("training corpus is empty"));
    }
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(config("steps and batch must be >= 1"));
    }
    let cfg = params.config().clone();
    if let Some(u) = corpus
        .iter()
        .find(|u| u.speaker >= cfg.num_speakers || u.frames.cols() != cfg.frame_dim)
    {
        return Err(contract(format!("utterance {} does not match the model shape", u.id)));
    }
    let grl = if opts.adversarial {
        cfg.grl
    } else {
        GrlConfig { lambda: 0.0 }
    };
    let reversal = match opts.clip_scope {
        ClipScope::Global => Reversal::Grl(grl),
        ClipScope::Classifier => Reversal::GrlClipped(grl, adam.clip_norm),
    };
    let mut state = state.unwrap_or_else(|| AdamState::new(params.len()));
    let mut rng = Prng::new(opts.seed);
    let mut log = TrainLog::default();
    let inv_batch = 1.0 / opts.batch_size as f64;

    for _ in 0..opts.steps {
        let step = state.step + 1;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        let (mut l1, mut ams) = (0.0, 0.0);
        for _ in 0..opts.batch_size {
            let u = &corpus[rng.below(corpus.len())];
            let out = forward_teacher_forced(&bound, &u.symbols, u.speaker, &u.frames, reversal)?;
            let losses = joint_loss(&bound, &out, &u.frames, u.speaker)?;
            l1 += losses.l1.value().data()[0];
            ams += losses.ams.value().data()[0];
            total = Some(match total {
                None => losses.total,
                Some(t) => t.add(losses.total)?,
            });
        }
        let (l1, ams) = (l1 * inv_batch, ams * inv_batch);
        if !(l1.is_finite() && ams.is_finite()) {
            return Err(Error::Numeric(format!(
                "loss diverged at step {step} (l1={l1}, ams={ams})"
            )));
        }
        let loss = total.expect("batch is non-empty").scale(inv_batch);
        let grads = tape.backward(loss)?;
        let mut flat: Vec<f64> = Vec::with_capacity(params.len());
        for v in &bound.vars {
            flat.extend_from_slice(grads.get_or_zeros(*v).data());
        }
        drop(bound);
        let grad_norm = match opts.clip_scope {
            ClipScope::Global => clip_gradients(&mut flat, adam.clip_norm),
            ClipScope::Classifier => Ok(global_norm(&flat)),
        }
        .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {step}: gradient norm is {grad_norm}")));
        }
        let lr = noam_lr(step, adam)?;
        adam_update(params.data_mut(), &flat, &mut state, adam, lr)?;
        let record = TrainRecord {
            step,
            lr,
            l1,
            ams,
            grad_norm,
        };
        on_step(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome { params, state, log })
}

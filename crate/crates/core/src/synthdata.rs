//! Deterministic synthetic multi-speaker corpus.
//!
//! Every speaker "pronounces" the same symbol templates through its own
//! affine style `A_k·T[v] + b_k`, so speaker identity and content are
//! entangled in every frame.
//!
//! # Streams
//!
//! * Templates: `Prng(seed)`, `V×D` Gaussians, row-major.
//! * Speaker `k`: `Prng(seed ^ (k+1)·0x9E37)`, first `A_k = I + σG` (row-major
//!   `D×D`), then `b_k = σ·g` (`D` values).
//! * Utterance `i`: `utt_seed = seed ^ (i+1)·0xC0FFEE` (wrapping). Its length
//!   and symbols come from `Prng(utt_seed ^ 0x5EED_5EED_5EED_5EED)`, its frame
//!   noise from `Prng(utt_seed)`, one Gaussian per frame element in order.
//! * Speaker of utterance `i` is `i mod K`.
//!
//! Only the spec is persisted; frames are regenerated on load.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{at, config, contract, Result};
use crate::kv::{fmt_float, render, KvMap};
use crate::rng::Prng;

const CONTENT_SALT: u64 = 0x5EED_5EED_5EED_5EED;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub frames_per_symbol: usize,
    pub num_speakers: usize,
    pub num_utterances: usize,
    /// Inclusive symbol-count range.
    pub len_min: usize,
    pub len_max: usize,
    pub style_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl CorpusSpec {
    /// The desk-scale reference corpus.
    pub fn reference() -> Self {
        CorpusSpec {
            vocab_size: 12,
            frame_dim: 16,
            frames_per_symbol: 4,
            num_speakers: 8,
            num_utterances: 2000,
            len_min: 3,
            len_max: 8,
            style_strength: 0.5,
            noise_std: 0.05,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab_size),
            ("frame_dim", self.frame_dim),
            ("frames_per_symbol", self.frames_per_symbol),
            ("speakers", self.num_speakers),
            ("utterances", self.num_utterances),
            ("len_min", self.len_min),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be >= 1")));
        }
        if self.len_min > self.len_max {
            return Err(config(format!(
                "len_min ({}) exceeds len_max ({})",
                self.len_min, self.len_max
            )));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            return Err(config("style must be a finite value >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config("noise must be a finite value >= 0"));
        }
        Ok(())
    }

    pub fn utt_seed(&self, index: usize) -> u64 {
        self.seed ^ (index as u64 + 1).wrapping_mul(0xC0FFEE)
    }

    pub const KEYS: [&'static str; 10] = [
        "vocab",
        "frame_dim",
        "frames_per_symbol",
        "speakers",
        "utterances",
        "len_min",
        "len_max",
        "style",
        "noise",
        "seed",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab", self.vocab_size.to_string()),
            ("frame_dim", self.frame_dim.to_string()),
            ("frames_per_symbol", self.frames_per_symbol.to_string()),
            ("speakers", self.num_speakers.to_string()),
            ("utterances", self.num_utterances.to_string()),
            ("len_min", self.len_min.to_string()),
            ("len_max", self.len_max.to_string()),
            ("style", fmt_float(self.style_strength)),
            ("noise", fmt_float(self.noise_std)),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Reads every corpus key from `map`; other keys are left to the caller.
    pub fn from_map(map: &KvMap) -> Result<Self> {
        let spec = CorpusSpec {
            vocab_size: map.require("vocab")?,
            frame_dim: map.require("frame_dim")?,
            frames_per_symbol: map.require("frames_per_symbol")?,
            num_speakers: map.require("speakers")?,
            num_utterances: map.require("utterances")?,
            len_min: map.require("len_min")?,
            len_max: map.require("len_max")?,
            style_strength: map.require("style")?,
            noise_std: map.require("noise")?,
            seed: map.require("seed")?,
        };
        Ok(spec)
    }
}

/// Per-speaker affine style.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    /// `D×D`.
    pub matrix: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    /// `V×D`.
    pub templates: Tensor,
    pub styles: Vec<Style>,
}

impl World {
    /// `A_k·T[v] + b_k`, the noise-free frame for one symbol.
    pub fn clean_frame(&self, symbol: usize, speaker: usize) -> Vec<f64> {
        let style = &self.styles[speaker];
        let t = self.templates.row_slice(symbol);
        (0..t.len())
            .map(|r| {
                let a = style.matrix.row_slice(r);
                a.iter().zip(t).map(|(x, y)| x * y).sum::<f64>() + style.bias[r]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker: usize,
    pub symbols: Vec<usize>,
    /// `(r·|symbols|)×D`.
    pub frames: Tensor,
}

pub fn build_world(spec: &CorpusSpec) -> Result<World> {
    spec.validate()?;
    let (v, d) = (spec.vocab_size, spec.frame_dim);
    let mut rng = Prng::new(spec.seed);
    let templates = Tensor::new(vec![v, d], (0..v * d).map(|_| rng.gaussian()).collect())?;
    let sigma = spec.style_strength;
    let styles = (0..spec.num_speakers)
        .map(|k| {
            let mut rng = Prng::new(spec.seed ^ (k as u64 + 1).wrapping_mul(0x9E37));
            let mut a = Vec::with_capacity(d * d);
            for r in 0..d {
                for c in 0..d {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    a.push(eye + sigma * rng.gaussian());
                }
            }
            let bias = (0..d).map(|_| sigma * rng.gaussian()).collect();
            Ok(Style {
                matrix: Tensor::new(vec![d, d], a)?,
                bias,
            })
        })
        .collect::<Result<_>>()?;
    Ok(World { templates, styles })
}

pub fn render_utterance(
    world: &World,
    symbols: &[usize],
    speaker: usize,
    spec: &CorpusSpec,
    utt_seed: u64,
) -> Result<Tensor> {
    if symbols.is_empty() {
        return Err(contract("utterance needs at least one symbol"));
    }
    if speaker >= world.styles.len() {
        return Err(contract(format!("speaker {speaker} out of range")));
    }
    if let Some(&s) = symbols.iter().find(|&&s| s >= world.templates.rows()) {
        return Err(contract(format!("symbol {s} out of range")));
    }
    let (r, d) = (spec.frames_per_symbol, spec.frame_dim);
    let mut rng = Prng::new(utt_seed);
    let mut data = Vec::with_capacity(symbols.len() * r * d);
    for &s in symbols {
        let clean = world.clean_frame(s, speaker);
        for _ in 0..r {
            data.extend(clean.iter().map(|x| x + spec.noise_std * rng.gaussian()));
        }
    }
    Tensor::new(vec![symbols.len() * r, d], data)
}

/// Utterances with the given indices. Indices past `num_utterances` follow
/// the same rules and serve as held-out data.
pub fn gen_utterances(spec: &CorpusSpec, indices: Range<usize>) -> Result<Vec<Utterance>> {
    let world = build_world(spec)?;
    indices.map(|i| utterance_in(&world, spec, i)).collect()
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    gen_utterances(spec, 0..spec.num_utterances)
}

fn utterance_in(world: &World, spec: &CorpusSpec, index: usize) -> Result<Utterance> {
    let utt_seed = spec.utt_seed(index);
    let mut content = Prng::new(utt_seed ^ CONTENT_SALT);
    let len = spec.len_min + content.below(spec.len_max - spec.len_min + 1);
    let symbols: Vec<usize> = (0..len).map(|_| content.below(spec.vocab_size)).collect();
    let speaker = index % spec.num_speakers;
    let frames = render_utterance(world, &symbols, speaker, spec, utt_seed)?;
    Ok(Utterance {
        id: index,
        speaker,
        symbols,
        frames,
    })
}

pub fn corpus_to_string(spec: &CorpusSpec) -> String {
    render(spec.to_pairs())
}

pub fn corpus_from_str(text: &str) -> Result<CorpusSpec> {
    let map = KvMap::parse(text)?;
    map.reject_unknown(&CorpusSpec::KEYS)?;
    let spec = CorpusSpec::from_map(&map)?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_corpus(spec: &CorpusSpec, path: &Path) -> Result<()> {
    fs::write(path, corpus_to_string(spec)).map_err(at(path))?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusSpec> {
    corpus_from_str(&fs::read_to_string(path).map_err(at(path))?)
}

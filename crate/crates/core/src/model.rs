//! Multi-speaker convolutional sequence-to-sequence synthesizer with an
//! adversarial speaker classifier on the text embedding.
//!
//! Data flow for one utterance:
//!
//! ```text
//! symbols ─ embed ─ [conditioned conv, same]×enc ─ e_c ─┬─ keys   = e_c·Wk
//!                                                       ├─ values = (e_c + PE)·Wv
//!                                                       └─ GRL ─ relu(·Wh + bh) ─ AM-softmax
//! frames(shifted) ─ prenet ─ [conditioned conv, causal]×dec ─ h ─ query = h·Wq
//! attend(query, keys, values) = ctx ;  frame = ((h + ctx)·√0.5)·Wo + bo
//! ```
//!
//! The speaker embedding row `e_spk` conditions every convolution block of
//! both stacks.
//!
//! # Parameter order
//!
//! Parameters are stored flat, in this order (`E` text dim, `S` speaker dim,
//! `D` frame dim, `H` classifier hidden, `W` conv width, `V` vocab, `C`
//! speakers):
//!
//! | name | shape |
//! |---|---|
//! | `text_embedding` | V×E |
//! | `speaker_embedding` | C×S |
//! | `enc.{l}.kernel`, `enc.{l}.speaker_proj` | W×E×E, S×E (per encoder layer) |
//! | `attn.key`, `attn.value`, `attn.query` | E×E each |
//! | `dec.prenet`, `dec.prenet_bias` | D×E, 1×E |
//! | `dec.{l}.kernel`, `dec.{l}.speaker_proj` | W×E×E, S×E (per decoder layer) |
//! | `out.weight`, `out.bias` | E×D, 1×D |
//! | `cls.hidden`, `cls.hidden_bias`, `cls.weight` | E×H, 1×H, C×H |
//!
//! giving `V·E + C·S + (L_enc + L_dec)(W·E² + S·E) + 3E² + D·E + E + E·D + D
//! + E·H + H + C·H` values in total.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::{ConvMode, Tape, Tensor, Var};
use crate::error::{config, contract, Error, Result};
use crate::kv::{fmt_bool, fmt_float, KvMap};
use crate::nnblocks::{
    am_softmax_loss, attention_rows, conditioned_conv_block, cosine_logits, gradient_reversal,
    gradient_reversal_clipped, l1_loss, positional_encoding, sequential_window_mask, windowed_attention,
    AmSoftmaxConfig, AttentionWindow, ConvBlock, GrlConfig,
};
use crate::rng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub text_emb_dim: usize,
    pub speaker_emb_dim: usize,
    pub frame_dim: usize,
    pub num_speakers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_width: usize,
    pub classifier_hidden: usize,
    pub window: AttentionWindow,
    pub grl: GrlConfig,
    pub ams: AmSoftmaxConfig,
    /// Apply the monotonic window during teacher-forced decoding too.
    pub train_window: bool,
}

impl ModelConfig {
    /// Default architecture for a corpus shape.
    pub fn new(vocab_size: usize, frame_dim: usize, num_speakers: usize) -> Self {
        ModelConfig {
            vocab_size,
            text_emb_dim: 32,
            speaker_emb_dim: 16,
            frame_dim,
            num_speakers,
            enc_layers: 2,
            dec_layers: 2,
            conv_width: 3,
            classifier_hidden: 32,
            window: AttentionWindow::default(),
            grl: GrlConfig::default(),
            ams: AmSoftmaxConfig::reference(num_speakers),
            train_window: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("text_emb_dim", self.text_emb_dim),
            ("speaker_emb_dim", self.speaker_emb_dim),
            ("frame_dim", self.frame_dim),
            ("num_speakers", self.num_speakers),
            ("conv_width", self.conv_width),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be positive")));
        }
        if !self.text_emb_dim.is_multiple_of(2) {
            return Err(config("text_emb_dim must be even (positional encoding)"));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(config("conv_width must be odd (same-padded encoder)"));
        }
        if self.ams.num_classes != self.num_speakers {
            return Err(config(format!(
                "classifier has {} classes but there are {} speakers",
                self.ams.num_classes, self.num_speakers
            )));
        }
        GrlConfig::new(self.grl.lambda)?;
        AmSoftmaxConfig::new(self.ams.scale, self.ams.margin, self.ams.num_classes)?;
        Ok(())
    }

    /// Keys fixed by the corpus shape.
    pub const SHAPE_KEYS: [&'static str; 3] = ["vocab_size", "frame_dim", "num_speakers"];

    /// Architecture and loss keys, in file order.
    pub const ARCH_KEYS: [&'static str; 12] = [
        "text_emb_dim",
        "speaker_emb_dim",
        "enc_layers",
        "dec_layers",
        "conv_width",
        "classifier_hidden",
        "window_back",
        "window_forward",
        "lambda",
        "ams_scale",
        "ams_margin",
        "train_window",
    ];

    pub fn shape_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("frame_dim", self.frame_dim.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
        ]
    }

    pub fn arch_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("text_emb_dim", self.text_emb_dim.to_string()),
            ("speaker_emb_dim", self.speaker_emb_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("window_back", self.window.back.to_string()),
            ("window_forward", self.window.forward.to_string()),
            ("lambda", fmt_float(self.grl.lambda)),
            ("ams_scale", fmt_float(self.ams.scale)),
            ("ams_margin", fmt_float(self.ams.margin)),
            ("train_window", fmt_bool(self.train_window)),
        ]
    }

    /// Overrides architecture fields present in `map`; with `required`, every
    /// architecture key must be present.
    pub fn apply_arch(&mut self, map: &KvMap, required: bool) -> Result<()> {
        fn pick<T: std::str::FromStr>(map: &KvMap, key: &str, required: bool, slot: &mut T) -> Result<()> {
            let v = if required {
                Some(map.require(key)?)
            } else {
                map.get(key)?
            };
            if let Some(v) = v {
                *slot = v;
            }
            Ok(())
        }
        pick(map, "text_emb_dim", required, &mut self.text_emb_dim)?;
        pick(map, "speaker_emb_dim", required, &mut self.speaker_emb_dim)?;
        pick(map, "enc_layers", required, &mut self.enc_layers)?;
        pick(map, "dec_layers", required, &mut self.dec_layers)?;
        pick(map, "conv_width", required, &mut self.conv_width)?;
        pick(map, "classifier_hidden", required, &mut self.classifier_hidden)?;
        pick(map, "window_back", required, &mut self.window.back)?;
        pick(map, "window_forward", required, &mut self.window.forward)?;
        pick(map, "lambda", required, &mut self.grl.lambda)?;
        pick(map, "ams_scale", required, &mut self.ams.scale)?;
        pick(map, "ams_margin", required, &mut self.ams.margin)?;
        match map.get_bool("train_window")? {
            Some(v) => self.train_window = v,
            None if required => return Err(Error::MissingKey("train_window".into())),
            None => {}
        }
        Ok(())
    }

    /// Reads a full config written as shape pairs followed by arch pairs.
    pub fn from_map(map: &KvMap) -> Result<Self> {
        let mut cfg = ModelConfig::new(
            map.require("vocab_size")?,
            map.require("frame_dim")?,
            map.require("num_speakers")?,
        );
        cfg.apply_arch(map, true)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let (e, s, d, h, w) = (
            self.text_emb_dim,
            self.speaker_emb_dim,
            self.frame_dim,
            self.classifier_hidden,
            self.conv_width,
        );
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
        };
        push("text_embedding".into(), vec![self.vocab_size, e], Init::Uniform(1));
        push("speaker_embedding".into(), vec![self.num_speakers, s], Init::Uniform(1));
        for l in 0..self.enc_layers {
            push(format!("enc.{l}.kernel"), vec![w, e, e], Init::Uniform(w * e));
            push(format!("enc.{l}.speaker_proj"), vec![s, e], Init::Uniform(s));
        }
        for name in ["attn.key", "attn.value", "attn.query"] {
            push(name.into(), vec![e, e], Init::Uniform(e));
        }
        push("dec.prenet".into(), vec![d, e], Init::Uniform(d));
        push("dec.prenet_bias".into(), vec![1, e], Init::Zero);
        for l in 0..self.dec_layers {
            push(format!("dec.{l}.kernel"), vec![w, e, e], Init::Uniform(w * e));
            push(format!("dec.{l}.speaker_proj"), vec![s, e], Init::Uniform(s));
        }
        push("out.weight".into(), vec![e, d], Init::Uniform(e));
        push("out.bias".into(), vec![1, d], Init::Zero);
        push("cls.hidden".into(), vec![e, h], Init::Uniform(e));
        push("cls.hidden_bias".into(), vec![1, h], Init::Zero);
        push("cls.weight".into(), vec![self.num_speakers, h], Init::Uniform(h));
        specs
    }

    /// Closed-form parameter count matching [`ModelConfig::layout`].
    pub fn param_count(&self) -> usize {
        let (v, e, s, d, h, w, c) = (
            self.vocab_size,
            self.text_emb_dim,
            self.speaker_emb_dim,
            self.frame_dim,
            self.classifier_hidden,
            self.conv_width,
            self.num_speakers,
        );
        v * e
            + c * s
            + (self.enc_layers + self.dec_layers) * (w * e * e + s * e)
            + 3 * e * e
            + d * e
            + e
            + e * d
            + d
            + e * h
            + h
            + c * h
    }
}

/// Initialization rule for one parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    Uniform(usize),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether the array sits upstream of the gradient reversal layer.
    pub fn is_encoder_side(&self) -> bool {
        self.name == "text_embedding" || self.name.starts_with("enc.")
    }

    pub fn is_classifier(&self) -> bool {
        self.name.starts_with("cls.")
    }
}

/// All learnable values, flattened in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn from_flat(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let expected: usize = layout.iter().map(ParamSpec::len).sum();
        if data.len() != expected {
            return Err(contract(format!(
                "expected {expected} parameter values, got {}",
                data.len()
            )));
        }
        Ok(ModelParams { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Offset of each array in the flat buffer.
    pub fn offsets(&self) -> Vec<usize> {
        self.layout
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.len();
                Some(o)
            })
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|p| p.name == name)
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let off = self.offsets()[index];
        let spec = &self.layout[index];
        Tensor::new(spec.shape.clone(), self.data[off..off + spec.len()].to_vec()).expect("layout shapes are positive")
    }

    /// Mutable view of one named array.
    pub fn array_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.index_of(name)?;
        let off = self.offsets()[i];
        let len = self.layout[i].len();
        Some(&mut self.data[off..off + len])
    }

    /// Registers every array on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars: Vec<Var<'t>> = (0..self.layout.len()).map(|i| tape.leaf(self.tensor(i))).collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("layout length");
        let text_embedding = next();
        let speaker_embedding = next();
        let enc = (0..self.config.enc_layers)
            .map(|_| ConvBlock {
                kernel: next(),
                speaker_proj: next(),
            })
            .collect();
        let (attn_key, attn_value, attn_query) = (next(), next(), next());
        let (prenet, prenet_bias) = (next(), next());
        let dec = (0..self.config.dec_layers)
            .map(|_| ConvBlock {
                kernel: next(),
                speaker_proj: next(),
            })
            .collect();
        let (out_weight, out_bias) = (next(), next());
        let (cls_hidden, cls_hidden_bias, cls_weight) = (next(), next(), next());
        Bound {
            config: self.config.clone(),
            vars,
            text_embedding,
            speaker_embedding,
            enc,
            attn_key,
            attn_value,
            attn_query,
            prenet,
            prenet_bias,
            dec,
            out_weight,
            out_bias,
            cls_hidden,
            cls_hidden_bias,
            cls_weight,
        }
    }
}

/// Draws every weight uniformly in `±sqrt(1/fan_in)` from `Prng(seed)`, in
/// canonical order; biases start at zero.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Prng::new(seed);
    let mut data = Vec::with_capacity(cfg.param_count());
    for spec in cfg.layout() {
        match spec.init {
            Init::Zero => data.extend(std::iter::repeat_n(0.0, spec.len())),
            Init::Uniform(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                data.extend((0..spec.len()).map(|_| rng.uniform(-bound, bound)));
            }
        }
    }
    ModelParams::from_flat(cfg.clone(), data)
}

/// Parameters registered on a tape.
pub struct Bound<'t> {
    config: ModelConfig,
    /// Canonical order, one per [`ParamSpec`].
    pub vars: Vec<Var<'t>>,
    pub text_embedding: Var<'t>,
    pub speaker_embedding: Var<'t>,
    pub enc: Vec<ConvBlock<'t>>,
    pub attn_key: Var<'t>,
    pub attn_value: Var<'t>,
    pub attn_query: Var<'t>,
    pub prenet: Var<'t>,
    pub prenet_bias: Var<'t>,
    pub dec: Vec<ConvBlock<'t>>,
    pub out_weight: Var<'t>,
    pub out_bias: Var<'t>,
    pub cls_hidden: Var<'t>,
    pub cls_hidden_bias: Var<'t>,
    pub cls_weight: Var<'t>,
}

impl<'t> Bound<'t> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn tape(&self) -> &'t Tape {
        self.text_embedding.tape()
    }

    fn speaker_row(&self, speaker: usize) -> Result<Var<'t>> {
        if speaker >= self.config.num_speakers {
            return Err(contract(format!(
                "speaker {speaker} out of range for {} speakers",
                self.config.num_speakers
            )));
        }
        self.speaker_embedding.gather_rows(&[speaker])
    }
}

/// Encoder outputs for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t> {
    /// Text embedding, `T_enc×E`.
    pub e_c: Var<'t>,
    pub keys: Var<'t>,
    pub values: Var<'t>,
    /// `1×S` row of the speaker table.
    pub speaker: Var<'t>,
}

pub fn encode_text<'t>(bound: &Bound<'t>, symbols: &[usize], speaker: usize) -> Result<Encoded<'t>> {
    let cfg = &bound.config;
    if symbols.is_empty() {
        return Err(contract("cannot encode an empty symbol sequence"));
    }
    if let Some(&bad) = symbols.iter().find(|&&s| s >= cfg.vocab_size) {
        return Err(contract(format!(
            "symbol {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let spk = bound.speaker_row(speaker)?;
    let mut x = bound.text_embedding.gather_rows(symbols)?;
    for block in &bound.enc {
        x = conditioned_conv_block(x, spk, *block, ConvMode::Same)?;
    }
    let e_c = x;
    let keys = e_c.matmul(bound.attn_key)?;
    let pe = bound
        .tape()
        .constant(positional_encoding(symbols.len(), cfg.text_emb_dim)?);
    let values = e_c.add(pe)?.matmul(bound.attn_value)?;
    Ok(Encoded {
        e_c,
        keys,
        values,
        speaker: spk,
    })
}

/// How the classifier path treats gradients flowing back into `e_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reversal {
    Grl(GrlConfig),
    /// Reversal followed by L2 clipping of the reversed gradient.
    GrlClipped(GrlConfig, f64),
    /// Plain pass-through; used for diagnostics only.
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct Classified<'t> {
    /// Hidden activations fed to the angular-margin loss, `T_enc×H`.
    pub features: Var<'t>,
    /// `s·cos θ_j`, `T_enc×C`.
    pub logits: Var<'t>,
}

/// Per-timestep speaker classifier on the text embedding.
pub fn classify_speaker<'t>(bound: &Bound<'t>, e_c: Var<'t>, reversal: Reversal) -> Result<Classified<'t>> {
    let x = match reversal {
        Reversal::Grl(cfg) => gradient_reversal(e_c, cfg),
        Reversal::GrlClipped(cfg, max_norm) => gradient_reversal_clipped(e_c, cfg, max_norm),
        Reversal::Identity => e_c,
    };
    let features = x.matmul(bound.cls_hidden)?.add(bound.cls_hidden_bias)?.relu();
    let logits = cosine_logits(features, bound.cls_weight, bound.config.ams.scale)?;
    Ok(Classified { features, logits })
}

fn decoder_hidden<'t>(bound: &Bound<'t>, inputs: Var<'t>, speaker: Var<'t>) -> Result<Var<'t>> {
    let mut h = inputs.matmul(bound.prenet)?.add(bound.prenet_bias)?;
    for block in &bound.dec {
        h = conditioned_conv_block(h, speaker, *block, ConvMode::Causal)?;
    }
    Ok(h)
}

fn frame_projection<'t>(bound: &Bound<'t>, h: Var<'t>, context: Var<'t>) -> Result<Var<'t>> {
    h.add(context)?
        .scale(FRAC_1_SQRT_2)
        .matmul(bound.out_weight)?
        .add(bound.out_bias)
}

/// Target frames shifted right by one step, with a zero first frame.
pub fn shift_right(frames: &Tensor) -> Tensor {
    let (t, d) = (frames.rows(), frames.cols());
    let mut data = vec![0.0; t * d];
    data[d..].copy_from_slice(&frames.data()[..(t - 1) * d]);
    Tensor::new(vec![t, d], data).expect("non-empty")
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded<'t> {
    pub predicted: Var<'t>,
    /// `T_dec×T_enc` attention weights.
    pub alignment: Var<'t>,
}

/// Parallel decoding with ground-truth previous frames as input.
pub fn decode_teacher_forced<'t>(bound: &Bound<'t>, target_frames: &Tensor, enc: &Encoded<'t>) -> Result<Decoded<'t>> {
    let cfg = &bound.config;
    if !target_frames.is_matrix() || target_frames.cols() != cfg.frame_dim {
        return Err(contract(format!(
            "target frames {:?} do not have frame_dim {}",
            target_frames.shape(),
            cfg.frame_dim
        )));
    }
    let inputs = bound.tape().constant(shift_right(target_frames));
    let h = decoder_hidden(bound, inputs, enc.speaker)?;
    let queries = h.matmul(bound.attn_query)?;
    let mask = if cfg.train_window {
        let raw = raw_scores(&queries.value(), &enc.keys.value())?;
        Some(sequential_window_mask(&raw, cfg.window)?)
    } else {
        None
    };
    let att = attention_rows(queries, enc.keys, enc.values, mask)?;
    let predicted = frame_projection(bound, h, att.context)?;
    Ok(Decoded {
        predicted,
        alignment: att.weights,
    })
}

/// `q·kᵀ/√D` outside the tape; mirrors the scores inside `attention_rows`.
fn raw_scores(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let q = tape.leaf(queries.clone());
    let k = tape.leaf(keys.clone());
    let s = q.matmul(k.transpose()?)?.scale(1.0 / (queries.cols() as f64).sqrt());
    let v = (*s.value()).clone();
    Ok(v)
}

/// Everything a teacher-forced pass produces, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars<'t> {
    pub predicted: Var<'t>,
    pub alignment: Var<'t>,
    pub e_c: Var<'t>,
    pub speaker_logits: Var<'t>,
    pub classifier_features: Var<'t>,
}

impl ForwardVars<'_> {
    pub fn to_output(&self) -> ForwardOutput {
        ForwardOutput {
            predicted_frames: (*self.predicted.value()).clone(),
            alignment: (*self.alignment.value()).clone(),
            text_embedding: (*self.e_c.value()).clone(),
            speaker_logits: (*self.speaker_logits.value()).clone(),
        }
    }
}

/// Detached forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub predicted_frames: Tensor,
    /// Decoder step × encoder step.
    pub alignment: Tensor,
    pub text_embedding: Tensor,
    pub speaker_logits: Tensor,
}

pub fn forward_teacher_forced<'t>(
    bound: &Bound<'t>,
    symbols: &[usize],
    speaker: usize,
    target_frames: &Tensor,
    reversal: Reversal,
) -> Result<ForwardVars<'t>> {
    let enc = encode_text(bound, symbols, speaker)?;
    let cls = classify_speaker(bound, enc.e_c, reversal)?;
    let dec = decode_teacher_forced(bound, target_frames, &enc)?;
    Ok(ForwardVars {
        predicted: dec.predicted,
        alignment: dec.alignment,
        e_c: enc.e_c,
        speaker_logits: cls.logits,
        classifier_features: cls.features,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Losses<'t> {
    pub total: Var<'t>,
    pub l1: Var<'t>,
    pub ams: Var<'t>,
}

/// L1 reconstruction plus the angular-margin speaker loss over every encoder
/// step. The adversarial sign lives in the reversal layer, not here.
pub fn joint_loss<'t>(
    bound: &Bound<'t>,
    out: &ForwardVars<'t>,
    target_frames: &Tensor,
    speaker: usize,
) -> Result<Losses<'t>> {
    let target = bound.tape().constant(target_frames.clone());
    let l1 = l1_loss(out.predicted, target)?;
    let steps = out.classifier_features.value().rows();
    let labels = vec![speaker; steps];
    let ams = am_softmax_loss(out.classifier_features, bound.cls_weight, &labels, &bound.config.ams)?;
    Ok(Losses {
        total: l1.add(ams)?,
        l1,
        ams,
    })
}

/// Autoregressive synthesis with the monotonic attention window.
///
/// Step 0 consumes a zero frame and anchors the window at encoder position 0;
/// every later step consumes the previous prediction and anchors at the
/// previous step's argmax.
pub fn infer_autoregressive(
    params: &ModelParams,
    symbols: &[usize],
    speaker: usize,
    num_frames: usize,
) -> Result<ForwardOutput> {
    if num_frames == 0 {
        return Err(contract("num_frames must be >= 1"));
    }
    let cfg = params.config();
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let enc = encode_text(&bound, symbols, speaker)?;
    let cls = classify_speaker(&bound, enc.e_c, Reversal::Identity)?;

    let d = cfg.frame_dim;
    let mut inputs = vec![0.0; d];
    let mut frames = Vec::with_capacity(num_frames * d);
    let mut alignment = Vec::with_capacity(num_frames * symbols.len());
    let mut prev_pos = 0;
    for t in 0..num_frames {
        let x = tape.constant(Tensor::new(vec![t + 1, d], inputs.clone())?);
        let h = decoder_hidden(&bound, x, enc.speaker)?.select_row(t)?;
        let q = h.matmul(bound.attn_query)?;
        let (att, pos) = windowed_attention(q, enc.keys, enc.values, prev_pos, cfg.window, true)?;
        let frame = frame_projection(&bound, h, att.context)?.value();
        if !frame.is_finite() {
            return Err(Error::Numeric(format!("non-finite frame at step {t}")));
        }
        frames.extend_from_slice(frame.data());
        inputs.extend_from_slice(frame.data());
        alignment.extend_from_slice(att.weights.value().data());
        prev_pos = pos;
    }
    Ok(ForwardOutput {
        predicted_frames: Tensor::new(vec![num_frames, d], frames)?,
        alignment: Tensor::new(vec![num_frames, symbols.len()], alignment)?,
        text_embedding: (*enc.e_c.value()).clone(),
        speaker_logits: (*cls.logits.value()).clone(),
    })
}

/// Text embedding `e_c` for one utterance, computed without gradients.
pub fn text_embedding(params: &ModelParams, symbols: &[usize], speaker: usize) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let enc = encode_text(&bound, symbols, speaker)?;
    let v = (*enc.e_c.value()).clone();
    Ok(v)
}

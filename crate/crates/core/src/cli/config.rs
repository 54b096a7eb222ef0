//! Flat run configuration: every recognised key, its default, and how a
//! config file and command-line flags merge into one resolved view.

use std::path::{Path, PathBuf};

use crate::error::{config, Result};
use crate::evalprobe::Pooling;
use crate::kv::{fmt_bool, render, KvMap};
use crate::model::ModelConfig;
use crate::synthdata::CorpusSpec;
use crate::trainopt::{AdamConfig, ClipScope, TrainOptions};

/// What the probe command classifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeInput {
    /// Text embeddings from the checkpoint's encoder.
    Embeddings,
    /// Raw frames, ignoring the checkpoint.
    Frames,
}

/// Non-model settings of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub steps: usize,
    pub batch: usize,
    pub adversarial: bool,
    pub clip_scope: ClipScope,
    pub init_seed: u64,
    pub train_seed: u64,
    pub probe_seed: u64,
    pub probe_utterances: usize,
    pub probe_input: ProbeInput,
    pub pooling: Pooling,
    pub outdir: PathBuf,
    /// Corpus spec file; empty means `<outdir>/corpus.spec`.
    pub corpus: String,
    /// Checkpoint path; empty means `<outdir>/model.ckpt`.
    pub checkpoint: String,
    /// Second checkpoint for `align-compare`.
    pub checkpoint_b: String,
    /// Comma-separated symbol ids for synthesis.
    pub symbols: String,
    pub speaker: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            steps: 3000,
            batch: 256,
            adversarial: true,
            clip_scope: ClipScope::Global,
            init_seed: 1,
            train_seed: 5,
            probe_seed: 7,
            probe_utterances: 1000,
            probe_input: ProbeInput::Embeddings,
            pooling: Pooling::Mean,
            outdir: PathBuf::from("out"),
            corpus: String::new(),
            checkpoint: String::new(),
            checkpoint_b: String::new(),
            symbols: "0,1,2,3".into(),
            speaker: 0,
        }
    }
}

impl RunParams {
    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("adversarial", fmt_bool(self.adversarial)),
            ("clip_scope", self.clip_scope.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("probe_seed", self.probe_seed.to_string()),
            ("probe_utterances", self.probe_utterances.to_string()),
            (
                "probe_input",
                match self.probe_input {
                    ProbeInput::Embeddings => "embeddings",
                    ProbeInput::Frames => "frames",
                }
                .into(),
            ),
            (
                "pooling",
                match self.pooling {
                    Pooling::Mean => "mean",
                    Pooling::Timestep => "timestep",
                }
                .into(),
            ),
            ("outdir", self.outdir.display().to_string()),
            ("corpus", self.corpus.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("checkpoint_b", self.checkpoint_b.clone()),
            ("symbols", self.symbols.clone()),
            ("speaker", self.speaker.to_string()),
        ]
    }

    fn from_map(map: &KvMap) -> Result<Self> {
        let adversarial = map
            .get_bool("adversarial")?
            .ok_or_else(|| crate::error::Error::MissingKey("adversarial".into()))?;
        let probe_input = match map.require::<String>("probe_input")?.as_str() {
            "embeddings" => ProbeInput::Embeddings,
            "frames" => ProbeInput::Frames,
            other => {
                return Err(config(format!(
                    "probe_input must be embeddings or frames, got `{other}`"
                )))
            }
        };
        let pooling = match map.require::<String>("pooling")?.as_str() {
            "mean" => Pooling::Mean,
            "timestep" => Pooling::Timestep,
            other => return Err(config(format!("pooling must be mean or timestep, got `{other}`"))),
        };
        Ok(RunParams {
            steps: map.require("steps")?,
            batch: map.require("batch")?,
            adversarial,
            clip_scope: map.require::<String>("clip_scope")?.parse()?,
            init_seed: map.require("init_seed")?,
            train_seed: map.require("train_seed")?,
            probe_seed: map.require("probe_seed")?,
            probe_utterances: map.require("probe_utterances")?,
            probe_input,
            pooling,
            outdir: PathBuf::from(map.require::<String>("outdir")?),
            corpus: map.require("corpus")?,
            checkpoint: map.require("checkpoint")?,
            checkpoint_b: map.require("checkpoint_b")?,
            symbols: map.require("symbols")?,
            speaker: map.require("speaker")?,
        })
    }
}

/// One recognised key.
#[derive(Clone, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: String,
    pub help: &'static str,
}

fn help_for(name: &str) -> &'static str {
    match name {
        "vocab" => "symbol vocabulary size",
        "frame_dim" => "values per acoustic frame",
        "frames_per_symbol" => "frames rendered per symbol",
        "speakers" => "number of speakers",
        "utterances" => "training utterances",
        "len_min" => "minimum symbols per utterance",
        "len_max" => "maximum symbols per utterance",
        "style" => "speaker style strength",
        "noise" => "frame noise standard deviation",
        "seed" => "corpus seed",
        "text_emb_dim" => "text embedding width (even)",
        "speaker_emb_dim" => "speaker embedding width",
        "enc_layers" => "encoder convolution blocks",
        "dec_layers" => "decoder convolution blocks",
        "conv_width" => "convolution width (odd)",
        "classifier_hidden" => "speaker classifier hidden units",
        "window_back" => "attention window, steps back",
        "window_forward" => "attention window, steps forward",
        "lambda" => "gradient reversal scale",
        "ams_scale" => "angular-margin softmax scale s",
        "ams_margin" => "angular-margin softmax margin m",
        "train_window" => "apply the attention window during training (on/off)",
        "beta1" => "Adam beta1",
        "beta2" => "Adam beta2",
        "epsilon" => "Adam epsilon",
        "lr" => "peak learning rate",
        "warmup" => "warmup steps of the Noam schedule",
        "clip_norm" => "gradient clip norm",
        "steps" => "training steps",
        "batch" => "utterances per step",
        "adversarial" => "train with gradient reversal (on/off)",
        "clip_scope" => "global or classifier",
        "init_seed" => "parameter initialization seed",
        "train_seed" => "batch sampling seed",
        "probe_seed" => "probe split and init seed",
        "probe_utterances" => "held-out utterances for probing",
        "probe_input" => "embeddings or frames",
        "pooling" => "mean or timestep",
        "outdir" => "output directory",
        "corpus" => "corpus spec file (default <outdir>/corpus.spec)",
        "checkpoint" => "checkpoint file (default <outdir>/model.ckpt)",
        "checkpoint_b" => "second checkpoint for align-compare",
        "symbols" => "comma-separated symbol ids",
        "speaker" => "speaker id",
        _ => "",
    }
}

/// Every key in `config.resolved` order, with defaults.
pub fn registry() -> Vec<KeySpec> {
    let arch = ModelConfig::new(1, 1, 1).arch_pairs();
    CorpusSpec::reference()
        .to_pairs()
        .into_iter()
        .chain(arch)
        .chain(AdamConfig::default().to_pairs())
        .chain(RunParams::default().to_pairs())
        .map(|(name, default)| KeySpec {
            name,
            default,
            help: help_for(name),
        })
        .collect()
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub corpus: CorpusSpec,
    /// Architecture overrides; corpus-dependent sizes are filled in later.
    arch: KvMap,
    pub adam: AdamConfig,
    pub run: RunParams,
    resolved: Vec<(&'static str, String)>,
}

impl CliConfig {
    /// Defaults, then `file` (if any), then `flags`.
    pub fn resolve(file: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let reg = registry();
        let names: Vec<&str> = reg.iter().map(|k| k.name).collect();
        let file_map = match file {
            Some(text) => {
                let m = KvMap::parse(text)?;
                m.reject_unknown(&names)?;
                m
            }
            None => KvMap::default(),
        };
        let mut merged = KvMap::default();
        for k in &reg {
            let v = flags
                .iter()
                .rev()
                .find(|(n, _)| n == k.name)
                .map(|(_, v)| v.clone())
                .or_else(|| file_map.get_str(k.name).map(str::to_string))
                .unwrap_or_else(|| k.default.clone());
            merged.insert(k.name, v);
        }
        if let Some((n, _)) = flags.iter().find(|(n, _)| !names.contains(&n.as_str())) {
            return Err(config(format!("unknown key `{n}`")));
        }

        let corpus = CorpusSpec::from_map(&merged)?;
        corpus.validate()?;
        let adam = {
            let mut a = AdamConfig::default();
            a.apply(&merged)?;
            a.validate()?;
            a
        };
        let run = RunParams::from_map(&merged)?;
        let mut arch = KvMap::default();
        for k in ModelConfig::ARCH_KEYS {
            arch.insert(k, merged.get_str(k).unwrap_or_default().to_string());
        }
        let resolved = reg
            .iter()
            .map(|k| (k.name, merged.get_str(k.name).unwrap_or_default().to_string()))
            .collect();
        let cfg = CliConfig {
            corpus,
            arch,
            adam,
            run,
            resolved,
        };
        // Validate architecture keys against the configured corpus shape.
        cfg.model_config(&cfg.corpus)?;
        Ok(cfg)
    }

    /// Model configuration for a corpus shape.
    pub fn model_config(&self, corpus: &CorpusSpec) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(corpus.vocab_size, corpus.frame_dim, corpus.num_speakers);
        m.apply_arch(&self.arch, true)?;
        m.validate()?;
        Ok(m)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.run.steps,
            batch_size: self.run.batch,
            adversarial: self.run.adversarial,
            seed: self.run.train_seed,
            clip_scope: self.run.clip_scope,
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.path_or(&self.run.corpus, "corpus.spec")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path_or(&self.run.checkpoint, "model.ckpt")
    }

    pub fn outdir(&self) -> &Path {
        &self.run.outdir
    }

    fn path_or(&self, value: &str, default: &str) -> PathBuf {
        if value.is_empty() {
            self.run.outdir.join(default)
        } else {
            PathBuf::from(value)
        }
    }

    /// `key=value` text of every key; feeding it back reproduces this config.
    pub fn resolved_text(&self) -> String {
        render(self.resolved.iter().map(|(k, v)| (*k, v.clone())))
    }
}

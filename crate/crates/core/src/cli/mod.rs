//! The `advtts` command line.
//!
//! Every subcommand accepts `--config FILE` plus one flag per configuration
//! key (`--frame-dim 16`, `--adversarial off`). Flags override the file,
//! which overrides the defaults. The resolved configuration is written to
//! `<outdir>/config.resolved`.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 3 for
//! numeric failures.

mod config;

pub use config::{registry, CliConfig, KeySpec, ProbeInput, RunParams};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};

use crate::error::{at, config as config_err, Error, Result};
use crate::evalprobe::{
    alignment_report, export_alignment, extract_embeddings, fmt_g6, frame_features, train_probe, AlignmentReport,
    ProbeConfig,
};
use crate::model::{infer_autoregressive, init_model, ModelParams};
use crate::synthdata::{gen_corpus, gen_utterances, load_corpus, save_corpus, CorpusSpec};
use crate::trainopt::{load_checkpoint, save_checkpoint, train_with};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

fn command() -> Command {
    let keys: Vec<Arg> = registry()
        .into_iter()
        .map(|k| {
            Arg::new(k.name)
                .long(k.name.replace('_', "-"))
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default))
        })
        .collect();
    let config = Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key=value configuration file");
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).arg(config.clone()).args(keys.clone())
    };
    Command::new("advtts")
        .about("Domain-adversarial multi-speaker synthesizer on a synthetic corpus")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen-data", "Write a corpus spec and summarize the corpus"))
        .subcommand(sub("train", "Train a model and write checkpoint and log"))
        .subcommand(sub("probe", "Probe held-out text embeddings for speaker identity"))
        .subcommand(sub("synth", "Synthesize frames with the windowed attention"))
        .subcommand(sub("align-compare", "Compare alignments of two checkpoints"))
}

/// Runs the CLI, printing to stdout and stderr. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

/// As [`run`], writing to the given streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve(sub).and_then(|cfg| match name {
        "gen-data" => gen_data(&cfg, out),
        "train" => train(&cfg, out),
        "probe" => probe(&cfg, out),
        "synth" => synth(&cfg, out),
        "align-compare" => align_compare(&cfg, out),
        _ => unreachable!("unknown subcommand {name}"),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_INVALID,
            }
        }
    }
}

fn resolve(m: &ArgMatches) -> Result<CliConfig> {
    let file = match m.get_one::<String>("config") {
        Some(path) => Some(fs::read_to_string(path).map_err(at(Path::new(path)))?),
        None => None,
    };
    let flags: Vec<(String, String)> = registry()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    CliConfig::resolve(file.as_deref(), &flags)
}

fn prepare_outdir(cfg: &CliConfig) -> Result<()> {
    fs::create_dir_all(cfg.outdir()).map_err(at(cfg.outdir()))?;
    let path = cfg.outdir().join("config.resolved");
    fs::write(&path, cfg.resolved_text()).map_err(at(&path))?;
    Ok(())
}

fn io(r: std::io::Result<()>) -> Result<()> {
    r.map_err(Error::from)
}

fn gen_data(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    prepare_outdir(cfg)?;
    let spec = &cfg.corpus;
    let utts = gen_corpus(spec)?;
    let frames: usize = utts.iter().map(|u| u.frames.rows()).sum();
    let path = cfg.corpus_path();
    save_corpus(spec, &path)?;
    io(writeln!(out, "wrote {}", path.display()))?;
    io(writeln!(
        out,
        "utterances={} speakers={} vocab={} frame_dim={} total_frames={frames}",
        utts.len(),
        spec.num_speakers,
        spec.vocab_size,
        spec.frame_dim
    ))
}

fn train(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let spec = load_corpus(&cfg.corpus_path())?;
    let model_cfg = cfg.model_config(&spec)?;
    prepare_outdir(cfg)?;
    let corpus = gen_corpus(&spec)?;
    let params = init_model(&model_cfg, cfg.run.init_seed)?;
    let opts = cfg.train_options();
    let every = (opts.steps / 10).max(1);
    let mut sink = Ok(());
    let outcome = train_with(&corpus, params, None, &cfg.adam, &opts, |r| {
        if (r.step % every == 0 || r.step == 1) && sink.is_ok() {
            sink = writeln!(
                out,
                "step {:>6}  lr {:.3e}  l1 {:.5}  ams {:.4}  grad_norm {:.4}",
                r.step, r.lr, r.l1, r.ams, r.grad_norm
            );
        }
    })?;
    io(sink)?;
    let ckpt = cfg.checkpoint_path();
    save_checkpoint(&outcome.params, None, &ckpt)?;
    let log_path = cfg.outdir().join("train_log.csv");
    outcome.log.save(&log_path)?;
    let (first, last) = outcome.log.l1_endpoints(100.min(opts.steps));
    io(writeln!(out, "l1 mean over first/last steps: {first:.5} -> {last:.5}"))?;
    io(writeln!(out, "wrote {}", ckpt.display()))?;
    io(writeln!(out, "wrote {}", log_path.display()))
}

fn checkpoint_params(path: &Path, spec: Option<&CorpusSpec>) -> Result<ModelParams> {
    let params = load_checkpoint(path)?.params;
    if let Some(s) = spec {
        let m = params.config();
        if (m.vocab_size, m.frame_dim, m.num_speakers) != (s.vocab_size, s.frame_dim, s.num_speakers) {
            return Err(config_err(format!(
                "checkpoint {} expects vocab {}, frame_dim {}, speakers {}; corpus has {}, {}, {}",
                path.display(),
                m.vocab_size,
                m.frame_dim,
                m.num_speakers,
                s.vocab_size,
                s.frame_dim,
                s.num_speakers
            )));
        }
    }
    Ok(params)
}

fn probe(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let spec = load_corpus(&cfg.corpus_path())?;
    if cfg.run.probe_utterances == 0 {
        return Err(config_err("probe_utterances must be >= 1"));
    }
    let start = spec.num_utterances;
    let held = gen_utterances(&spec, start..start + cfg.run.probe_utterances)?;
    let features = match cfg.run.probe_input {
        ProbeInput::Frames => frame_features(&held, cfg.run.pooling),
        ProbeInput::Embeddings => {
            let params = checkpoint_params(&cfg.checkpoint_path(), Some(&spec))?;
            extract_embeddings(&params, &held, cfg.run.pooling)?
        }
    };
    prepare_outdir(cfg)?;
    let result = train_probe(
        &features,
        spec.num_speakers,
        cfg.run.probe_seed,
        &ProbeConfig::default(),
    )?;
    let path = cfg.outdir().join("probe.csv");
    fs::write(&path, result.to_csv()).map_err(at(&path))?;
    io(writeln!(
        out,
        "probe accuracy {:.4} (chance {:.4}, {} held-out rows)",
        result.accuracy, result.chance, result.num_eval
    ))?;
    io(writeln!(out, "wrote {}", path.display()))
}

fn parse_symbols(text: &str, vocab: usize) -> Result<Vec<usize>> {
    let symbols = text
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<usize>()
                .map_err(|_| config_err(format!("symbols: `{s}` is not a symbol id")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = symbols.iter().find(|&&s| s >= vocab) {
        return Err(config_err(format!(
            "symbols: {bad} is outside the vocabulary of {vocab}"
        )));
    }
    Ok(symbols)
}

/// Frames per symbol from the corpus file if present, else the configured value.
fn frames_per_symbol(cfg: &CliConfig) -> Result<usize> {
    let path = cfg.corpus_path();
    if path.exists() {
        Ok(load_corpus(&path)?.frames_per_symbol)
    } else {
        Ok(cfg.corpus.frames_per_symbol)
    }
}

struct Synthesis {
    frames: crate::autodiff::Tensor,
    report: AlignmentReport,
    csv: std::path::PathBuf,
    pgm: std::path::PathBuf,
}

fn synthesize(cfg: &CliConfig, params: &ModelParams, stem: &str) -> Result<Synthesis> {
    let m = params.config();
    let symbols = parse_symbols(&cfg.run.symbols, m.vocab_size)?;
    if cfg.run.speaker >= m.num_speakers {
        return Err(config_err(format!(
            "speaker {} is outside 0..{}",
            cfg.run.speaker, m.num_speakers
        )));
    }
    let frames = frames_per_symbol(cfg)? * symbols.len();
    let o = infer_autoregressive(params, &symbols, cfg.run.speaker, frames)?;
    let report = alignment_report(&o.alignment, m.window);
    let (csv, pgm) = export_alignment(&o.alignment, &cfg.outdir().join(stem))?;
    Ok(Synthesis {
        frames: o.predicted_frames,
        report,
        csv,
        pgm,
    })
}

fn print_report(out: &mut dyn Write, label: &str, r: &AlignmentReport) -> Result<()> {
    let path: Vec<String> = r.path.iter().map(usize::to_string).collect();
    io(writeln!(
        out,
        "{label}monotonicity {:.4}  coverage {:.4}  path {}",
        r.monotonicity,
        r.coverage,
        path.join(" ")
    ))
}

fn synth(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let params = checkpoint_params(&cfg.checkpoint_path(), None)?;
    prepare_outdir(cfg)?;
    let s = synthesize(cfg, &params, "synth_alignment")?;
    let mut text = String::new();
    for r in 0..s.frames.rows() {
        let row: Vec<String> = s.frames.row_slice(r).iter().map(|&v| fmt_g6(v)).collect();
        text += &row.join(",");
        text.push('\n');
    }
    let frames_path = cfg.outdir().join("synth_frames.csv");
    fs::write(&frames_path, text).map_err(at(&frames_path))?;
    print_report(out, "", &s.report)?;
    for p in [&frames_path, &s.csv, &s.pgm] {
        io(writeln!(out, "wrote {}", p.display()))?;
    }
    Ok(())
}

fn align_compare(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    if cfg.run.checkpoint_b.is_empty() {
        return Err(config_err("align-compare needs checkpoint_b"));
    }
    let a = checkpoint_params(&cfg.checkpoint_path(), None)?;
    let b = checkpoint_params(Path::new(&cfg.run.checkpoint_b), None)?;
    prepare_outdir(cfg)?;
    let sa = synthesize(cfg, &a, "align_a")?;
    let sb = synthesize(cfg, &b, "align_b")?;
    print_report(out, "a: ", &sa.report)?;
    print_report(out, "b: ", &sb.report)?;
    io(writeln!(
        out,
        "monotonicity difference (b - a): {:+.4}",
        sb.report.monotonicity - sa.report.monotonicity
    ))?;
    for p in [&sa.csv, &sa.pgm, &sb.csv, &sb.pgm] {
        io(writeln!(out, "wrote {}", p.display()))?;
    }
    Ok(())
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is printed on every run. The
//! disentanglement criterion trains two full models and dominates runtime.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use advtts::autodiff::{Tape, Tensor};
use advtts::cli::{run_with, CliConfig};
use advtts::evalprobe::{alignment_report, extract_embeddings, frame_features, train_probe, ProbeConfig};
use advtts::model::{
    forward_teacher_forced, infer_autoregressive, init_model, joint_loss, ModelConfig, ModelParams, Reversal,
};
use advtts::nnblocks::{
    am_softmax_loss, cosine_logits, gradient_reversal, softmax_cross_entropy, AmSoftmaxConfig, AttentionWindow,
    GrlConfig,
};
use advtts::rng::Prng;
use advtts::synthdata::{corpus_from_str, gen_corpus, gen_utterances, load_corpus, save_corpus, CorpusSpec, Utterance};
use advtts::trainopt::{
    adam_step, clip_gradients, decode_checkpoint, encode_checkpoint, global_norm, load_checkpoint, noam_lr,
    save_checkpoint, train, AdamConfig, AdamState, TrainOutcome,
};
use advtts::Error;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Check + 'a>);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

// Independent oracle values (closed-form evaluation in Python).
const LOG1P_EXP_M1: f64 = 0.31326168751822286;
const LOG1P_EXP_M16: f64 = 1.1253516838717682e-07;
const ADAM_FIRST_UPDATE: f64 = -0.0004999997500001249;

fn grl_contract() -> Check {
    let start = Instant::now();
    let mut rng = Prng::new(11);
    let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gaussian()).collect()).map_err(err)?;
    let upstream = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gaussian()).collect()).map_err(err)?;
    for lambda in [0.0, 0.5, 1.0] {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = gradient_reversal(v, GrlConfig::new(lambda).map_err(err)?);
        if y.value()
            .data()
            .iter()
            .zip(x.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("forward not bit-identical at lambda {lambda}"));
        }
        let loss = y.mul(tape.constant(upstream.clone())).map_err(err)?.sum();
        let g = tape.backward(loss).map_err(err)?.get_or_zeros(v);
        for (a, u) in g.data().iter().zip(upstream.data()) {
            if *a != -lambda * u {
                return Err(format!("lambda {lambda}: gradient {a} != {}", -lambda * u));
            }
        }
    }
    let dt = start.elapsed();
    ensure(
        dt < Duration::from_secs(1),
        format!("exact for lambda 0, 0.5, 1 in {dt:.2?}"),
    )
}

fn batch_loss(params: &ModelParams, batch: &[Utterance], reversal: Reversal) -> (f64, f64, Vec<f64>) {
    let tape = Tape::new();
    let b = params.bind(&tape);
    let mut total = None;
    let (mut l1, mut ams) = (0.0, 0.0);
    for u in batch {
        let out = forward_teacher_forced(&b, &u.symbols, u.speaker, &u.frames, reversal).unwrap();
        let l = joint_loss(&b, &out, &u.frames, u.speaker).unwrap();
        l1 += l.l1.value().data()[0];
        ams += l.ams.value().data()[0];
        total = Some(match total {
            None => l.total,
            Some(t) => l.total.add(t).unwrap(),
        });
    }
    let n = batch.len() as f64;
    let mean = total.unwrap().scale(1.0 / n);
    let grads = tape.backward(mean).unwrap();
    let flat = b.vars.iter().flat_map(|v| grads.get_or_zeros(*v).into_data()).collect();
    (l1 / n, ams / n, flat)
}

#[allow(clippy::needless_range_loop)]
fn gradient_correctness() -> Check {
    let start = Instant::now();
    let spec = CorpusSpec {
        vocab_size: 8,
        frame_dim: 6,
        frames_per_symbol: 2,
        num_speakers: 4,
        num_utterances: 2,
        ..CorpusSpec::reference()
    };
    let batch = gen_corpus(&spec).map_err(err)?;
    let mut cfg = ModelConfig::new(8, 6, 4);
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    let params = init_model(&cfg, 3).map_err(err)?;
    let lambda = cfg.grl.lambda;
    let (_, _, analytic) = batch_loss(&params, &batch, Reversal::Grl(cfg.grl));

    // Finite differences of the undivided losses; reversal flips the
    // classifier loss gradient upstream of the classifier head.
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let offs = params.offsets();
    for (i, spec) in params.layout().iter().enumerate() {
        let coef = if spec.is_classifier() { 1.0 } else { -lambda };
        for k in offs[i]..offs[i] + spec.len() {
            let mut plus = params.clone();
            plus.data_mut()[k] += h;
            let mut minus = params.clone();
            minus.data_mut()[k] -= h;
            let (l1p, ap, _) = batch_loss(&plus, &batch, Reversal::Identity);
            let (l1m, am, _) = batch_loss(&minus, &batch, Reversal::Identity);
            let fd = (l1p - l1m) / (2.0 * h) + coef * (ap - am) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / fd.abs().max(analytic[k].abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{}]", spec.name, k - offs[i]);
            }
        }
    }
    let dt = start.elapsed();
    ensure(
        worst <= 1e-4 && dt < Duration::from_secs(60),
        format!(
            "{} parameters, worst relative error {worst:.2e} at {worst_at}, {dt:.1?}",
            params.len()
        ),
    )
}

fn ams_value(features: &[&[f64]], weights: &[&[f64]], labels: &[usize], cfg: &AmSoftmaxConfig) -> Result<f64, String> {
    let tape = Tape::new();
    let f = tape.leaf(Tensor::from_rows(features).map_err(err)?);
    let w = tape.leaf(Tensor::from_rows(weights).map_err(err)?);
    Ok(am_softmax_loss(f, w, labels, cfg).map_err(err)?.value().data()[0])
}

fn am_softmax_reductions() -> Check {
    let e = [1.0, 0.0];
    let o = [0.0, 1.0];
    let worked = [
        (
            ams_value(&[&e], &[&e, &o], &[0], &AmSoftmaxConfig::new(1.0, 0.0, 2).map_err(err)?)?,
            LOG1P_EXP_M1,
        ),
        (
            ams_value(&[&e], &[&e, &o], &[0], &AmSoftmaxConfig::reference(2))?,
            LOG1P_EXP_M16,
        ),
        (
            ams_value(
                &[&[0.6, 0.8, 0.0]],
                &[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]],
                &[0],
                &AmSoftmaxConfig::reference(2),
            )?,
            std::f64::consts::LN_2,
        ),
    ];
    let worst_worked = worked.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = Prng::new(5);
    let mut worst_m0: f64 = 0.0;
    for _ in 0..200 {
        let (n, c, d) = (1 + rng.below(5), 2 + rng.below(5), 2 + rng.below(6));
        let f = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gaussian()).collect()).map_err(err)?;
        let w = Tensor::new(vec![c, d], (0..c * d).map(|_| rng.gaussian()).collect()).map_err(err)?;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let s = rng.uniform(1.0, 40.0);
        let tape = Tape::new();
        let (fv, wv) = (tape.leaf(f), tape.leaf(w));
        let ams = am_softmax_loss(fv, wv, &labels, &AmSoftmaxConfig::new(s, 0.0, c).map_err(err)?).map_err(err)?;
        let plain = softmax_cross_entropy(cosine_logits(fv, wv, s).map_err(err)?, &labels).map_err(err)?;
        worst_m0 = worst_m0.max((ams.value().data()[0] - plain.value().data()[0]).abs());
    }
    ensure(
        worst_worked <= 1e-6 && worst_m0 <= 1e-10,
        format!(
            "worked values {:.6} {:.4e} {:.6} (max deviation {worst_worked:.1e}), m=0 max deviation {worst_m0:.1e}",
            worked[0].0, worked[1].0, worked[2].0
        ),
    )
}

fn optimizer_conformance() -> Check {
    let cfg = AdamConfig::default();
    let peak = noam_lr(cfg.warmup_steps, &cfg).map_err(err)?;
    let mut rng = Prng::new(9);
    let mut worst_ratio: f64 = 0.0;
    for i in 0..1000 {
        let n = 1 + rng.below(200);
        let scale = 10f64.powf(rng.uniform(-4.0, 4.0));
        let mut g: Vec<f64> = (0..n).map(|_| scale * rng.gaussian()).collect();
        let before = g.clone();
        let pre = clip_gradients(&mut g, cfg.clip_norm).map_err(err)?;
        let post = global_norm(&g);
        if pre <= cfg.clip_norm && g != before {
            return Err(format!("vector {i} below the threshold was modified"));
        }
        worst_ratio = worst_ratio.max(post / cfg.clip_norm);
    }
    let mut p = [1.0];
    let mut state = AdamState::new(1);
    let hand = AdamConfig {
        lr_peak: 0.0005,
        warmup_steps: 1,
        ..cfg
    };
    adam_step(&mut p, &[2.0], &mut state, &hand).map_err(err)?;
    let update = p[0] - 1.0;
    ensure(
        peak == 0.0005 && worst_ratio <= 1.0 + 1e-12 && (update - ADAM_FIRST_UPDATE).abs() <= 1e-9,
        format!(
            "noam_lr(warmup) = {peak}, max post-clip norm / 0.1 = {worst_ratio:.15}, first Adam update {update:.12e}"
        ),
    )
}

struct RunSummary {
    outcome: TrainOutcome,
    probe: f64,
    l1: (f64, f64),
}

fn disentanglement(trained: &mut Option<ModelParams>) -> Check {
    let start = Instant::now();
    let cli = CliConfig::resolve(None, &[]).map_err(err)?;
    let spec = cli.corpus.clone();
    let corpus = gen_corpus(&spec).map_err(err)?;
    let start_held = spec.num_utterances;
    let held = gen_utterances(&spec, start_held..start_held + cli.run.probe_utterances).map_err(err)?;
    let probe_cfg = ProbeConfig::default();
    let k = spec.num_speakers;

    let raw = train_probe(
        &frame_features(&held, cli.run.pooling),
        k,
        cli.run.probe_seed,
        &probe_cfg,
    )
    .map_err(err)?;
    let model_cfg = cli.model_config(&spec).map_err(err)?;
    let init = init_model(&model_cfg, cli.run.init_seed).map_err(err)?;

    let run = |adversarial: bool| -> Result<RunSummary, String> {
        let mut opts = cli.train_options();
        opts.adversarial = adversarial;
        let outcome = train(&corpus, init.clone(), &cli.adam, &opts).map_err(err)?;
        let features = extract_embeddings(&outcome.params, &held, cli.run.pooling).map_err(err)?;
        let probe = train_probe(&features, k, cli.run.probe_seed, &probe_cfg).map_err(err)?;
        let l1 = outcome.log.l1_endpoints(20);
        Ok(RunSummary {
            outcome,
            probe: probe.accuracy,
            l1,
        })
    };
    let (base, adv) = std::thread::scope(|s| {
        let b = s.spawn(|| run(false));
        let a = s.spawn(|| run(true));
        (b.join().expect("baseline run"), a.join().expect("adversarial run"))
    });
    let (base, adv) = (base?, adv?);
    *trained = Some(adv.outcome.params.clone());

    let chance = 1.0 / k as f64;
    let a_ok = raw.accuracy >= 0.9;
    let b_ok = adv.probe <= base.probe - 0.20 && adv.probe <= 3.0 * chance;
    let c_ok = base.l1.1 <= 0.5 * base.l1.0 && adv.l1.1 <= 0.5 * adv.l1.0;
    let last_ams = |r: &RunSummary| r.outcome.log.records.last().map_or(f64::NAN, |x| x.ams);
    let dt = start.elapsed();
    ensure(
        a_ok && b_ok && c_ok,
        format!(
            "(a) raw-frame probe {:.3} [{}]; (b) probe on e_c baseline {:.3} vs adversarial {:.3}, limit {:.3} [{}]; \
             (c) L1 baseline {:.3}->{:.3}, adversarial {:.3}->{:.3} [{}]; final classifier loss {:.3} / {:.3}; \
             {} steps x batch {}, {:.0?}",
            raw.accuracy,
            if a_ok { "ok" } else { "fail" },
            base.probe,
            adv.probe,
            (base.probe - 0.20).min(3.0 * chance),
            if b_ok { "ok" } else { "fail" },
            base.l1.0,
            base.l1.1,
            adv.l1.0,
            adv.l1.1,
            if c_ok { "ok" } else { "fail" },
            last_ams(&base),
            last_ams(&adv),
            cli.run.steps,
            cli.run.batch,
            dt
        ),
    )
}

fn monotonic_window(trained: Option<&ModelParams>) -> Check {
    let spec = CorpusSpec::reference();
    let params = match trained {
        Some(p) => p.clone(),
        None => init_model(&ModelConfig::new(spec.vocab_size, spec.frame_dim, spec.num_speakers), 1).map_err(err)?,
    };
    let window = params.config().window;
    let utts = gen_utterances(&spec, 5000..5050).map_err(err)?;
    let mut weights = 0usize;
    for u in &utts {
        let out = infer_autoregressive(&params, &u.symbols, u.speaker, spec.frames_per_symbol * u.symbols.len())
            .map_err(err)?;
        let a = &out.alignment;
        let mut prev = 0usize;
        for t in 0..a.rows() {
            let row = a.row_slice(t);
            let (lo, hi) = (prev.saturating_sub(window.back), prev + window.forward);
            for (j, &w) in row.iter().enumerate() {
                if (j < lo || j > hi) && w != 0.0 {
                    return Err(format!(
                        "utterance {}: step {t} weight {w:e} at {j}, anchor {prev}",
                        u.id
                    ));
                }
                weights += 1;
            }
            prev = advtts::nnblocks::argmax(row);
        }
    }

    let one_hot = |path: &[usize], len: usize| {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&p| (0..len).map(|j| if j == p { 1.0 } else { 0.0 }).collect())
            .collect();
        Tensor::from_rows(&rows).expect("rectangular")
    };
    let w = AttentionWindow::default();
    let diag: Vec<usize> = (0..10).collect();
    let reversed: Vec<usize> = (0..10).rev().collect();
    let jump = [0, 1, 2, 3, 4, 5, 2, 3, 4, 5];
    let m = [
        alignment_report(&one_hot(&diag, 10), w).monotonicity,
        alignment_report(&one_hot(&reversed, 10), w).monotonicity,
        alignment_report(&one_hot(&jump, 10), w).monotonicity,
    ];
    ensure(
        m == [1.0, 0.0, 8.0 / 9.0],
        format!(
            "{} utterances, {weights} weights checked, none outside the window; monotonicity examples {:?}",
            utts.len(),
            m
        ),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let (mut out, mut errs) = (Vec::new(), Vec::new());
    let argv = std::iter::once("advtts").chain(args.iter().copied());
    match run_with(argv, &mut out, &mut errs) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&errs))),
    }
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("run.conf");
    fs::write(&config, "steps=200\nbatch=32\nsymbols=3,1,4,1,5\nspeaker=2\n").map_err(|e| e.to_string())?;
    let config = config.to_str().expect("utf-8 path");
    let pipeline = |name: &str| -> Result<std::path::PathBuf, String> {
        let dir = root.path().join(name);
        let d = dir.to_str().expect("utf-8 path");
        for cmd in ["gen-data", "train", "probe", "synth"] {
            cli(&[cmd, "--config", config, "--outdir", d])?;
        }
        Ok(dir)
    };
    let (a, b) = (pipeline("a")?, pipeline("b")?);
    let files = [
        "corpus.spec",
        "model.ckpt",
        "train_log.csv",
        "probe.csv",
        "synth_frames.csv",
        "synth_alignment.csv",
        "synth_alignment.pgm",
    ];
    let mut bytes = 0;
    for f in files {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => bytes += x.len(),
            (Ok(_), Ok(_)) => return Err(format!("{f} differs between runs")),
            _ => return Err(format!("{f} missing")),
        }
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs ({bytes} bytes)",
        files.len()
    ))
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::new(12, 16, 8);
    cfg.grl.lambda = 0.25;
    let params = init_model(&cfg, 8).map_err(err)?;
    let mut rng = Prng::new(2);
    let state = AdamState {
        step: 42,
        first_moment: (0..params.len()).map(|_| rng.gaussian()).collect(),
        second_moment: (0..params.len()).map(|_| rng.next_f64()).collect(),
    };
    let path = dir.path().join("m.ckpt");
    for st in [None, Some(&state)] {
        save_checkpoint(&params, st, &path).map_err(err)?;
        let back = load_checkpoint(&path).map_err(err)?;
        let same = back
            .params
            .data()
            .iter()
            .zip(params.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || back.params.config() != params.config() || back.state.as_ref() != st {
            return Err("checkpoint round trip differs".into());
        }
    }

    let bytes = encode_checkpoint(&params, None);
    let truncated = &bytes[..bytes.len() - 11];
    let expected = 8 * params.len() as u64;
    match decode_checkpoint(truncated, Path::new("t.ckpt")) {
        Err(Error::Corrupt {
            expected: e, actual, ..
        }) if e == expected && actual == expected - 11 => {}
        other => return Err(format!("truncated checkpoint gave {other:?}")),
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    if !matches!(
        decode_checkpoint(&bad_magic, Path::new("m")),
        Err(Error::Parse { line: 1, .. })
    ) {
        return Err("bad magic not reported on line 1".into());
    }

    let spec = CorpusSpec {
        style_strength: 0.3,
        noise_std: 0.125,
        seed: 0xDEAD_BEEF,
        ..CorpusSpec::reference()
    };
    let cpath = dir.path().join("c.spec");
    save_corpus(&spec, &cpath).map_err(err)?;
    if load_corpus(&cpath).map_err(err)? != spec {
        return Err("corpus spec round trip differs".into());
    }
    let text = fs::read_to_string(&cpath).map_err(|e| e.to_string())?;
    let no_seed: String = text
        .lines()
        .filter(|l| !l.starts_with("seed="))
        .map(|l| format!("{l}\n"))
        .collect();
    let missing = corpus_from_str(&no_seed);
    if !matches!(&missing, Err(e @ Error::MissingKey(_)) if e.to_string().contains("seed")) {
        return Err(format!("missing seed gave {missing:?}"));
    }
    let garbled = text.replacen("noise=", "noise ", 1);
    let line = text.lines().position(|l| l.starts_with("noise=")).unwrap() + 1;
    match corpus_from_str(&garbled) {
        Err(Error::Parse { line: l, .. }) if l == line => {}
        other => return Err(format!("malformed line gave {other:?}")),
    }
    Ok(format!(
        "checkpoint (with and without optimizer state) and corpus spec bit-exact; truncation reports {expected} vs {} bytes; \
         bad magic, missing key and malformed line rejected",
        expected - 11
    ))
}

fn main() {
    let mut trained = None;
    let criteria: Vec<Criterion<'_>> = vec![
        ("1 gradient reversal contract", Box::new(grl_contract)),
        ("2 gradient correctness", Box::new(gradient_correctness)),
        ("3 AM-softmax reductions", Box::new(am_softmax_reductions)),
        ("4 optimizer conformance", Box::new(optimizer_conformance)),
        ("5 disentanglement proxy", Box::new(|| disentanglement(&mut trained))),
    ];
    let mut failed = 0;
    let mut report = |name: &str, result: std::thread::Result<Check>| {
        let (tag, detail) = match result {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(d)) => ("FAIL", d),
            Err(_) => ("FAIL", "panicked".to_string()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} [{name}] {detail}");
    };
    for (name, f) in criteria {
        report(name, catch_unwind(AssertUnwindSafe(f)));
    }
    report(
        "6 monotonic window",
        catch_unwind(AssertUnwindSafe(|| monotonic_window(trained.as_ref()))),
    );
    report("7 determinism", catch_unwind(AssertUnwindSafe(determinism)));
    report("8 persistence", catch_unwind(AssertUnwindSafe(persistence)));
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}

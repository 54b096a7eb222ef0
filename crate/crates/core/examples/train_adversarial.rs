//! Trains a baseline and an adversarial model on a reduced corpus and probes
//! their text embeddings for speaker identity.
//!
//! Usage: `cargo run --release --example train_adversarial -- [steps] [batch]`

use advtts::evalprobe::{extract_embeddings, train_probe, Pooling, ProbeConfig};
use advtts::model::{init_model, ModelConfig};
use advtts::synthdata::{gen_corpus, gen_utterances, CorpusSpec};
use advtts::trainopt::{train, AdamConfig, TrainOptions};

fn main() -> advtts::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let steps = args
        .next()
        .transpose()
        .map_err(|_| advtts::Error::Config("steps".into()))?
        .unwrap_or(300);
    let batch = args
        .next()
        .transpose()
        .map_err(|_| advtts::Error::Config("batch".into()))?
        .unwrap_or(16);

    let spec = CorpusSpec {
        num_utterances: 400,
        ..CorpusSpec::reference()
    };
    let corpus = gen_corpus(&spec)?;
    let held = gen_utterances(&spec, spec.num_utterances..spec.num_utterances + 400)?;
    let cfg = ModelConfig::new(spec.vocab_size, spec.frame_dim, spec.num_speakers);

    for adversarial in [false, true] {
        let opts = TrainOptions {
            steps,
            batch_size: batch,
            adversarial,
            seed: 5,
            ..TrainOptions::default()
        };
        let out = train(&corpus, init_model(&cfg, 1)?, &AdamConfig::default(), &opts)?;
        let (first, last) = out.log.l1_endpoints(20.min(steps));
        let features = extract_embeddings(&out.params, &held, Pooling::Mean)?;
        let probe = train_probe(&features, spec.num_speakers, 7, &ProbeConfig::default())?;
        println!(
            "adversarial {:<5}  l1 {first:.3} -> {last:.3}  speaker probe {:.3} (chance {:.3})",
            adversarial, probe.accuracy, probe.chance
        );
    }
    Ok(())
}

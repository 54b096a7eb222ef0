//! Generates the reference synthetic corpus, shows one utterance, and checks
//! that raw frames carry speaker identity.

use advtts::evalprobe::{frame_features, train_probe, Pooling, ProbeConfig};
use advtts::synthdata::{gen_corpus, gen_utterances, CorpusSpec};

fn main() -> advtts::Result<()> {
    let spec = CorpusSpec::reference();
    let corpus = gen_corpus(&spec)?;
    let frames: usize = corpus.iter().map(|u| u.frames.rows()).sum();
    println!(
        "{} utterances, {} speakers, {} frames of width {}",
        corpus.len(),
        spec.num_speakers,
        frames,
        spec.frame_dim
    );

    let u = &corpus[3];
    println!("utterance {} speaker {} symbols {:?}", u.id, u.speaker, u.symbols);
    let first: Vec<String> = u.frames.row_slice(0)[..6].iter().map(|v| format!("{v:+.3}")).collect();
    println!("first frame starts {}", first.join(" "));

    // Same index, same utterance.
    let again = gen_utterances(&spec, 3..4)?;
    assert_eq!(again[0], *u);

    let held = gen_utterances(&spec, spec.num_utterances..spec.num_utterances + 500)?;
    let probe = train_probe(
        &frame_features(&held, Pooling::Mean),
        spec.num_speakers,
        7,
        &ProbeConfig::default(),
    )?;
    println!(
        "probe on raw frames: {:.3} (chance {:.3})",
        probe.accuracy, probe.chance
    );
    Ok(())
}

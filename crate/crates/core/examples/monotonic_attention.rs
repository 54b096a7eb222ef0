//! Windowed attention during autoregressive decoding: the attended position
//! may stay, step back one, or jump ahead up to three.

use advtts::autodiff::{Tape, Tensor};
use advtts::evalprobe::alignment_report;
use advtts::nnblocks::{windowed_attention, AttentionWindow};
use advtts::rng::Prng;

fn main() -> advtts::Result<()> {
    let window = AttentionWindow::default();
    let (len, dim, steps) = (8, 4, 12);
    let mut rng = Prng::new(3);
    let mut random =
        |rows: usize| Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| 2.0 * rng.gaussian()).collect());
    let keys = random(len)?;
    let queries = random(steps)?;

    for enforce in [false, true] {
        let tape = Tape::no_grad();
        let (k, v) = (tape.leaf(keys.clone()), tape.leaf(keys.clone()));
        let mut prev = 0;
        let mut rows = Vec::new();
        for t in 0..steps {
            let q = tape.leaf(Tensor::row(queries.row_slice(t).to_vec()));
            let (att, pos) = windowed_attention(q, k, v, prev, window, enforce)?;
            rows.push(att.weights.value().data().to_vec());
            prev = pos;
        }
        let alignment = Tensor::from_rows(&rows)?;
        let r = alignment_report(&alignment, window);
        println!(
            "window {}: path {:?} monotonicity {:.3} coverage {:.3}",
            if enforce { "on " } else { "off" },
            r.path,
            r.monotonicity,
            r.coverage
        );
    }
    println!("mask row around position 2: {:?}", window.mask_row(2, len)?);
    Ok(())
}

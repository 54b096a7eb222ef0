//! Angular-margin softmax on hand-built features: the margin only ever
//! raises the loss, and with `m = 0` it is a scaled cosine softmax.

use advtts::autodiff::{Tape, Tensor};
use advtts::nnblocks::{am_softmax_loss, cosine_logits, softmax_cross_entropy, AmSoftmaxConfig};

fn main() -> advtts::Result<()> {
    let features = Tensor::from_rows(&[[1.0, 0.0], [0.6, 0.8], [-1.0, 0.2]])?;
    let classes = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]])?;
    let labels = [0, 1, 0];

    for margin in [0.0, 0.2, 0.6] {
        let tape = Tape::new();
        let (f, w) = (tape.leaf(features.clone()), tape.leaf(classes.clone()));
        let cfg = AmSoftmaxConfig::new(40.0, margin, 2)?;
        let loss = am_softmax_loss(f, w, &labels, &cfg)?;
        println!("s=40 m={margin:.1}: loss {:.6}", loss.value().data()[0]);
    }

    let tape = Tape::new();
    let (f, w) = (tape.leaf(features), tape.leaf(classes));
    let plain = softmax_cross_entropy(cosine_logits(f, w, 40.0)?, &labels)?;
    println!("cosine softmax, s=40:  loss {:.6}", plain.value().data()[0]);
    Ok(())
}

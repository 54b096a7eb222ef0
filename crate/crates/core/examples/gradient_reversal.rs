//! Gradient reversal: identity on the way forward, `-λ` on the way back.

use advtts::autodiff::{Tape, Tensor};
use advtts::nnblocks::{gradient_reversal, GrlConfig};

fn main() -> advtts::Result<()> {
    let x = Tensor::row(vec![0.5, -1.0, 2.0]);
    for lambda in [0.0, 0.5, 1.0] {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = gradient_reversal(v, GrlConfig::new(lambda)?);
        // d/dx sum(y^2) would be 2x without the layer.
        let loss = y.mul(y)?.sum();
        let grads = tape.backward(loss)?;
        println!(
            "lambda {lambda:.1}: forward {:?}  grad {:?}",
            y.value().data(),
            grads.get(v).expect("x is used").data()
        );
    }
    Ok(())
}

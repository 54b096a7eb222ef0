//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns a
//! [`GradStore`]. Layers that need a non-standard gradient register their own
//! rule through [`Tape::custom`].

mod ops;
mod tape;
mod tensor;

pub(crate) use ops::softmax_in_place;
pub use ops::{elementwise, reduce, ConvMode, Elementwise, Reduce};
pub use tape::{BackwardArgs, BackwardFn, GradStore, NodeId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central finite differences of a scalar function of several tensors.
    fn numeric_grads(f: &dyn Fn(&Tape, &[Var<'_>]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
        let eval = |xs: &[Tensor]| {
            let tape = Tape::no_grad();
            let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            f(&tape, &vars)
        };
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut g = Tensor::zeros(x.shape().to_vec());
                for j in 0..x.len() {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[j] += h;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[j] -= h;
                    g.data_mut()[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                }
                g
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    macro_rules! check {
        ($inputs:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor> = $inputs;
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let loss = {
                let $tape = &tape;
                let $v = &vars;
                let _ = $tape;
                $body
            };
            let store = tape.backward(loss).unwrap();
            let numeric = numeric_grads(
                &|$tape, $v| {
                    let _ = $tape;
                    let l = $body;
                    l.value().data()[0]
                },
                &inputs,
                1e-5,
            );
            let mut worst: f64 = 0.0;
            for (v, n) in vars.iter().zip(&numeric) {
                let a = store.get_or_zeros(*v);
                for (x, y) in a.data().iter().zip(n.data()) {
                    worst = worst.max(rel_err(*x, *y));
                }
            }
            worst
        }};
    }

    fn random(rng: &mut Prng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.uniform(-1.5, 1.5)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_backward_is_ones_times_b_transpose() {
        let a = t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let b = t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]);
        let tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let loss = va.matmul(vb).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        // ones(2x2) . b^T: each row equals the row sums of b
        let expected = [3.0, -0.5, 3.25, 3.0, -0.5, 3.25];
        for (x, y) in g.get(va).unwrap().data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
        let err = check!(vec![a, b], |tape, v| v[0].matmul(v[1]).unwrap().sum());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let ident = tape.leaf(t(&[3, 1, 1], &[0.0, 1.0, 0.0]));
        let ones = tape.leaf(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let same = |k| x.conv1d(k, ConvMode::Same).unwrap().value().data().to_vec();
        assert_eq!(same(ident), vec![1.0, 2.0, 3.0]);
        assert_eq!(same(ones), vec![3.0, 6.0, 5.0]);
        let causal = x.conv1d(ones, ConvMode::Causal).unwrap();
        assert_eq!(causal.value().data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn conv1d_even_width_same_is_config_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([4, 1]));
        let k = tape.leaf(Tensor::zeros([2, 1, 1]));
        assert!(matches!(x.conv1d(k, ConvMode::Same), Err(crate::Error::Config(_))));
        assert!(x.conv1d(k, ConvMode::Causal).is_ok());
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let sum = elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(sum.value().data(), &[4.0, 6.0]);

        let s = tape.leaf(t(&[2], &[0.0, 1.0])).softsign();
        assert_eq!(s.value().data(), &[0.0, 0.5]);

        let r = elementwise(Elementwise::Relu, tape.leaf(t(&[2], &[-1.0, 2.0])), None).unwrap();
        assert_eq!(r.value().data(), &[0.0, 2.0]);

        assert!(elementwise(Elementwise::Sub, a, None).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 0.0, 2.0]));
        assert!(matches!(x.log(), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn broadcast_limited_to_row_over_matrix() {
        let tape = Tape::new();
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.leaf(t(&[1, 2], &[10.0, 20.0]));
        assert_eq!(m.add(r).unwrap().value().data(), &[11.0, 22.0, 13.0, 24.0]);
        let col = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        assert!(matches!(m.add(col), Err(crate::Error::Dimension { .. })));
        assert!(r.add(m).is_err());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[1, 2], &[0.0, 0.0])).softmax_rows();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = tape.leaf(t(&[1, 2], &[2f64.ln(), 0.0])).softmax_rows();
        assert!((y.value().data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.value().data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let y = tape.leaf(t(&[1, 2], &[1000.0, 0.0])).softmax_rows();
        assert!(y.value().is_finite());
        assert!((y.value().data()[0] - 1.0).abs() < 1e-15);
        assert!(y.value().data()[1] < 1e-300);
    }

    #[test]
    fn l2_normalize_examples() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0])).l2_normalize_rows(1e-12);
        let d = y.value();
        assert!((d.data()[0] - 0.6).abs() < 1e-12 && (d.data()[1] - 0.8).abs() < 1e-12);
        assert_eq!(&d.data()[2..], &[0.0, 0.0]);
        let unit = [0.6, 0.0, -0.8];
        let y = tape.leaf(t(&[1, 3], &unit)).l2_normalize_rows(1e-12);
        for (a, b) in y.value().data().iter().zip(unit) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(reduce(Reduce::Mean, x).value().data(), &[2.0]);
        let y = tape.leaf(t(&[3], &[-1.0, 1.0, 2.0]));
        assert!((reduce(Reduce::MeanAbs, y).value().data()[0] - 4.0 / 3.0).abs() < 1e-15);
        let s = reduce(Reduce::Sum, x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_example() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
        let err = check!(vec![t(&[2], &[1.0, -2.0])], |tape, v| v[0].mul(v[0]).unwrap().sum());
        assert!(err < 1e-8);
    }

    #[test]
    fn backward_requires_scalar_and_skips_unused() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2], &[5.0, 5.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert!(Tape::no_grad()
            .backward(Tape::no_grad().leaf(Tensor::scalar(1.0)))
            .is_err());
    }

    #[test]
    fn custom_rule_is_honoured() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.custom(&[x], (*x.value()).clone(), |a| vec![a.grad.map(|g| 7.0 * g)]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn node_ids_are_topological() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = a.scale(2.0);
        let c = b.add(a).unwrap();
        assert!(a.id() < b.id() && b.id() < c.id());
    }

    #[test]
    fn gradients_match_finite_differences_on_random_inputs() {
        let mut rng = Prng::new(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            let row = random(&mut rng, &[1, 4]);
            let k = random(&mut rng, &[3, 4, 2]);
            let pos = random(&mut rng, &[3, 4]).map(|x| x.abs() + 0.5);
            let w = random(&mut rng, &[3, 2]);

            worst = worst.max(check!(vec![a.clone(), b.clone()], |tape, v| v[0]
                .matmul(v[1])
                .unwrap()
                .softsign()
                .sum()));
            worst = worst.max(check!(vec![a.clone(), row.clone()], |tape, v| v[0]
                .add(v[1])
                .unwrap()
                .mul(v[0])
                .unwrap()
                .sub(v[1])
                .unwrap()
                .exp()
                .mean()));
            worst = worst.max(check!(vec![pos.clone()], |tape, v| v[0]
                .log()
                .unwrap()
                .scale(-1.5)
                .sum()));
            worst = worst.max(check!(vec![a.clone(), w.clone()], |tape, v| v[0]
                .softmax_rows()
                .matmul(v[0].transpose().unwrap())
                .unwrap()
                .log_softmax_rows()
                .matmul(v[1])
                .unwrap()
                .sum()));
            worst = worst.max(check!(vec![a.clone(), w.clone()], |tape, v| v[0]
                .l2_normalize_rows(1e-12)
                .transpose()
                .unwrap()
                .matmul(v[1])
                .unwrap()
                .mean_abs()));
            worst = worst.max(check!(vec![a.clone(), k.clone(), w.clone()], |tape, v| v[0]
                .conv1d(v[1], ConvMode::Same)
                .unwrap()
                .mul(v[2])
                .unwrap()
                .sum()));
            worst = worst.max(check!(vec![a.clone(), k.clone(), w.clone()], |tape, v| v[0]
                .conv1d(v[1], ConvMode::Causal)
                .unwrap()
                .relu()
                .mul(v[2])
                .unwrap()
                .sum()));
            worst = worst.max(check!(vec![a.clone(), b.clone()], |tape, v| v[0]
                .gather_rows(&[2, 0, 2])
                .unwrap()
                .matmul(v[1])
                .unwrap()
                .select_row(1)
                .unwrap()
                .softsign()
                .sum()));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::row(row.clone()));
            let y = x.softmax_rows().value();
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            let shifted = tape.leaf(Tensor::row(row.iter().map(|v| v + shift).collect()));
            let ys = shifted.softmax_rows().value();
            prop_assert!(y.max_abs_diff(&ys) < 1e-12);
        }

        #[test]
        fn l2_normalized_rows_have_unit_norm(
            row in proptest::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm >= 1e-3);
            let tape = Tape::new();
            let y = tape.leaf(Tensor::row(row)).l2_normalize_rows(1e-12).value();
            let n = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((1.0 - 1e-6..=1.0).contains(&n));
        }

        #[test]
        fn causal_conv_ignores_future_inputs(
            data in proptest::collection::vec(-3.0f64..3.0, 12),
            kernel in proptest::collection::vec(-1.0f64..1.0, 6),
            t in 0usize..5,
            bump in 0.1f64..5.0,
        ) {
            let tape = Tape::new();
            let k = tape.leaf(Tensor::new(vec![3, 2, 1], kernel).unwrap());
            let x = Tensor::new(vec![6, 2], data).unwrap();
            let mut perturbed = x.clone();
            for v in &mut perturbed.data_mut()[(t + 1) * 2..] {
                *v += bump;
            }
            let y1 = tape.leaf(x).conv1d(k, ConvMode::Causal).unwrap().value();
            let y2 = tape.leaf(perturbed).conv1d(k, ConvMode::Causal).unwrap().value();
            prop_assert_eq!(&y1.data()[..=t], &y2.data()[..=t]);
        }
    }
}

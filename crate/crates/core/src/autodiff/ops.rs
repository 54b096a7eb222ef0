//! Differentiable operations over [`Var`].
//!
//! Binary elementwise ops accept equal shapes, or a `1×C` right operand
//! broadcast over every row of a `T×C` left operand. Nothing else broadcasts.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Padding scheme for [`Var::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// `(W-1)/2` zeros on each side; requires odd width.
    Same,
    /// `W-1` zeros on the left, so step `t` only sees inputs `<= t`.
    Causal,
}

impl ConvMode {
    fn left_pad(self, width: usize) -> Result<usize> {
        match self {
            ConvMode::Same if width.is_multiple_of(2) => Err(Error::Config(format!(
                "same-padded convolution needs an odd kernel width, got {width}"
            ))),
            ConvMode::Same => Ok((width - 1) / 2),
            ConvMode::Causal => Ok(width - 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Softsign,
    Log,
    Exp,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
    MeanAbs,
}

/// Dispatches a named elementwise op. Binary ops require `b`.
pub fn elementwise<'t>(op: Elementwise, a: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let need_b = || b.ok_or_else(|| Error::Contract(format!("{op:?} needs a second operand")));
    match op {
        Elementwise::Add => a.add(need_b()?),
        Elementwise::Sub => a.sub(need_b()?),
        Elementwise::Mul => a.mul(need_b()?),
        Elementwise::Relu => Ok(a.relu()),
        Elementwise::Softsign => Ok(a.softsign()),
        Elementwise::Log => a.log(),
        Elementwise::Exp => Ok(a.exp()),
        Elementwise::Scale(c) => Ok(a.scale(c)),
    }
}

/// Scalar reduction. Tensors are never empty, so this cannot fail.
pub fn reduce(op: Reduce, x: Var<'_>) -> Var<'_> {
    match op {
        Reduce::Mean => x.mean(),
        Reduce::Sum => x.sum(),
        Reduce::MeanAbs => x.mean_abs(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of one row, written in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    let row_over_matrix = a.is_matrix() && b.is_matrix() && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1];
    if row_over_matrix {
        Ok(true)
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Sums a `T×C` gradient down to `1×C` when the operand was broadcast.
fn unbroadcast(g: Tensor, broadcast: bool) -> Tensor {
    if !broadcast {
        return g;
    }
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    Tensor::from_parts(vec![1, cols], out)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let cols = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, if broadcast { bd[i % cols] } else { bd[i] }))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn unary<'t>(x: Var<'t>, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
    let out = x.value().map(f);
    x.tape().custom(&[x], out, move |args| {
        let (xin, y, g) = (args.inputs[0].data(), args.output.data(), args.grad.data());
        let d = xin
            .iter()
            .zip(y)
            .zip(g)
            .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
            .collect();
        vec![Tensor::from_parts(args.inputs[0].shape().to_vec(), d)]
    })
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if !a.is_matrix() || !b.is_matrix() || a.shape()[1] != b.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), m, k, b.data(), n));
        Ok(self.tape().custom(&[self, other], out, move |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
            let bt = b.transpose();
            let at = a.transpose();
            vec![
                Tensor::from_parts(vec![m, k], matmul_raw(g.data(), m, n, bt.data(), k)),
                Tensor::from_parts(vec![k, n], matmul_raw(at.data(), k, m, g.data(), n)),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(self
            .tape()
            .custom(&[self], v.transpose(), |args| vec![args.grad.transpose()]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let bc = broadcast_kind("add", &a, &b)?;
        let out = zip_broadcast(&a, &b, bc, |x, y| x + y);
        Ok(self.tape().custom(&[self, other], out, move |args| {
            vec![args.grad.clone(), unbroadcast(args.grad.clone(), bc)]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let bc = broadcast_kind("sub", &a, &b)?;
        let out = zip_broadcast(&a, &b, bc, |x, y| x - y);
        Ok(self.tape().custom(&[self, other], out, move |args| {
            vec![args.grad.clone(), unbroadcast(args.grad.map(|g| -g), bc)]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let bc = broadcast_kind("mul", &a, &b)?;
        let out = zip_broadcast(&a, &b, bc, |x, y| x * y);
        Ok(self.tape().custom(&[self, other], out, move |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
            let da = zip_broadcast(g, b, bc, |gv, bv| gv * bv);
            let gb = Tensor::from_parts(
                g.shape().to_vec(),
                g.data().iter().zip(a.data()).map(|(gv, av)| gv * av).collect(),
            );
            vec![da, unbroadcast(gb, bc)]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, |x| c * x, move |_, _| c)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `x / (1 + |x|)`.
    pub fn softsign(self) -> Var<'t> {
        unary(
            self,
            |x| x / (1.0 + x.abs()),
            |x, _| {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(unary(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let mut out = (*self.value()).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.tape().custom(&[self], out, move |args| {
            let (y, g) = (args.output, args.grad);
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx
                .chunks_mut(cols)
                .zip(y.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Tensor::from_parts(y.shape().to_vec(), dx)]
        })
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let mut out = (*self.value()).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.tape().custom(&[self], out, move |args| {
            let (y, g) = (args.output, args.grad);
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx
                .chunks_mut(cols)
                .zip(y.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let gsum: f64 = gr.iter().sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = gv - yv.exp() * gsum;
                }
            }
            vec![Tensor::from_parts(y.shape().to_vec(), dx)]
        })
    }

    /// Divides each row by `‖row‖₂ + eps`.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let norms: Vec<f64> = x
            .data()
            .chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let data = x
            .data()
            .chunks(cols)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / (n + eps)))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape().custom(&[self], out, move |args| {
            let (x, g) = (args.inputs[0], args.grad);
            let mut dx = vec![0.0; x.len()];
            for (((dr, xr), gr), &n) in dx
                .chunks_mut(cols)
                .zip(x.data().chunks(cols))
                .zip(g.data().chunks(cols))
                .zip(&norms)
            {
                let d = n + eps;
                let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                let coef = if n > 0.0 { dot / (n * d * d) } else { 0.0 };
                for ((o, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                    *o = gv / d - coef * xv;
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), dx)]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        self.tape().custom(&[self], out, |args| {
            vec![Tensor::full(args.inputs[0].shape().to_vec(), args.grad.data()[0])]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn mean_abs(self) -> Var<'t> {
        let x = self.value();
        let n = x.len() as f64;
        let out = Tensor::scalar(x.data().iter().map(|v| v.abs()).sum::<f64>() / n);
        self.tape().custom(&[self], out, move |args| {
            let g = args.grad.data()[0] / n;
            vec![args.inputs[0].map(|v| {
                if v > 0.0 {
                    g
                } else if v < 0.0 {
                    -g
                } else {
                    0.0
                }
            })]
        })
    }

    /// 1-D convolution of `x: T×Cin` with `kernel: W×Cin×Cout`.
    pub fn conv1d(self, kernel: Var<'t>, mode: ConvMode) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        if !x.is_matrix() || k.shape().len() != 3 || k.shape()[1] != x.shape()[1] {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let (t_len, cin) = (x.shape()[0], x.shape()[1]);
        let (width, cout) = (k.shape()[0], k.shape()[2]);
        let pad = mode.left_pad(width)?;
        // input row feeding output row `t` through tap `w`
        let src = move |t: usize, w: usize| (t + w).checked_sub(pad).filter(|&s| s < t_len);

        let mut out = vec![0.0; t_len * cout];
        for t in 0..t_len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for w in 0..width {
                let Some(s) = src(t, w) else { continue };
                for c in 0..cin {
                    let xv = x.data()[s * cin + c];
                    let krow = &k.data()[(w * cin + c) * cout..(w * cin + c + 1) * cout];
                    for (o, kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![t_len, cout], out);
        Ok(self.tape().custom(&[self, kernel], out, move |args| {
            let (x, k, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let mut dx = vec![0.0; t_len * cin];
            let mut dk = vec![0.0; width * cin * cout];
            for t in 0..t_len {
                let grow = &g[t * cout..(t + 1) * cout];
                for w in 0..width {
                    let Some(s) = src(t, w) else { continue };
                    for c in 0..cin {
                        let base = (w * cin + c) * cout;
                        let xv = x[s * cin + c];
                        let krow = &k[base..base + cout];
                        let acc = grow.iter().zip(krow).fold(0.0, |a, (g, k)| a + g * k);
                        for (d, g) in dk[base..base + cout].iter_mut().zip(grow) {
                            *d += g * xv;
                        }
                        dx[s * cin + c] += acc;
                    }
                }
            }
            vec![
                Tensor::from_parts(vec![t_len, cin], dx),
                Tensor::from_parts(vec![width, cin, cout], dk),
            ]
        }))
    }

    /// Row lookup into a `V×E` table; gradient scatters back into the rows.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let rows = table.rows();
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let cols = table.cols();
        let data = ids.iter().flat_map(|&i| table.row_slice(i).iter().copied()).collect();
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        let ids = ids.to_vec();
        Ok(self.tape().custom(&[self], out, move |args| {
            let mut d = Tensor::zeros(args.inputs[0].shape().to_vec());
            let g = args.grad;
            for (r, &i) in ids.iter().enumerate() {
                let dst = &mut d.data_mut()[i * cols..(i + 1) * cols];
                for (o, v) in dst.iter_mut().zip(g.row_slice(r)) {
                    *o += v;
                }
            }
            vec![d]
        }))
    }

    /// Row `r` of a matrix as `1×C`.
    pub fn select_row(self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::row(x.slice_rows(r, r + 1)?.into_data());
        let cols = x.cols();
        Ok(self.tape().custom(&[self], out, move |args| {
            let mut d = Tensor::zeros(args.inputs[0].shape().to_vec());
            d.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(args.grad.data());
            vec![d]
        }))
    }
}

impl Tape {
    /// Registers a constant; identical to a leaf, named for intent.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }
}

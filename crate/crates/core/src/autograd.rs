//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Each node keeps
//! its forward value; backward closures read whatever inputs they need from
//! the value table instead of copying them.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &mut Grads)>;

/// Gradient accumulators indexed by node.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    wants: Vec<bool>,
}

impl Grads {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn add_vec(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backward: Vec<Option<BackwardFn>>,
    requires_grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, t: Tensor, back: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.values.push(t);
        self.backward.push(back);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// Records a node whose gradient rule is supplied by the caller.
    pub(crate) fn custom(&mut self, inputs: &[Var], value: Tensor, back: BackwardFn) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        self.push(value, rg.then_some(back), rg)
    }

    /// Runs the reverse sweep from a scalar node, seeding it with 1.
    pub fn backward(&self, root: Var) -> Grads {
        let n = root.0 + 1;
        let mut grads = Grads {
            slots: vec![None; n],
            wants: self.requires_grad[..n].to_vec(),
        };
        grads.wants[root.0] = true;
        grads.slots[root.0] = Some(vec![1.0; self.values[root.0].len()]);
        for i in (0..n).rev() {
            let Some(back) = &self.backward[i] else {
                continue;
            };
            if let Some(g) = grads.slots[i].take() {
                back(&g, &self.values, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        let id = Var(self.len());
        self.custom(
            &[x],
            out,
            Box::new(move |g, vals, grads| {
                let (xs, ys) = (vals[x.0].data(), vals[id.0].data());
                let gx = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                grads.add_vec(x, gx);
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |v| v * k, move |_, _| k)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, _, grads| {
                grads.add(a, g);
                grads.add(b, g);
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, _, grads| {
                grads.add(a, g);
                if grads.wants(b) {
                    grads.add_vec(b, g.iter().map(|v| -v).collect());
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, vals, grads| {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                if grads.wants(a) {
                    grads.add_vec(a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if grads.wants(b) {
                    grads.add_vec(b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }),
        ))
    }

    /// Adds a fixed tensor (e.g. a noise realization); no gradient flows to it.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape(
                "add_const",
                format!("{} vs {}", self.value(x).len(), c.len()),
            ));
        }
        let t = self.value(x);
        let out = Tensor::new(
            t.shape(),
            t.data().iter().zip(c).map(|(a, b)| a + b).collect(),
        )?;
        Ok(self.custom(&[x], out, Box::new(move |g, _, grads| grads.add(x, g))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).len();
        self.custom(
            &[x],
            out,
            Box::new(move |g, _, grads| grads.add_vec(x, vec![g[0]; n])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let se: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.custom(
            &[a, b],
            Tensor::scalar(se / n),
            Box::new(move |g, vals, grads| {
                let k = 2.0 * g[0] / n;
                let d: Vec<f64> = vals[a.0]
                    .data()
                    .iter()
                    .zip(vals[b.0].data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if grads.wants(b) {
                    grads.add_vec(b, d.iter().map(|v| -v).collect());
                }
                grads.add_vec(a, d);
            }),
        ))
    }

    /// Multiplies channel `i` of an `N,C,H,W` tensor by `m[i]`.
    pub fn channel_scale(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(m).len() != c {
            return Err(Error::shape(
                "channel_scale",
                format!("{c} channels but gain vector of length {}", self.value(m).len()),
            ));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let ms = self.value(m).data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for i in o..o + plane {
                    out[i] = xs[i] * ms[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.custom(
            &[x, m],
            out,
            Box::new(move |g, vals, grads| {
                let (xs, ms) = (vals[x.0].data(), vals[m.0].data());
                if grads.wants(x) {
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            for i in o..o + plane {
                                gx[i] = g[i] * ms[ch];
                            }
                        }
                    }
                    grads.add_vec(x, gx);
                }
                if grads.wants(m) {
                    let mut gm = vec![0.0; c];
                    for b in 0..n {
                        for (ch, acc) in gm.iter_mut().enumerate() {
                            let o = (b * c + ch) * plane;
                            *acc += (o..o + plane).map(|i| g[i] * xs[i]).sum::<f64>();
                        }
                    }
                    grads.add_vec(m, gm);
                }
            }),
        ))
    }

    /// Column `s` of a `rows×cols` matrix.
    pub fn column(&mut self, mat: Var, s: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(mat) {
            [r, c] => (*r, *c),
            other => return Err(Error::shape("column", format!("expected matrix, got {other:?}"))),
        };
        if s >= cols {
            return Err(Error::Index { index: s, len: cols });
        }
        let data = self.value(mat).data();
        let out = Tensor::new(&[rows], (0..rows).map(|r| data[r * cols + s]).collect())?;
        Ok(self.custom(
            &[mat],
            out,
            Box::new(move |g, _, grads| {
                let mut gm = vec![0.0; rows * cols];
                for r in 0..rows {
                    gm[r * cols + s] = g[r];
                }
                grads.add_vec(mat, gm);
            }),
        ))
    }

    /// Channels `[start, start+len)` of an `N,C,H,W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) of {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let o = (b * c + start) * plane;
            out.extend_from_slice(&xs[o..o + len * plane]);
        }
        let out = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _, grads| {
                let mut gx = vec![0.0; n * c * plane];
                for b in 0..n {
                    let o = (b * c + start) * plane;
                    gx[o..o + len * plane]
                        .copy_from_slice(&g[b * len * plane..(b + 1) * len * plane]);
                }
                grads.add_vec(x, gx);
            }),
        ))
    }

    /// `Σ_rows Var_cols(x)` for a `rows×cols` matrix (population variance).
    pub fn row_variance_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(x) {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::shape(
                    "row_variance_sum",
                    format!("expected matrix, got {other:?}"),
                ))
            }
        };
        let data = self.value(x).data();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            total += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        }
        Ok(self.custom(
            &[x],
            Tensor::scalar(total),
            Box::new(move |g, vals, grads| {
                let data = vals[x.0].data();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &data[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    for (j, v) in row.iter().enumerate() {
                        gx[r * cols + j] = g[0] * 2.0 * (v - mean) / cols as f64;
                    }
                }
                grads.add_vec(x, gx);
            }),
        ))
    }

    /// 2-D cross-correlation with zero padding; `w` is `O×C×K×K`, `b` is `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 || self.value(b).len() != o {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} on {h}×{wd}"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let y = kernels::conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            o,
            Some(self.value(b).data()),
        );
        let out = Tensor::new(&[n, o, geom.out_height(), geom.out_width()], y)?;
        let plane = geom.out_height() * geom.out_width();
        Ok(self.custom(
            &[x, w, b],
            out,
            Box::new(move |g, vals, grads| {
                if grads.wants(x) {
                    let gx = kernels::conv_backward_input(g, n, &geom, vals[w.0].data(), o);
                    grads.add_vec(x, gx);
                }
                if grads.wants(w) {
                    let gw = kernels::conv_backward_weight(vals[x.0].data(), g, n, &geom, o);
                    grads.add_vec(w, gw);
                }
                if grads.wants(b) {
                    grads.add_vec(b, kernels::bias_grad(g, n, o, plane));
                }
            }),
        ))
    }

    /// Transposed convolution, the adjoint of `conv2d` with the same
    /// `stride`/`pad`. `w` is `Cin×Cout×K×K`; the output extent is given
    /// explicitly since several extents map onto the same input size.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wi, cout, k, k2) = self.value(w).dims4()?;
        if wi != cin || k != k2 || self.value(b).len() != cout || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let geom = ConvGeom {
            channels: cout,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
        };
        if out_h + 2 * pad < k || geom.out_height() != h || geom.out_width() != wd {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output {out_h}×{out_w} does not map back onto input {h}×{wd}"),
            ));
        }
        let mut y = kernels::conv_backward_input(self.value(x).data(), n, &geom, self.value(w).data(), cin);
        let plane = out_h * out_w;
        let bias = self.value(b).data();
        for bn in 0..n {
            for (co, &bv) in bias.iter().enumerate() {
                let o = (bn * cout + co) * plane;
                y[o..o + plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(&[n, cout, out_h, out_w], y)?;
        Ok(self.custom(
            &[x, w, b],
            out,
            Box::new(move |g, vals, grads| {
                if grads.wants(x) {
                    let gx = kernels::conv_forward(g, n, &geom, vals[w.0].data(), cin, None);
                    grads.add_vec(x, gx);
                }
                if grads.wants(w) {
                    let gw = kernels::conv_backward_weight(g, vals[x.0].data(), n, &geom, cin);
                    grads.add_vec(w, gw);
                }
                if grads.wants(b) {
                    grads.add_vec(b, kernels::bias_grad(g, n, cout, plane));
                }
            }),
        ))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Central-difference gradient checking for graphs built on a [`Tape`].
pub mod gradcheck {
    use super::*;

    /// Max relative error between the tape gradient and central differences
    /// of `f` at each leaf. `f` must build a scalar from the given leaves.
    pub fn check(
        inputs: &[Tensor],
        h: f64,
        f: impl Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.len()]);
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
                worst = worst.max((numeric - analytic[i]).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert_eq!(t.value(y).data()[4], 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let xv = random(&[2, 2, 5, 6], &mut rng);
        let x = t.constant(xv.clone());
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        kernel.data_mut()[4] = 1.0; // out 0 <- in 0 center
        kernel.data_mut()[9 * 3 + 4] = 1.0; // out 1 <- in 1 center
        let w = t.constant(kernel);
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), xv.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = t.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.conv2d(x, w, b, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 8, 8], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let err = check(&[x, w, b], 1e-3, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            t.sum(y)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn strided_conv_and_deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 8, 8], &mut rng);
        let w = random(&[3, 2, 5, 5], &mut rng);
        let b = random(&[3], &mut rng);
        let weights = random(&[2, 3, 4, 4], &mut rng);
        let err = check(&[x, w, b], 1e-3, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 2).unwrap();
            let c = t.constant(weights.clone());
            let p = t.mul(y, c).unwrap();
            t.sum(p)
        });
        assert!(err < 1e-4, "conv relative error {err}");

        let x = random(&[2, 3, 4, 4], &mut rng);
        let w = random(&[3, 2, 5, 5], &mut rng);
        let b = random(&[2], &mut rng);
        let weights = random(&[2, 2, 8, 8], &mut rng);
        let err = check(&[x, w, b], 1e-3, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 2, 8, 8).unwrap();
            let c = t.constant(weights.clone());
            let p = t.mul(y, c).unwrap();
            t.sum(p)
        });
        assert!(err < 1e-4, "deconv relative error {err}");
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[1, 3, 2, 2], &mut rng);
        let b = random(&[1, 3, 2, 2], &mut rng);
        let m = Tensor::from_fn(&[3], |i| 0.5 + i as f64);
        let err = check(&[a, b, m], 1e-4, |t, v| {
            let e = t.exp(v[0]);
            let s = t.softplus(v[1]);
            let d = t.sub(e, s).unwrap();
            let g = t.channel_scale(d, v[2]).unwrap();
            let r = t.abs(g);
            let q = t.mse(r, v[1]).unwrap();
            let h = t.slice_channels(v[0], 1, 2).unwrap();
            let hs = t.sum(h);
            let y = t.add(q, hs).unwrap();
            t.scale(y, 3.0)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn matrix_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random(&[4, 3], &mut rng);
        let err = check(&[m], 1e-4, |t, v| {
            let col = t.column(v[0], 2).unwrap();
            let s = t.sum(col);
            let var = t.row_variance_sum(v[0]).unwrap();
            let y = t.mul(s, var).unwrap();
            t.neg(y)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

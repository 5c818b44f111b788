//! Learned per-channel factorized prior.
//!
//! Each channel owns a scalar cumulative `F(x) = sigmoid(f(x))` where `f` is
//! a chain of four affine maps with widths `1 → 3 → 3 → 3 → 1`. Matrix
//! entries pass through a softplus so they stay positive, and every stage
//! but the last adds `tanh(a) ⊙ tanh(z)`, which keeps each stage monotone
//! for `tanh(a) > −1`. The bin mass of `v` is `F(v + ½) − F(v − ½)`.

use rand::Rng;

use super::{bits_of, tables::FreqTable, Likelihood, LIKELIHOOD_FLOOR};
use crate::autograd::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const STAGES: usize = 4;
const WIDTH: usize = 3;
/// Overall scale of the initial cumulative: it starts out spread over
/// roughly `[-10, 10]`.
const INIT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    channels: usize,
    matrices: [ParamId; STAGES],
    biases: [ParamId; STAGES],
    factors: [ParamId; STAGES - 1],
}

impl FactorizedModel {
    pub fn build(prefix: &str, channels: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..STAGES {
            let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(store.add(
                format!("{prefix}.matrix{k}"),
                Tensor::full(&[channels, fout, fin], init),
            ));
            biases.push(store.add(
                format!("{prefix}.bias{k}"),
                Tensor::from_fn(&[channels, fout], |_| rng.gen_range(-0.5..0.5)),
            ));
            if k + 1 < STAGES {
                factors.push(store.add(format!("{prefix}.factor{k}"), Tensor::zeros(&[channels, fout])));
            }
        }
        Self {
            channels,
            matrices: matrices.try_into().expect("four stages"),
            biases: biases.try_into().expect("four stages"),
            factors: factors.try_into().expect("three factors"),
        }
    }

    pub fn attach(prefix: &str, channels: usize, store: &ParamStore) -> Result<Self> {
        let find = |name: String, shape: Vec<usize>| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.tensor(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    store.tensor(id).shape()
                )));
            }
            Ok(id)
        };
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..STAGES {
            let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
            matrices.push(find(format!("{prefix}.matrix{k}"), vec![channels, fout, fin])?);
            biases.push(find(format!("{prefix}.bias{k}"), vec![channels, fout])?);
            if k + 1 < STAGES {
                factors.push(find(format!("{prefix}.factor{k}"), vec![channels, fout])?);
            }
        }
        Ok(Self {
            channels,
            matrices: matrices.try_into().expect("four stages"),
            biases: biases.try_into().expect("four stages"),
            factors: factors.try_into().expect("three factors"),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_params(&self) -> usize {
        let per_channel: usize = (0..STAGES).map(|k| FILTERS[k] * FILTERS[k + 1] + FILTERS[k + 1]).sum::<usize>()
            + FILTERS[1..STAGES].iter().sum::<usize>();
        per_channel * self.channels
    }

    fn param_vars(&self, bound: &Bound) -> Vec<Var> {
        let mut v = Vec::with_capacity(1 + 3 * STAGES);
        for k in 0..STAGES {
            v.push(bound.var(self.matrices[k]));
            v.push(bound.var(self.biases[k]));
            if k + 1 < STAGES {
                v.push(bound.var(self.factors[k]));
            }
        }
        v
    }

    /// Total bits of `y` (`N,C,H,W`) as a differentiable scalar.
    pub fn bits(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        bits_op(tape, y, &self.param_vars(bound), self.channels)
    }

    /// Frozen copy of the cumulative for evaluation and coding.
    pub fn cdf(&self, store: &ParamStore) -> FactorizedCdf {
        let raw: Vec<&[f64]> = (0..STAGES)
            .flat_map(|k| {
                let mut v = vec![store.tensor(self.matrices[k]).data(), store.tensor(self.biases[k]).data()];
                if k + 1 < STAGES {
                    v.push(store.tensor(self.factors[k]).data());
                }
                v
            })
            .collect();
        FactorizedCdf {
            channels: self.channels,
            net: Net::from_raw(&raw),
        }
    }
}

/// Effective (constrained) parameters of every channel.
#[derive(Debug, Clone, PartialEq)]
struct Net {
    /// `softplus(matrix)`, channel-major `[c][out][in]`.
    w: [Vec<f64>; STAGES],
    b: [Vec<f64>; STAGES],
    /// `tanh(factor)`.
    t: [Vec<f64>; STAGES - 1],
}

#[derive(Default, Clone, Copy)]
struct Cache {
    h: [[f64; WIDTH]; STAGES],
    z: [[f64; WIDTH]; STAGES],
}

struct RawGrads {
    w: [Vec<f64>; STAGES],
    b: [Vec<f64>; STAGES],
    t: [Vec<f64>; STAGES - 1],
}

impl Net {
    /// `raw` is `[matrix0, bias0, factor0, …, matrix3, bias3]`.
    fn from_raw(raw: &[&[f64]]) -> Self {
        let mut it = raw.iter();
        let mut w = Vec::new();
        let mut b = Vec::new();
        let mut t = Vec::new();
        for k in 0..STAGES {
            w.push(it.next().unwrap().iter().map(|&m| softplus(m)).collect());
            b.push(it.next().unwrap().to_vec());
            if k + 1 < STAGES {
                t.push(it.next().unwrap().iter().map(|a| a.tanh()).collect());
            }
        }
        Self {
            w: w.try_into().unwrap(),
            b: b.try_into().unwrap(),
            t: t.try_into().unwrap(),
        }
    }

    fn logit(&self, ch: usize, x: f64, cache: &mut Cache) -> f64 {
        let mut h = [0.0; WIDTH];
        h[0] = x;
        for k in 0..STAGES {
            let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
            cache.h[k] = h;
            let wo = ch * fout * fin;
            let mut z = [0.0; WIDTH];
            for j in 0..fout {
                let mut acc = self.b[k][ch * fout + j];
                for i in 0..fin {
                    acc += self.w[k][wo + j * fin + i] * h[i];
                }
                z[j] = acc;
            }
            cache.z[k] = z;
            if k + 1 < STAGES {
                for j in 0..fout {
                    z[j] += self.t[k][ch * fout + j] * z[j].tanh();
                }
            }
            h = z;
        }
        h[0]
    }

    /// Accumulates parameter gradients for `d logit = g` and returns
    /// `d logit / dx · g`.
    fn back(&self, ch: usize, cache: &Cache, g: f64, out: &mut RawGrads) -> f64 {
        let mut g_out = [0.0; WIDTH];
        g_out[0] = g;
        for k in (0..STAGES).rev() {
            let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
            let mut g_z = g_out;
            if k + 1 < STAGES {
                for j in 0..fout {
                    let th = cache.z[k][j].tanh();
                    let t = self.t[k][ch * fout + j];
                    out.t[k][ch * fout + j] += g_out[j] * th;
                    g_z[j] = g_out[j] * (1.0 + t * (1.0 - th * th));
                }
            }
            let wo = ch * fout * fin;
            let mut g_h = [0.0; WIDTH];
            for j in 0..fout {
                out.b[k][ch * fout + j] += g_z[j];
                for i in 0..fin {
                    out.w[k][wo + j * fin + i] += g_z[j] * cache.h[k][i];
                    g_h[i] += self.w[k][wo + j * fin + i] * g_z[j];
                }
            }
            g_out = g_h;
        }
        g_out[0]
    }
}

/// `(σ(hi) − σ(lo))` evaluated on whichever tail keeps precision.
fn bin_mass(lower: f64, upper: f64) -> f64 {
    let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
    (sigmoid(s * upper) - sigmoid(s * lower)).abs()
}

fn sigmoid_grad(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

fn bits_op(tape: &mut Tape, y: Var, params: &[Var], channels: usize) -> Result<Var> {
    let (_, c, h, w) = tape.value(y).dims4()?;
    if c != channels {
        return Err(Error::shape("factorized rate", format!("model has {channels} channels, latent has {c}")));
    }
    let plane = h * w;
    let raw: Vec<&[f64]> = params.iter().map(|&p| tape.value(p).data()).collect();
    let net = Net::from_raw(&raw);
    let mut cache = Cache::default();
    let mut total = 0.0;
    let mut floored = 0usize;
    for (i, &v) in tape.value(y).data().iter().enumerate() {
        let ch = (i / plane) % c;
        let lo = net.logit(ch, v - 0.5, &mut cache);
        let hi = net.logit(ch, v + 0.5, &mut cache);
        let (bits, f) = bits_of(bin_mass(lo, hi));
        total += bits;
        floored += f as usize;
    }
    if floored > 0 {
        log::debug!("factorized rate: {floored} elements at the likelihood floor");
    }
    let mut inputs = vec![y];
    inputs.extend_from_slice(params);
    let params = params.to_vec();
    Ok(tape.custom(
        &inputs,
        Tensor::scalar(total),
        Box::new(move |g, vals, grads| {
            let g = g[0];
            let raw: Vec<&[f64]> = params.iter().map(|p| vals[p.0].data()).collect();
            let net = Net::from_raw(&raw);
            let mut acc = RawGrads {
                w: net.w.clone().map(|v| vec![0.0; v.len()]),
                b: net.b.clone().map(|v| vec![0.0; v.len()]),
                t: net.t.clone().map(|v| vec![0.0; v.len()]),
            };
            let ys = vals[y.0].data();
            let mut gy = vec![0.0; ys.len()];
            let (mut c_lo, mut c_hi) = (Cache::default(), Cache::default());
            for (i, &v) in ys.iter().enumerate() {
                let ch = (i / plane) % c;
                let lo = net.logit(ch, v - 0.5, &mut c_lo);
                let hi = net.logit(ch, v + 0.5, &mut c_hi);
                let mass = bin_mass(lo, hi);
                if mass <= LIKELIHOOD_FLOOR {
                    continue;
                }
                let d_mass = -g / (mass * std::f64::consts::LN_2);
                gy[i] = net.back(ch, &c_hi, d_mass * sigmoid_grad(hi), &mut acc)
                    + net.back(ch, &c_lo, -d_mass * sigmoid_grad(lo), &mut acc);
            }
            grads.add_vec(y, gy);
            let mut p = params.iter();
            for k in 0..STAGES {
                let m = *p.next().unwrap();
                let gm = acc.w[k]
                    .iter()
                    .zip(vals[m.0].data())
                    .map(|(gw, &raw)| gw * sigmoid(raw))
                    .collect();
                grads.add_vec(m, gm);
                grads.add(*p.next().unwrap(), &acc.b[k]);
                if k + 1 < STAGES {
                    let f = *p.next().unwrap();
                    let ga = acc.t[k]
                        .iter()
                        .zip(&net.t[k])
                        .map(|(gt, t)| gt * (1.0 - t * t))
                        .collect();
                    grads.add_vec(f, ga);
                }
            }
        }),
    ))
}

/// Frozen factorized cumulative.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCdf {
    channels: usize,
    net: Net,
}

impl FactorizedCdf {
    /// `F(x)` for one channel.
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.net.logit(channel, x, &mut Cache::default()))
    }

    /// Coding table for integer symbols (rounding quantizer).
    pub fn table(&self, channel: usize) -> FreqTable {
        FreqTable::from_likelihood(super::tables::SYMBOL_MIN, super::tables::SYMBOL_MAX, |k| {
            self.likelihood(channel, k as f64)
        })
    }

    pub fn tables(&self) -> Vec<FreqTable> {
        (0..self.channels).map(|c| self.table(c)).collect()
    }

    /// Coding table for symbol `k` meaning the value `k − offset`
    /// (universal quantizer), searched one step beyond `base`'s window.
    pub fn offset_table(&self, channel: usize, offset: f64, base: &FreqTable) -> FreqTable {
        FreqTable::from_likelihood(base.lo() - 1, base.hi() + 1, |k| {
            self.likelihood(channel, k as f64 - offset)
        })
    }
}

impl Likelihood for FactorizedCdf {
    fn channels(&self) -> usize {
        self.channels
    }

    fn likelihood(&self, channel: usize, value: f64) -> f64 {
        let mut cache = Cache::default();
        let lo = self.net.logit(channel, value - 0.5, &mut cache);
        let hi = self.net.logit(channel, value + 0.5, &mut cache);
        bin_mass(lo, hi)
    }
}

//! Layers, recurrent cells and the diagonal-Gaussian policy head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{bind_params, Graph, Var, VarCursor};
use crate::error::shape_err;
use crate::math::{self, LN_2PI};
use crate::{Error, Result, Tensor};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -0.5;

/// A collection of named trainable tensors.
///
/// `params`, `params_mut` and `param_names` list the same tensors in the same
/// order. Forward passes receive the bound handles in that order too.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

pub(crate) fn prefixed(prefix: &str, names: Vec<String>) -> impl Iterator<Item = String> + '_ {
    names.into_iter().map(move |n| format!("{prefix}.{n}"))
}

/// Xavier-uniform `rows×cols` matrix with fan-in `cols` and fan-out `rows`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = math::sqrt(6.0 / (rows + cols) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("positive widths")
}

/// `n` independent unit-normal draws.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.contains(&0) {
        return Err(Error::Parameter(format!("layer widths must be positive: {widths:?}")));
    }
    Ok(())
}

/// Fully connected layer `y = W·x + b`, `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

impl AffineLayer {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        check_widths(&[d_in, d_out])?;
        Ok(Self { weight: xavier_uniform(d_out, d_in, rng), bias: Tensor::zeros(&[d_out]) })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape() {
            [o, _] if bias.shape() == [*o] => Ok(Self { weight, bias }),
            _ => Err(shape_err!("affine weight {:?} with bias {:?}", weight.shape(), bias.shape())),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W·x + b` for a single input vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, self.params(), false);
        let layer = BoundAffine::take(&mut VarCursor::new(&vars))?;
        let vx = g.input(x.clone());
        let y = layer.forward(&mut g, vx)?;
        Ok(Tensor::vector(g.value(y).data()))
    }
}

impl BoundAffine {
    pub fn take(c: &mut VarCursor<'_>) -> Result<Self> {
        Ok(Self { weight: c.next_var()?, bias: c.next_var()? })
    }

    /// Batched affine map over the rows of `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

impl Module for AffineLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["W".into(), "b".into()]
    }
}

/// Vanilla recurrent cell `h' = tanh(W_ih·x + W_hh·h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundRnn {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl RnnCell {
    pub fn new<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        check_widths(&[d_in, hidden])?;
        Ok(Self {
            w_ih: xavier_uniform(hidden, d_in, rng),
            w_hh: xavier_uniform(hidden, hidden, rng),
            bias: Tensor::zeros(&[hidden]),
        })
    }

    pub fn from_parts(w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Result<Self> {
        let h = bias.numel();
        let ok = matches!(w_ih.shape(), [r, _] if *r == h) && w_hh.shape() == [h, h] && bias.shape() == [h];
        if !ok {
            return Err(shape_err!(
                "rnn cell W_ih {:?}, W_hh {:?}, b {:?}",
                w_ih.shape(),
                w_hh.shape(),
                bias.shape()
            ));
        }
        Ok(Self { w_ih, w_hh, bias })
    }

    pub fn d_in(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.bias.numel()
    }

    /// One step on single vectors.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, self.params(), false);
        let cell = BoundRnn::take(&mut VarCursor::new(&vars))?;
        let (vx, vh) = (g.input(x.clone()), g.input(h.clone()));
        let out = cell.step(&mut g, vx, Some(vh))?;
        Ok(Tensor::vector(g.value(out).data()))
    }

    /// Runs the cell over `seq` from `h0`; returns the final hidden state
    /// and every per-step hidden state.
    pub fn encode(&self, seq: &[Tensor], h0: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, self.params(), false);
        let cell = BoundRnn::take(&mut VarCursor::new(&vars))?;
        let xs: Vec<Var> = seq.iter().map(|x| g.input(x.clone())).collect();
        let vh = g.input(h0.clone());
        let (last, hs) = cell.encode(&mut g, &xs, Some(vh))?;
        let hs = hs.iter().map(|&h| Tensor::vector(g.value(h).data())).collect();
        Ok((Tensor::vector(g.value(last).data()), hs))
    }
}

impl BoundRnn {
    pub fn take(c: &mut VarCursor<'_>) -> Result<Self> {
        Ok(Self { w_ih: c.next_var()?, w_hh: c.next_var()?, bias: c.next_var()? })
    }

    /// Batched step. `h = None` stands for the zero state.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Option<Var>) -> Result<Var> {
        let mut pre = g.linear(x, self.w_ih, Some(self.bias))?;
        if let Some(h) = h {
            let rec = g.linear(h, self.w_hh, None)?;
            pre = g.add(pre, rec)?;
        }
        Ok(g.tanh(pre))
    }

    /// Left-to-right pass over `seq`; `h0 = None` is the zero state.
    pub fn encode(&self, g: &mut Graph<'_>, seq: &[Var], h0: Option<Var>) -> Result<(Var, Vec<Var>)> {
        if seq.is_empty() {
            return Err(Error::Domain("cannot encode an empty sequence".into()));
        }
        let mut h = h0;
        let mut hs = Vec::with_capacity(seq.len());
        for &x in seq {
            let next = self.step(g, x, h)?;
            hs.push(next);
            h = Some(next);
        }
        Ok((hs[hs.len() - 1], hs))
    }
}

impl Module for RnnCell {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["W_ih".into(), "W_hh".into(), "b".into()]
    }
}

/// Stack of affine layers with tanh between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<AffineLayer>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Parameter("an MLP needs at least input and output widths".into()));
        }
        let layers = widths.windows(2).map(|w| AffineLayer::new(w[0], w[1], rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Bound handles for every layer.
    pub fn take(&self, c: &mut VarCursor<'_>) -> Result<Vec<BoundAffine>> {
        self.layers.iter().map(|_| BoundAffine::take(c)).collect()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }
}

/// Forward through bound MLP layers. With `final_tanh` every layer is
/// followed by tanh, otherwise the last layer stays linear.
pub fn mlp_forward(g: &mut Graph<'_>, layers: &[BoundAffine], x: Var, final_tanh: bool) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(g, h)?;
        if final_tanh || i + 1 < layers.len() {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
    fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("{i}"), l.param_names()).collect::<Vec<_>>())
            .collect()
    }
}

// ------------------------------------------------------- Gaussian policy head

/// Clamp a raw log-std parameter into `[LOG_STD_MIN, LOG_STD_MAX]` and
/// broadcast it to `shape` (scalar or per-dimension row).
pub fn bounded_log_std(g: &mut Graph<'_>, raw: Var, shape: &[usize]) -> Result<Var> {
    let c = g.clip(raw, LOG_STD_MIN, LOG_STD_MAX)?;
    if g.shape(c) == shape {
        return Ok(c);
    }
    g.broadcast(c, shape)
}

/// Per-row log density of a diagonal Gaussian: `mean`, `log_std` and `a`
/// share one `rows×d` shape; the result is `rows×1`.
pub fn gaussian_logprob(g: &mut Graph<'_>, mean: Var, log_std: Var, a: Var) -> Result<Var> {
    let diff = g.sub(a, mean)?;
    let neg_ls = g.neg(log_std);
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let quad = g.scale(z2, -0.5);
    let t = g.sub(quad, log_std)?;
    let t = g.add_const(t, -0.5 * LN_2PI);
    g.sum_cols(t)
}

/// Reparameterized draw `mean + exp(log_std)·noise`.
pub fn gaussian_sample(g: &mut Graph<'_>, mean: Var, log_std: Var, noise: Var) -> Result<Var> {
    let std = g.exp(log_std);
    let spread = g.mul(std, noise)?;
    g.add(mean, spread)
}

/// Per-row entropy `Σ_i 0.5·(1 + ln 2π) + log σ_i` of a `rows×d` log-std.
pub fn gaussian_entropy(g: &mut Graph<'_>, log_std: Var) -> Result<Var> {
    let t = g.add_const(log_std, 0.5 * (1.0 + LN_2PI));
    g.sum_cols(t)
}

/// Per-row `Σ_i log(1 − tanh²(u_i))`, written as `2·(ln 2 − u − softplus(−2u))`
/// so it stays finite for large |u|.
pub fn tanh_log_jacobian(g: &mut Graph<'_>, u: Var) -> Result<Var> {
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let s = g.add(u, sp)?;
    let s = g.scale(s, -2.0);
    let s = g.add_const(s, 2.0 * core::f64::consts::LN_2);
    g.sum_cols(s)
}

/// Plain-value log density, for rollouts that need no gradient.
pub fn gaussian_logprob_value(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) * math::exp(-ls);
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Plain-value entropy of a diagonal Gaussian.
pub fn gaussian_entropy_value(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 * (1.0 + LN_2PI) + ls).sum()
}

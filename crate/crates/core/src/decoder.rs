//! Distribution decoder: ELU self-attention over the rows of each
//! distribution matrix, an ELU feed-forward block, and the Frobenius readout.
//! Also the degree/entropy scaler applied to `ŝ`.

use rand::Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::HetGraph;
use crate::model::{names, DjeConfig, Stream};
use crate::params::ParamStore;
use crate::tensor::{self, DropoutMode, Tensor, LN_EPS};

pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub s_hat: f64,
    pub z_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingConfig {
    pub enabled: bool,
    pub mu1: f64,
    pub mu2: f64,
    pub delta: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            enabled: false,
            mu1: 0.9,
            mu2: 0.1,
            delta: DEFAULT_DELTA,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.mu1) || !unit(self.mu2) {
            return Err(Error::Config(format!(
                "mu1 = {} and mu2 = {} must lie in (0, 1)",
                self.mu1, self.mu2
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta = {} must be positive", self.delta)));
        }
        Ok(())
    }
}

/// `softmax(elu(XW_Q) elu(XW_K)ᵀ / √d) · elu(XW_V)` per block of `N` rows,
/// with the attention matrix.
pub(crate) fn dsa_var<'t>(
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    l: usize,
    stream: Stream,
    x: &Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let w = |n: &str| bound.get(&names::dec_attn(l, stream, n, cfg.dsa_per_stream));
    let q = x.matmul(&w("WQ")).elu();
    let k = x.matmul(&w("WK")).elu();
    let v = x.matmul(&w("WV")).elu();
    let attn = Var::block_matmul_nt(&q, &k, cfg.n_dist)
        .scale(1.0 / (cfg.d as f64).sqrt())
        .softmax_rows();
    (Var::block_matmul(&attn, &v, cfg.n_dist), attn)
}

pub(crate) fn stream_layer<'t, R: Rng + ?Sized>(
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    l: usize,
    stream: Stream,
    x: &Var<'t>,
    mode: DropoutMode,
    rng: &mut R,
) -> Var<'t> {
    let p = |n: &str| bound.get(&names::dec_stream(l, stream, n));
    let (a, _) = dsa_var(bound, cfg, l, stream, x);
    let a = a.dropout(cfg.dropout, mode, rng);
    let xh = x.add(&a).layer_norm(&p("ln1.gain"), &p("ln1.bias"), LN_EPS);
    let f = xh
        .matmul(&p("W1"))
        .elu()
        .matmul(&p("W2"))
        .elu()
        .dropout(cfg.dropout, mode, rng);
    xh.add(&f).layer_norm(&p("ln2.gain"), &p("ln2.bias"), LN_EPS)
}

/// Stacked `(B·N) × 2d` streams to `B × 1` columns `(ŝ, ẑ)`, before scaling.
pub(crate) fn decode_vars<'t, R: Rng + ?Sized>(
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    s: &Var<'t>,
    u: &Var<'t>,
    mode: DropoutMode,
    rng: &mut R,
) -> (Var<'t>, Var<'t>) {
    let (mut s, mut u) = (*s, *u);
    for l in 0..cfg.layers {
        s = stream_layer(bound, cfg, l, Stream::S, &s, mode, rng);
        u = stream_layer(bound, cfg, l, Stream::U, &u, mode, rng);
    }
    (
        Var::block_frobenius(&bound.get(names::WS), &s),
        Var::block_frobenius(&bound.get(names::WZ), &u),
    )
}

fn check_block(x: &Tensor, cfg: &DjeConfig) -> Result<()> {
    if x.rank() != 2 || x.rows() != cfg.n_dist || x.cols() != 2 * cfg.d {
        return Err(Error::Shape {
            op: "decode",
            detail: format!("expected {}x{}, got {:?}", cfg.n_dist, 2 * cfg.d, x.shape()),
        });
    }
    Ok(())
}

/// Self-attention output for one `N × 2d` matrix.
pub fn dsa(x: &Tensor, params: &ParamStore, cfg: &DjeConfig, l: usize, stream: Stream) -> Result<Tensor> {
    Ok((*dsa_parts(x, params, cfg, l, stream)?.0).clone())
}

/// Row-stochastic `N × N` attention matrix used by [`dsa`].
pub fn dsa_attention(
    x: &Tensor,
    params: &ParamStore,
    cfg: &DjeConfig,
    l: usize,
    stream: Stream,
) -> Result<Tensor> {
    Ok((*dsa_parts(x, params, cfg, l, stream)?.1).clone())
}

type Pair = (std::rc::Rc<Tensor>, std::rc::Rc<Tensor>);

fn dsa_parts(x: &Tensor, params: &ParamStore, cfg: &DjeConfig, l: usize, stream: Stream) -> Result<Pair> {
    check_block(x, cfg)?;
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let (out, attn) = dsa_var(&bound, cfg, l, stream, &tape.constant(x.clone()));
    Ok((out.value(), attn.value()))
}

/// One decoder layer applied to both streams.
pub fn decoder_layer<R: Rng + ?Sized>(
    s: &Tensor,
    u: &Tensor,
    params: &ParamStore,
    cfg: &DjeConfig,
    l: usize,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    check_block(s, cfg)?;
    check_block(u, cfg)?;
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let s2 = stream_layer(&bound, cfg, l, Stream::S, &tape.constant(s.clone()), mode, rng);
    let u2 = stream_layer(&bound, cfg, l, Stream::U, &tape.constant(u.clone()), mode, rng);
    Ok(((*s2.value()).clone(), (*u2.value()).clone()))
}

/// All decoder layers plus the readout, for one node.
pub fn decode<R: Rng + ?Sized>(
    s: &Tensor,
    u: &Tensor,
    params: &ParamStore,
    cfg: &DjeConfig,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<Estimate> {
    check_block(s, cfg)?;
    check_block(u, cfg)?;
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let (sh, zh) = decode_vars(
        &bound,
        cfg,
        &tape.constant(s.clone()),
        &tape.constant(u.clone()),
        mode,
        rng,
    );
    Ok(Estimate {
        s_hat: sh.item(),
        z_hat: zh.item(),
    })
}

/// `ln(#distinct file in-neighbors + δ)`.
pub fn cen(graph: &HetGraph, x: usize, delta: f64) -> f64 {
    (graph.file_in_neighbors(x).count() as f64 + delta).ln()
}

/// `ln(Σ_y KL(softmax(T_x) ‖ softmax(T_y)) + δ)` over distinct file in-neighbors.
pub fn rent(graph: &HetGraph, textual: &Tensor, x: usize, delta: f64) -> f64 {
    let softmax = |r: usize| {
        let mut v = textual.row(r).to_vec();
        tensor::softmax_in_place(&mut v);
        v
    };
    let qx = softmax(x);
    let total: f64 = graph
        .file_in_neighbors(x)
        .map(|y| {
            let qy = softmax(y);
            qx.iter()
                .zip(&qy)
                .filter(|(&a, _)| a > 0.0)
                .map(|(&a, &b)| a * (a / b).ln())
                .sum::<f64>()
        })
        .sum();
    (total.max(0.0) + delta).ln()
}

/// `μ1·CEN(x) + μ2·RENT(x)`.
pub fn scaling_factor(graph: &HetGraph, textual: &Tensor, x: usize, cfg: &ScalingConfig) -> f64 {
    cfg.mu1 * cen(graph, x, cfg.delta) + cfg.mu2 * rent(graph, textual, x, cfg.delta)
}

/// Rescales `ŝ` of node `x`; `ẑ` passes through untouched.
pub fn apply_scaling(
    est: Estimate,
    graph: &HetGraph,
    textual: &Tensor,
    x: usize,
    cfg: &ScalingConfig,
) -> Estimate {
    if !cfg.enabled {
        return est;
    }
    Estimate {
        s_hat: scaling_factor(graph, textual, x, cfg) * est.s_hat,
        z_hat: est.z_hat,
    }
}

//! Distribution encoder: typed-edge multi-head attention over in-neighbors,
//! run separately on the structural and textual channels, followed by the
//! outer-product readout into per-node mean/covariance matrices.

use std::rc::Rc;

use rand::{Rng, SeedableRng};

use crate::autodiff::{Bound, Segments, Tape, Var};
use crate::graph::{HetGraph, NodeFeatureSet};
use crate::model::{names, Channel, DjeConfig};
use crate::params::ParamStore;
use crate::tensor::{DropoutMode, Tensor, LN_EPS};

/// Rows computed by one encoder layer and the in-edges feeding them.
pub(crate) struct LayerPlan {
    /// Local index in the previous layer's rows for each output row.
    pub self_rows: Rc<Vec<usize>>,
    /// Source rows are local to the previous layer.
    pub seg: Rc<Segments>,
    pub etypes: Rc<Vec<usize>>,
    /// Global id of every output row.
    pub rows: Vec<usize>,
}

/// Receptive-field schedule: layer `l` only computes the nodes that later
/// layers (or the requested outputs) read.
pub(crate) struct EncoderPlan {
    pub input_rows: Vec<usize>,
    pub layers: Vec<LayerPlan>,
    /// Local row of the last layer for each requested node, in request order.
    pub output_rows: Rc<Vec<usize>>,
}

impl EncoderPlan {
    pub fn new(graph: &HetGraph, nodes: &[usize], layers: usize) -> Self {
        let mut top: Vec<usize> = nodes.to_vec();
        top.sort_unstable();
        top.dedup();
        let mut sets = vec![top];
        for _ in 0..layers {
            let cur = sets.last().unwrap();
            let mut prev = cur.clone();
            for &x in cur {
                prev.extend(graph.in_neighbors(x).iter().map(|n| n.node));
            }
            prev.sort_unstable();
            prev.dedup();
            sets.push(prev);
        }
        sets.reverse();
        let local = |set: &[usize], x: usize| set.binary_search(&x).expect("node in receptive set");

        let mut plans = Vec::with_capacity(layers);
        for l in 1..sets.len() {
            let (prev, rows) = (&sets[l - 1], &sets[l]);
            let mut self_rows = Vec::with_capacity(rows.len());
            let mut src = Vec::new();
            let mut etypes = Vec::new();
            let mut offsets = vec![0];
            for &x in rows {
                self_rows.push(local(prev, x));
                for nb in graph.in_neighbors(x) {
                    let y = local(prev, nb.node);
                    for &t in &nb.etypes {
                        src.push(y);
                        etypes.push(t);
                    }
                }
                offsets.push(src.len());
            }
            plans.push(LayerPlan {
                self_rows: Rc::new(self_rows),
                seg: Rc::new(Segments { src, offsets }),
                etypes: Rc::new(etypes),
                rows: rows.clone(),
            });
        }
        let last = sets.last().unwrap();
        let output_rows = nodes.iter().map(|&x| local(last, x)).collect();
        EncoderPlan {
            input_rows: sets.swap_remove(0),
            layers: plans,
            output_rows: Rc::new(output_rows),
        }
    }
}

pub(crate) struct HeadTrace<'t> {
    pub scores: Var<'t>,
    pub weights: Var<'t>,
    pub sha: Var<'t>,
}

pub(crate) struct LayerOut<'t> {
    pub h: Var<'t>,
    pub heads: Vec<HeadTrace<'t>>,
}

fn head_forward<'t>(
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    hd: usize,
    h_prev: &Var<'t>,
    h_tgt: &Var<'t>,
    plan: &LayerPlan,
) -> HeadTrace<'t> {
    let wq = bound.get(&names::enc_head(ch, l, hd, "WQ"));
    let wk = bound.get(&names::enc_head(ch, l, hd, "WK"));
    let wv = bound.get(&names::enc_head(ch, l, hd, "WV"));
    let we = bound.get(&names::enc_head(ch, l, hd, "WE"));
    let table = bound.get(&names::enc_edge_table(ch));

    let q = h_tgt.matmul_t(false, &wq, true);
    let k = h_prev.matmul_t(false, &wk, true);
    let v = h_prev.matmul_t(false, &wv, true);
    // one scalar W_E·E_e per edge type, then looked up per edge
    let type_w = table.matmul_t(false, &we, true);
    let edge_w = type_w.gather_rows(Rc::clone(&plan.etypes));
    let scores = Var::edge_dot(&q, &k, Rc::clone(&plan.seg))
        .scale(1.0 / (cfg.d as f64).sqrt())
        .mul(&edge_w);
    let weights = scores.segment_softmax(Rc::clone(&plan.seg));
    let sha = Var::segment_weighted_sum(&weights, &v, Rc::clone(&plan.seg));
    HeadTrace {
        scores,
        weights,
        sha,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_forward<'t, R: Rng + ?Sized>(
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    h_prev: &Var<'t>,
    plan: &LayerPlan,
    mode: DropoutMode,
    rng: &mut R,
) -> LayerOut<'t> {
    let h_tgt = h_prev.gather_rows(Rc::clone(&plan.self_rows));
    let heads: Vec<HeadTrace<'t>> = (0..cfg.heads)
        .map(|hd| head_forward(bound, cfg, ch, l, hd, h_prev, &h_tgt, plan))
        .collect();
    let cat = if heads.len() == 1 {
        heads[0].sha
    } else {
        Var::concat_cols(&heads.iter().map(|t| t.sha).collect::<Vec<_>>())
    };
    let p = |s: &str| bound.get(&names::enc_layer(ch, l, s));
    let mha = cat
        .matmul_t(false, &p("W"), true)
        .dropout(cfg.dropout, mode, rng);
    let hhat = h_tgt.add(&mha).layer_norm(&p("ln1.gain"), &p("ln1.bias"), LN_EPS);
    let ffn = hhat
        .matmul(&p("ffn.W1"))
        .add_row(&p("ffn.b1"))
        .relu()
        .matmul(&p("ffn.W2"))
        .add_row(&p("ffn.b2"))
        .dropout(cfg.dropout, mode, rng);
    let h = hhat.add(&ffn).layer_norm(&p("ln2.gain"), &p("ln2.bias"), LN_EPS);
    LayerOut { h, heads }
}

/// Encoded channel rows for the requested nodes (request order), `B × d`.
pub(crate) fn channel_forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    plan: &EncoderPlan,
    feats: &Tensor,
    ch: Channel,
    mode: DropoutMode,
    rng: &mut R,
) -> Var<'t> {
    let d = feats.cols();
    let mut init = Vec::with_capacity(plan.input_rows.len() * d);
    for &x in &plan.input_rows {
        init.extend_from_slice(feats.row(x));
    }
    let mut h = tape.constant(Tensor::matrix(plan.input_rows.len(), d, init));
    for (l, lp) in plan.layers.iter().enumerate() {
        h = layer_forward(bound, cfg, ch, l, &h, lp, mode, rng).h;
    }
    h.gather_rows(Rc::clone(&plan.output_rows))
}

/// `(S, U)` stacked as `(B·N) × 2d`; block `b` belongs to `nodes[b]`.
pub(crate) fn encode_vars<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    graph: &HetGraph,
    features: &NodeFeatureSet,
    nodes: &[usize],
    mode: DropoutMode,
    rng: &mut R,
) -> (Var<'t>, Var<'t>) {
    let plan = EncoderPlan::new(graph, nodes, cfg.layers);
    let g = channel_forward(tape, bound, cfg, &plan, &features.structural, Channel::Struct, mode, rng);
    let t = channel_forward(tape, bound, cfg, &plan, &features.textual, Channel::Text, mode, rng);
    let h = Var::concat_cols(&[g, t]);
    let s = Var::outer_repeat(&bound.get(names::ALPHA_S), &h);
    let u = Var::outer_repeat(&bound.get(names::ALPHA_U), &h);
    (s, u)
}

/// Unnormalized score of one `src → dst` edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeScore {
    pub dst: usize,
    pub src: usize,
    pub etype: usize,
    pub score: f64,
}

/// Full-graph layer run that keeps per-head intermediates.
pub struct LayerInspection {
    pub output: Tensor,
    /// `[head][edge]` scores in plan order (grouped by destination node).
    pub scores: Vec<Vec<EdgeScore>>,
    /// `[head][edge]` per-edge normalized weights, aligned with `scores`.
    pub edge_weights: Vec<Vec<f64>>,
    /// `[head]` single-head outputs, `n × d_h`.
    pub sha: Vec<Tensor>,
}

/// Runs encoder layer `l` of channel `ch` on `h` (one row per node) over the
/// whole graph.
pub fn inspect_layer<R: Rng + ?Sized>(
    h: &Tensor,
    graph: &HetGraph,
    params: &ParamStore,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    mode: DropoutMode,
    rng: &mut R,
) -> LayerInspection {
    let all: Vec<usize> = (0..graph.node_count()).collect();
    let plan = EncoderPlan::new(graph, &all, 1);
    let lp = &plan.layers[0];
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let hv = tape.constant(h.clone());
    let out = layer_forward(&bound, cfg, ch, l, &hv, lp, mode, rng);
    let mut edges = Vec::with_capacity(lp.seg.edge_count());
    for (r, &x) in lp.rows.iter().enumerate() {
        for e in lp.seg.range(r) {
            edges.push((x, plan.input_rows[lp.seg.src[e]], lp.etypes[e]));
        }
    }
    let scores = out
        .heads
        .iter()
        .map(|t| {
            edges
                .iter()
                .zip(t.scores.value().data())
                .map(|(&(dst, src, etype), &score)| EdgeScore {
                    dst,
                    src,
                    etype,
                    score,
                })
                .collect()
        })
        .collect();
    LayerInspection {
        output: (*out.h.value()).clone(),
        scores,
        edge_weights: out.heads.iter().map(|t| t.weights.value().data().to_vec()).collect(),
        sha: out.heads.iter().map(|t| (*t.sha.value()).clone()).collect(),
    }
}

/// Scores of every in-edge (self edges included) for layer `l`, head `head`.
pub fn edge_scores(
    h: &Tensor,
    graph: &HetGraph,
    params: &ParamStore,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    head: usize,
) -> Vec<EdgeScore> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut ins = inspect_layer(h, graph, params, cfg, ch, l, DropoutMode::Off, &mut rng);
    ins.scores.swap_remove(head)
}

/// Per-neighbor attention `α_{y→x}` from the scores of all in-edges of one
/// node: parallel edges from the same neighbor add up.
pub fn attention_weights(scores: &[EdgeScore]) -> Vec<(usize, f64)> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s.score - max).exp()).sum();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for s in scores {
        let w = (s.score - max).exp() / total;
        match out.iter_mut().find(|(y, _)| *y == s.src) {
            Some((_, a)) => *a += w,
            None => out.push((s.src, w)),
        }
    }
    out.sort_by_key(|(y, _)| *y);
    out
}

/// Single-head attention output for every node, `n × d_h`.
pub fn sha(
    h: &Tensor,
    graph: &HetGraph,
    params: &ParamStore,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    head: usize,
) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut ins = inspect_layer(h, graph, params, cfg, ch, l, DropoutMode::Off, &mut rng);
    ins.sha.swap_remove(head)
}

/// One full encoder layer over the whole graph.
#[allow(clippy::too_many_arguments)]
pub fn mha_layer<R: Rng + ?Sized>(
    h: &Tensor,
    graph: &HetGraph,
    params: &ParamStore,
    cfg: &DjeConfig,
    ch: Channel,
    l: usize,
    mode: DropoutMode,
    rng: &mut R,
) -> Tensor {
    inspect_layer(h, graph, params, cfg, ch, l, mode, rng).output
}

/// Mean and covariance representations of one node, each `N × 2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionRepr {
    pub s: Tensor,
    pub u: Tensor,
}

/// Encodes every node of the graph.
pub fn encode<R: Rng + ?Sized>(
    graph: &HetGraph,
    features: &NodeFeatureSet,
    params: &ParamStore,
    cfg: &DjeConfig,
    mode: DropoutMode,
    rng: &mut R,
) -> crate::Result<Vec<DistributionRepr>> {
    cfg.check_features(features)?;
    let nodes: Vec<usize> = (0..graph.node_count()).collect();
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let (s, u) = encode_vars(&tape, &bound, cfg, graph, features, &nodes, mode, rng);
    let (s, u) = (s.value(), u.value());
    let n = cfg.n_dist;
    let w = s.cols();
    Ok((0..nodes.len())
        .map(|b| DistributionRepr {
            s: Tensor::matrix(n, w, s.data()[b * n * w..(b + 1) * n * w].to_vec()),
            u: Tensor::matrix(n, w, u.data()[b * n * w..(b + 1) * n * w].to_vec()),
        })
        .collect())
}

//! Taped reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::grad`] on a scalar result walks the record backwards and returns
//! exact gradients for every registered parameter. Tape operations panic on
//! shape mismatches: shapes are fixed by the model definition, so a mismatch
//! is a programming error rather than a recoverable condition.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, gemm, DropoutMode, Tensor};

/// Edges grouped by destination row. Edge `e` with
/// `offsets[r] <= e < offsets[r + 1]` points from source row `src[e]` into
/// destination row `r`.
#[derive(Clone, Debug, Default)]
pub struct Segments {
    pub src: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl Segments {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    MulConst { a: usize, c: Rc<Tensor> },
    Relu(usize),
    Elu(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    Reshape(usize),
    Sum(usize),
    OuterRepeat { alpha: usize, h: usize },
    BlockFrobenius { w: usize, s: usize },
    BlockMatMulNT { a: usize, b: usize, block: usize },
    BlockMatMul { p: usize, v: usize, block: usize },
    EdgeDot { q: usize, k: usize, seg: Rc<Segments> },
    SegmentSoftmax { a: usize, seg: Rc<Segments> },
    SegmentWeightedSum { w: usize, v: usize, seg: Rc<Segments> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Exp(_) => "exp",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::OuterRepeat { .. } => "outer_repeat",
            Op::BlockFrobenius { .. } => "block_frobenius",
            Op::BlockMatMulNT { .. } => "block_matmul_nt",
            Op::BlockMatMul { .. } => "block_matmul",
            Op::EdgeDot { .. } => "edge_dot",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Loss value plus one gradient per registered parameter.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Parameters of a [`ParamStore`] bound as leaves of a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// The parameters whose names start with `prefix`, with the prefix removed.
    pub fn scoped(&self, prefix: &str) -> Bound<'t> {
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
            .collect();
        Bound { vars }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient is reported under `name`.
    pub fn param(&self, name: &str, t: Tensor) -> Var<'_> {
        let v = self.push(t, Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Registers every tensor of `store`, optionally prefixing names.
    pub fn bind(&self, store: &ParamStore, prefix: &str) -> Bound<'_> {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let full = format!("{prefix}{name}");
                let v = self.param(&full, t.clone());
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn grad(&self, loss: Var<'_>) -> Result<GradResult> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "grad",
                format!("loss must be scalar, got shape {:?}", out.shape()),
            ));
        }
        let loss_value = out.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::filled(out.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient during backward through {}",
                    node.op.name()
                )));
            }
            backward_node(&nodes, node, &g, &mut grads);
        }

        let mut result = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let g = match grads.get_mut(*id).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(nodes[*id].value.shape()),
            };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            result.insert(name.clone(), g);
        }
        Ok(GradResult {
            loss: loss_value,
            grads: result,
        })
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn with_shape(t: Tensor, shape: &[usize]) -> Tensor {
    t.reshaped(shape).expect("gradient shape")
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let ga = if !*ta {
                gemm(g, false, bv, !*tb)
            } else {
                gemm(bv, *tb, g, true)
            };
            let gb = if !*tb {
                gemm(av, !*ta, g, false)
            } else {
                gemm(g, true, av, *ta)
            };
            acc(grads, *a, with_shape(ga, av.shape()));
            acc(grads, *b, with_shape(gb, bv.shape()));
        }
        Op::Add(a, b) => {
            acc(grads, *a, with_shape(g.clone(), val(*a).shape()));
            acc(grads, *b, with_shape(g.clone(), val(*b).shape()));
        }
        Op::Sub(a, b) => {
            acc(grads, *a, with_shape(g.clone(), val(*a).shape()));
            acc(grads, *b, with_shape(g.map(|x| -x), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, *a, with_shape(zip_map(g, bv, |x, y| x * y), av.shape()));
            acc(grads, *b, with_shape(zip_map(g, av, |x, y| x * y), bv.shape()));
        }
        Op::AddRow { a, row } => {
            let rv = val(*row);
            let c = rv.len();
            let mut gr = vec![0.0; c];
            for r in g.data().chunks(c) {
                for (s, x) in gr.iter_mut().zip(r) {
                    *s += x;
                }
            }
            acc(grads, *a, g.clone());
            acc(grads, *row, Tensor::new(rv.shape().to_vec(), gr).unwrap());
        }
        Op::Scale { a, c } => acc(grads, *a, g.map(|x| x * c)),
        Op::MulConst { a, c } => acc(grads, *a, zip_map(g, c, |x, y| x * y)),
        Op::Relu(a) => acc(
            grads,
            *a,
            zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
        ),
        Op::Elu(a) => {
            let av = val(*a);
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .zip(out.data())
                .map(|((&gx, &x), &y)| if x > 0.0 { gx } else { gx * (y + 1.0) })
                .collect();
            acc(grads, *a, Tensor::new(av.shape().to_vec(), data).unwrap());
        }
        Op::Exp(a) => acc(grads, *a, zip_map(g, out, |x, y| x * y)),
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; out.len()];
            for ((gr, yr), dr) in g
                .data()
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(ga.chunks_mut(c))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for ((d, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (x - dot);
                }
            }
            acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
        }
        Op::LogSoftmaxRows(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; out.len()];
            for ((gr, yr), dr) in g
                .data()
                .chunks(c)
                .zip(out.data().chunks(c))
                .zip(ga.chunks_mut(c))
            {
                let total: f64 = gr.iter().sum();
                for ((d, x), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = x - y.exp() * total;
                }
            }
            acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let c = gv.len();
            let n = c as f64;
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            let mut dx = vec![0.0; xhat.len()];
            let mut dxhat = vec![0.0; c];
            for (r, (gr, hr)) in g.data().chunks(c).zip(xhat.data().chunks(c)).enumerate() {
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..c {
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                    dxhat[j] = gr[j] * gv.data()[j];
                    sum_d += dxhat[j];
                    sum_dh += dxhat[j] * hr[j];
                }
                let k = inv_std[r] / n;
                let row = &mut dx[r * c..(r + 1) * c];
                for j in 0..c {
                    row[j] = k * (n * dxhat[j] - sum_d - hr[j] * sum_dh);
                }
            }
            acc(grads, *x, Tensor::new(xhat.shape().to_vec(), dx).unwrap());
            acc(grads, *gain, Tensor::new(gv.shape().to_vec(), dgain).unwrap());
            acc(
                grads,
                *bias,
                Tensor::new(val(*bias).shape().to_vec(), dbias).unwrap(),
            );
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut start = 0;
            for &p in parts {
                let pv = val(p);
                let w = pv.cols();
                let mut data = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                }
                acc(grads, p, Tensor::new(pv.shape().to_vec(), data).unwrap());
                start += w;
            }
        }
        Op::GatherRows { a, idx } => {
            let av = val(*a);
            let c = av.cols();
            let mut ga = Tensor::zeros(av.shape());
            let gd = ga.data_mut();
            for (r, &src) in idx.iter().enumerate() {
                let row = &g.data()[r * c..(r + 1) * c];
                for (d, x) in gd[src * c..(src + 1) * c].iter_mut().zip(row) {
                    *d += x;
                }
            }
            acc(grads, *a, ga);
        }
        Op::Reshape(a) => acc(grads, *a, with_shape(g.clone(), val(*a).shape())),
        Op::Sum(a) => {
            let av = val(*a);
            acc(grads, *a, Tensor::filled(av.shape(), g.item()));
        }
        Op::OuterRepeat { alpha, h } => {
            let (al, hv) = (val(*alpha), val(*h));
            let n = al.len();
            let m = hv.cols();
            let mut dal = vec![0.0; n];
            let mut dh = vec![0.0; hv.len()];
            for b in 0..hv.rows() {
                let hb = hv.row(b);
                let dhb = &mut dh[b * m..(b + 1) * m];
                for i in 0..n {
                    let gr = &g.data()[(b * n + i) * m..(b * n + i + 1) * m];
                    let a = al.data()[i];
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += gr[j] * hb[j];
                        dhb[j] += a * gr[j];
                    }
                    dal[i] += dot;
                }
            }
            acc(grads, *alpha, Tensor::new(al.shape().to_vec(), dal).unwrap());
            acc(grads, *h, Tensor::new(hv.shape().to_vec(), dh).unwrap());
        }
        Op::BlockFrobenius { w, s } => {
            let (wv, sv) = (val(*w), val(*s));
            let bl = wv.len();
            let mut dw = vec![0.0; bl];
            let mut ds = vec![0.0; sv.len()];
            for (b, &gb) in g.data().iter().enumerate() {
                let sb = &sv.data()[b * bl..(b + 1) * bl];
                let dsb = &mut ds[b * bl..(b + 1) * bl];
                for j in 0..bl {
                    dw[j] += gb * sb[j];
                    dsb[j] = gb * wv.data()[j];
                }
            }
            acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            acc(grads, *s, Tensor::new(sv.shape().to_vec(), ds).unwrap());
        }
        Op::BlockMatMulNT { a, b, block } => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k) = (*block, av.cols());
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for blk in 0..av.rows() / n {
                for i in 0..n {
                    let ri = blk * n + i;
                    for j in 0..n {
                        let rj = blk * n + j;
                        let gij = g.data()[ri * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            da[ri * k + t] += gij * bv.data()[rj * k + t];
                            db[rj * k + t] += gij * av.data()[ri * k + t];
                        }
                    }
                }
            }
            acc(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::BlockMatMul { p, v, block } => {
            let (pv, vv) = (val(*p), val(*v));
            let (n, k) = (*block, vv.cols());
            let mut dp = vec![0.0; pv.len()];
            let mut dv = vec![0.0; vv.len()];
            for blk in 0..pv.rows() / n {
                for i in 0..n {
                    let ri = blk * n + i;
                    let gr = &g.data()[ri * k..(ri + 1) * k];
                    for j in 0..n {
                        let rj = blk * n + j;
                        let pij = pv.data()[ri * n + j];
                        let vr = &vv.data()[rj * k..(rj + 1) * k];
                        let mut dot = 0.0;
                        for t in 0..k {
                            dot += gr[t] * vr[t];
                            dv[rj * k + t] += pij * gr[t];
                        }
                        dp[ri * n + j] += dot;
                    }
                }
            }
            acc(grads, *p, Tensor::new(pv.shape().to_vec(), dp).unwrap());
            acc(grads, *v, Tensor::new(vv.shape().to_vec(), dv).unwrap());
        }
        Op::EdgeDot { q, k, seg } => {
            let (qv, kv) = (val(*q), val(*k));
            let c = qv.cols();
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; kv.len()];
            for r in 0..seg.rows() {
                for e in seg.range(r) {
                    let ge = g.data()[e];
                    let s = seg.src[e];
                    for t in 0..c {
                        dq[r * c + t] += ge * kv.data()[s * c + t];
                        dk[s * c + t] += ge * qv.data()[r * c + t];
                    }
                }
            }
            acc(grads, *q, Tensor::new(qv.shape().to_vec(), dq).unwrap());
            acc(grads, *k, Tensor::new(kv.shape().to_vec(), dk).unwrap());
        }
        Op::SegmentSoftmax { a, seg } => {
            let mut ga = vec![0.0; out.len()];
            for r in 0..seg.rows() {
                let range = seg.range(r);
                let dot: f64 = range.clone().map(|e| g.data()[e] * out.data()[e]).sum();
                for e in range {
                    ga[e] = out.data()[e] * (g.data()[e] - dot);
                }
            }
            acc(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
        }
        Op::SegmentWeightedSum { w, v, seg } => {
            let (wv, vv) = (val(*w), val(*v));
            let c = vv.cols();
            let mut dw = vec![0.0; wv.len()];
            let mut dv = vec![0.0; vv.len()];
            for r in 0..seg.rows() {
                let gr = &g.data()[r * c..(r + 1) * c];
                for e in seg.range(r) {
                    let s = seg.src[e];
                    let we = wv.data()[e];
                    let mut dot = 0.0;
                    for t in 0..c {
                        dot += gr[t] * vv.data()[s * c + t];
                        dv[s * c + t] += we * gr[t];
                    }
                    dw[e] = dot;
                }
            }
            acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            acc(grads, *v, Tensor::new(vv.shape().to_vec(), dv).unwrap());
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, ta: bool, other: &Var<'t>, tb: bool) -> Var<'t> {
        self.same_tape(other);
        let v = tensor::matmul_t(&self.value(), ta, &other.value(), tb)
            .unwrap_or_else(|e| panic!("{e}"));
        self.tape.push(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    fn elementwise(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.len(),
            b.len(),
            "{}: {:?} vs {:?}",
            op.name(),
            a.shape(),
            b.shape()
        );
        self.tape.push(zip_map(&a, &b, f), op)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.elementwise(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.elementwise(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.elementwise(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self)
    }

    /// Adds a length-`cols` row vector to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Var<'t> {
        self.same_tape(row);
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        assert_eq!(r.len(), c, "add_row width");
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.tape.push(
            out,
            Op::AddRow {
                a: self.id,
                row: row.id,
            },
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::Scale { a: self.id, c })
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&self, c: Tensor) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), c.len(), "mul_const length");
        let v = zip_map(&a, &c, |x, y| x * y);
        self.tape.push(
            v,
            Op::MulConst {
                a: self.id,
                c: Rc::new(c),
            },
        )
    }

    pub fn relu(&self) -> Var<'t> {
        let v = tensor::relu(&self.value());
        self.tape.push(v, Op::Relu(self.id))
    }

    pub fn elu(&self) -> Var<'t> {
        let v = tensor::elu(&self.value());
        self.tape.push(v, Op::Elu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let v = tensor::softmax_rows(&self.value());
        self.tape.push(v, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let v = tensor::log_softmax_rows(&self.value());
        self.tape.push(v, Op::LogSoftmaxRows(self.id))
    }

    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let c = x.cols();
        assert!(
            gv.len() == c && bv.len() == c,
            "layer_norm gain/bias width"
        );
        let (xhat, inv_std) = tensor::layer_norm_parts(&x, eps);
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * g + b;
            }
        }
        self.tape.push(
            y,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat_cols_many(&refs).unwrap_or_else(|e| panic!("{e}"));
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            data.extend_from_slice(a.row(r));
        }
        self.tape.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows { a: self.id, idx },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshaped(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n.max(1) as f64)
    }

    /// Inverted dropout. `Off` mode and a zero ratio record nothing.
    pub fn dropout<R: Rng + ?Sized>(&self, ratio: f64, mode: DropoutMode, rng: &mut R) -> Var<'t> {
        let n = self.value().len();
        match tensor::dropout_mask(n, ratio, mode, rng) {
            None => *self,
            Some(mask) => {
                let shape = self.shape();
                self.mul_const(Tensor::new(shape, mask).expect("mask length"))
            }
        }
    }

    /// Row `b·N + i` of the result is `alpha[i] · h[b]`: a stacked outer
    /// product for every row of `h`.
    pub fn outer_repeat(alpha: &Var<'t>, h: &Var<'t>) -> Var<'t> {
        alpha.same_tape(h);
        let (al, hv) = (alpha.value(), h.value());
        let (n, m) = (al.len(), hv.cols());
        let mut data = Vec::with_capacity(hv.rows() * n * m);
        for b in 0..hv.rows() {
            let hb = hv.row(b);
            for &a in al.data() {
                data.extend(hb.iter().map(|x| a * x));
            }
        }
        alpha.tape.push(
            Tensor::matrix(hv.rows() * n, m, data),
            Op::OuterRepeat {
                alpha: alpha.id,
                h: h.id,
            },
        )
    }

    /// `out[b] = <w, s_b>_F` where `s_b` is the `b`-th block of `w.rows()` rows.
    pub fn block_frobenius(w: &Var<'t>, s: &Var<'t>) -> Var<'t> {
        w.same_tape(s);
        let (wv, sv) = (w.value(), s.value());
        let bl = wv.len();
        assert_eq!(wv.cols(), sv.cols(), "block_frobenius width");
        assert_eq!(sv.len() % bl, 0, "block_frobenius rows");
        let out: Vec<f64> = sv
            .data()
            .chunks(bl)
            .map(|sb| sb.iter().zip(wv.data()).map(|(x, y)| x * y).sum())
            .collect();
        w.tape.push(
            Tensor::column(out),
            Op::BlockFrobenius { w: w.id, s: s.id },
        )
    }

    /// Per block of `block` rows: `a_b · b_bᵀ`, stacked to `(B·block) × block`.
    pub fn block_matmul_nt(a: &Var<'t>, b: &Var<'t>, block: usize) -> Var<'t> {
        a.same_tape(b);
        let (av, bv) = (a.value(), b.value());
        assert_eq!(av.shape(), bv.shape(), "block_matmul_nt shapes");
        assert_eq!(av.rows() % block, 0, "block_matmul_nt rows");
        let k = av.cols();
        let mut out = vec![0.0; av.rows() * block];
        for blk in 0..av.rows() / block {
            for i in 0..block {
                let ri = blk * block + i;
                let ar = &av.data()[ri * k..(ri + 1) * k];
                for j in 0..block {
                    let rj = blk * block + j;
                    let br = &bv.data()[rj * k..(rj + 1) * k];
                    out[ri * block + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
        }
        a.tape.push(
            Tensor::matrix(av.rows(), block, out),
            Op::BlockMatMulNT {
                a: a.id,
                b: b.id,
                block,
            },
        )
    }

    /// Per block: `p_b (block×block) · v_b (block×k)`.
    pub fn block_matmul(p: &Var<'t>, v: &Var<'t>, block: usize) -> Var<'t> {
        p.same_tape(v);
        let (pv, vv) = (p.value(), v.value());
        assert_eq!(pv.cols(), block, "block_matmul p width");
        assert_eq!(pv.rows(), vv.rows(), "block_matmul rows");
        let k = vv.cols();
        let mut out = vec![0.0; vv.len()];
        for blk in 0..pv.rows() / block {
            for i in 0..block {
                let ri = blk * block + i;
                let orow = &mut out[ri * k..(ri + 1) * k];
                for j in 0..block {
                    let rj = blk * block + j;
                    let pij = pv.data()[ri * block + j];
                    for (o, x) in orow.iter_mut().zip(&vv.data()[rj * k..(rj + 1) * k]) {
                        *o += pij * x;
                    }
                }
            }
        }
        p.tape.push(
            Tensor::matrix(vv.rows(), k, out),
            Op::BlockMatMul {
                p: p.id,
                v: v.id,
                block,
            },
        )
    }

    /// One entry per edge: `q[dst] · k[src]`, as an `E × 1` column.
    pub fn edge_dot(q: &Var<'t>, k: &Var<'t>, seg: Rc<Segments>) -> Var<'t> {
        q.same_tape(k);
        let (qv, kv) = (q.value(), k.value());
        assert_eq!(qv.cols(), kv.cols(), "edge_dot width");
        assert_eq!(qv.rows(), seg.rows(), "edge_dot rows");
        let mut out = vec![0.0; seg.edge_count()];
        for r in 0..seg.rows() {
            let qr = qv.row(r);
            for e in seg.range(r) {
                out[e] = qr.iter().zip(kv.row(seg.src[e])).map(|(x, y)| x * y).sum();
            }
        }
        q.tape.push(
            Tensor::column(out),
            Op::EdgeDot {
                q: q.id,
                k: k.id,
                seg,
            },
        )
    }

    /// Softmax of an `E × 1` column within each destination segment.
    pub fn segment_softmax(&self, seg: Rc<Segments>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), seg.edge_count(), "segment_softmax length");
        let mut out = a.data().to_vec();
        for r in 0..seg.rows() {
            let range = seg.range(r);
            if !range.is_empty() {
                tensor::softmax_in_place(&mut out[range]);
            }
        }
        self.tape.push(
            Tensor::column(out),
            Op::SegmentSoftmax { a: self.id, seg },
        )
    }

    /// `out[r] = Σ_{e in segment r} w[e] · v[src[e]]`.
    pub fn segment_weighted_sum(w: &Var<'t>, v: &Var<'t>, seg: Rc<Segments>) -> Var<'t> {
        w.same_tape(v);
        let (wv, vv) = (w.value(), v.value());
        assert_eq!(wv.len(), seg.edge_count(), "segment_weighted_sum weights");
        let c = vv.cols();
        let mut out = vec![0.0; seg.rows() * c];
        for r in 0..seg.rows() {
            let orow = &mut out[r * c..(r + 1) * c];
            for e in seg.range(r) {
                let we = wv.data()[e];
                for (o, x) in orow.iter_mut().zip(vv.row(seg.src[e])) {
                    *o += we * x;
                }
            }
        }
        w.tape.push(
            Tensor::matrix(seg.rows(), c, out),
            Op::SegmentWeightedSum {
                w: w.id,
                v: v.id,
                seg,
            },
        )
    }
}

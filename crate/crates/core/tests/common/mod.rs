#![allow(dead_code)]

//! Independent reference implementations used as test oracles.

use easing_core::graph::{Edge, HetGraph};
use easing_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn mv(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Seeded random multigraph with `n` nodes; may contain parallel typed edges.
pub fn random_graph(n: usize, m: usize, types: usize, seed: u64) -> HetGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    while edges.len() < m {
        let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
        if src != dst {
            edges.push(Edge {
                src,
                dst,
                etype: rng.random_range(0..types),
            });
        }
    }
    HetGraph::new(n, (0..types).map(|t| format!("t{t}")).collect(), edges).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Mat, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Stationary vector of the damped walk with teleport `restart`, solved
/// directly from the dense transition matrix (dangling columns uniform).
pub fn dense_pagerank(g: &HetGraph, damping: f64, restart: &[f64]) -> Vec<f64> {
    let n = g.node_count();
    let mut out = vec![0usize; n];
    for e in g.file_edges() {
        out[e.src] += 1;
    }
    let mut m = vec![vec![0.0; n]; n];
    for e in g.file_edges() {
        m[e.dst][e.src] += 1.0 / out[e.src] as f64;
    }
    for (j, &o) in out.iter().enumerate() {
        if o == 0 {
            for row in m.iter_mut() {
                row[j] = 1.0 / n as f64;
            }
        }
    }
    let a: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 1.0 } else { 0.0 } - damping * m[i][j])
                .collect()
        })
        .collect();
    solve(a, restart.iter().map(|r| (1.0 - damping) * r).collect())
}

pub fn oracle_regression(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let (mut lo, mut hi) = (t[0], t[0]);
    for i in 0..p.len() {
        abs += (p[i] - t[i]).abs();
        sq += (p[i] - t[i]).powi(2);
        lo = lo.min(t[i]);
        hi = hi.max(t[i]);
    }
    let n = p.len() as f64;
    let rmse = (sq / n).sqrt();
    (abs / n, rmse, rmse / (hi - lo))
}

/// Rank = 1 + #smaller + (#equal − 1) / 2, counted pairwise.
pub fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(p: &[f64], t: &[f64]) -> f64 {
    let (a, b) = (oracle_ranks(p), oracle_ranks(t));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = (0..a.len()).map(|i| (a[i] - ma) * (b[i] - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Top-k by repeated selection of the maximum (lowest index on ties).
pub fn oracle_top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; v.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if !taken[i] && best.is_none_or(|b| v[i] > v[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn oracle_precision(p: &[f64], t: &[f64], k: usize) -> f64 {
    let tp = oracle_top_k(t, k);
    oracle_top_k(p, k).iter().filter(|i| tp.contains(i)).count() as f64 / k as f64
}

pub fn oracle_ndcg(p: &[f64], t: &[f64], k: usize) -> f64 {
    let dcg = |order: Vec<usize>| -> f64 {
        let mut s = 0.0;
        for (pos, i) in order.into_iter().enumerate() {
            s += t[i] / (pos as f64 + 2.0).log2();
        }
        s
    };
    let ideal = dcg(oracle_top_k(t, k));
    if ideal == 0.0 {
        0.0
    } else {
        dcg(oracle_top_k(p, k)) / ideal
    }
}

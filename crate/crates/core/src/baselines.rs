//! PageRank and personalized PageRank over the file edges of a [`HetGraph`].
//!
//! Reserved self edges are not part of the walk. Parallel edges count with
//! their multiplicity in the out-degree. Mass sitting on nodes without
//! out-edges is spread uniformly over all nodes.

use crate::error::{Error, Result};
use crate::graph::HetGraph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PageRankConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig {
            damping: 0.85,
            tol: 1e-12,
            max_iter: 1000,
        }
    }
}

pub fn pagerank(graph: &HetGraph, cfg: PageRankConfig) -> Result<Vec<f64>> {
    let n = graph.node_count();
    if n == 0 {
        return Ok(Vec::new());
    }
    personalized_pagerank(graph, cfg, &vec![1.0 / n as f64; n])
}

pub fn personalized_pagerank(graph: &HetGraph, cfg: PageRankConfig, restart: &[f64]) -> Result<Vec<f64>> {
    let n = graph.node_count();
    if !(cfg.damping > 0.0 && cfg.damping < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "damping {} outside (0, 1)",
            cfg.damping
        )));
    }
    if restart.len() != n {
        return Err(Error::InvalidArgument(format!(
            "restart has {} entries for {n} nodes",
            restart.len()
        )));
    }
    if restart.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(
            "restart entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = restart.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "restart distribution sums to {total}, expected 1"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let out_deg = graph.file_out_degrees();
    let edges = graph.file_edges();
    let d = cfg.damping;
    let uniform = 1.0 / n as f64;
    let mut x = restart.to_vec();
    let mut next = vec![0.0; n];
    let mut delta = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let dangling: f64 = x
            .iter()
            .zip(&out_deg)
            .filter(|(_, &deg)| deg == 0)
            .map(|(v, _)| v)
            .sum();
        for (v, r) in next.iter_mut().zip(restart) {
            *v = (1.0 - d) * r + d * dangling * uniform;
        }
        for e in edges {
            next[e.dst] += d * x[e.src] / out_deg[e.src] as f64;
        }
        delta = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if delta < cfg.tol {
            return Ok(x);
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        delta,
    })
}

/// Restart distribution proportional to known importance values. Values are
/// shifted so the smallest is zero when any is negative; an all-zero vector
/// falls back to uniform over the given nodes.
pub fn restart_from_values(node_count: usize, values: &[(usize, f64)]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values for restart distribution".into()));
    }
    let min = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let mut r = vec![0.0; node_count];
    for &(id, v) in values {
        if id >= node_count {
            return Err(Error::InvalidArgument(format!("node {id} out of range")));
        }
        r[id] += v + shift;
    }
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        for &(id, _) in values {
            r[id] = 1.0;
        }
    }
    let total: f64 = r.iter().sum();
    for v in &mut r {
        *v /= total;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_cycle_is_uniform() {
        let g = HetGraph::from_named_edges(3, &[(0, 1, "a"), (1, 2, "a"), (2, 0, "b")]).unwrap();
        let pr = pagerank(&g, PageRankConfig::default()).unwrap();
        for v in pr {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_restart_reduces_to_pagerank() {
        let g = HetGraph::from_named_edges(4, &[(0, 1, "a"), (1, 2, "a"), (3, 1, "b")]).unwrap();
        let pr = pagerank(&g, PageRankConfig::default()).unwrap();
        let ppr = personalized_pagerank(&g, PageRankConfig::default(), &[0.25; 4]).unwrap();
        assert_eq!(pr, ppr);
    }

    #[test]
    fn invalid_inputs() {
        let g = HetGraph::from_named_edges(2, &[(0, 1, "a")]).unwrap();
        let cfg = PageRankConfig::default();
        assert!(personalized_pagerank(&g, cfg, &[0.5, 0.6]).is_err());
        assert!(personalized_pagerank(&g, cfg, &[1.5, -0.5]).is_err());
        assert!(personalized_pagerank(&g, cfg, &[1.0]).is_err());
        let bad = PageRankConfig { damping: 1.0, ..cfg };
        assert!(pagerank(&g, bad).is_err());
        let tight = PageRankConfig { max_iter: 1, tol: 0.0, ..cfg };
        assert!(matches!(pagerank(&g, tight), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn restart_normalization() {
        let r = restart_from_values(4, &[(0, 1.0), (2, 3.0)]).unwrap();
        assert_eq!(r, vec![0.25, 0.0, 0.75, 0.0]);
        let r = restart_from_values(3, &[(0, -1.0), (1, 1.0)]).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
        let r = restart_from_values(3, &[(0, 0.0), (1, 0.0)]).unwrap();
        assert_eq!(r, vec![0.5, 0.5, 0.0]);
    }
}

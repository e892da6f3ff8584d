//! Seeded synthetic heterogeneous graphs with planted importance values.
//!
//! Destinations are drawn in proportion to a log-normal popularity, so
//! in-degrees are heavy-tailed. Structural features carry the centred log
//! in-degree along a fixed random direction plus Gaussian noise (std 0.3); textual
//! features are a fixed random linear map of the structural ones plus noise.
//! The label of node `x` is `ln(1 + deg(x)) + w · G_x + ε` with
//! `ε ~ Normal(0, 0.1)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Edge, HetGraph, NodeFeatureSet};
use crate::tensor::Tensor;

pub const LABEL_NOISE_STD: f64 = 0.1;
const STRUCT_NOISE_STD: f64 = 0.3;
const TEXT_NOISE_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub graph: HetGraph,
    pub features: NodeFeatureSet,
    /// Planted importance value for every node id.
    pub labels: Vec<f64>,
}

pub fn generate_synthetic(
    node_count: usize,
    edge_type_count: usize,
    avg_degree: f64,
    d: usize,
    seed: u64,
) -> Result<SyntheticData> {
    if node_count == 0 || edge_type_count == 0 || d == 0 || !(avg_degree > 0.0) {
        return Err(Error::InvalidArgument(
            "node count, edge type count, degree and dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let edge_types: Vec<String> = (0..edge_type_count).map(|t| format!("rel{t}")).collect();
    let mut edges = Vec::new();
    if node_count > 1 {
        let popularity = LogNormal::new(0.0, 1.0).expect("valid lognormal");
        let weights: Vec<f64> = (0..node_count).map(|_| popularity.sample(&mut rng)).collect();
        let dst_dist = WeightedIndex::new(&weights).expect("positive weights");
        let m = (node_count as f64 * avg_degree).round() as usize;
        edges.reserve(m);
        for _ in 0..m {
            let dst = dst_dist.sample(&mut rng);
            let src = loop {
                let s = rng.random_range(0..node_count);
                if s != dst {
                    break s;
                }
            };
            let etype = rng.random_range(0..edge_type_count);
            edges.push(Edge { src, dst, etype });
        }
    }
    let graph = HetGraph::new(node_count, edge_types, edges)?;

    let log_deg: Vec<f64> = (0..node_count)
        .map(|x| (graph.file_in_degree(x) as f64).ln_1p())
        .collect();
    let mean_log_deg = log_deg.iter().sum::<f64>() / node_count as f64;

    let gauss = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>()
    };

    let dir = unit(gauss(d, 1.0, &mut rng));
    let mut g = gauss(node_count * d, STRUCT_NOISE_STD, &mut rng);
    for x in 0..node_count {
        let c = log_deg[x] - mean_log_deg;
        for j in 0..d {
            g[x * d + j] += c * dir[j];
        }
    }
    let structural = Tensor::matrix(node_count, d, g);

    let map = Tensor::matrix(d, d, gauss(d * d, 1.0 / (d as f64).sqrt(), &mut rng));
    let mut textual = crate::tensor::matmul(&structural, &map)?;
    for (v, n) in textual
        .data_mut()
        .iter_mut()
        .zip(gauss(node_count * d, TEXT_NOISE_STD, &mut rng))
    {
        *v += n;
    }

    let w = gauss(d, 1.0 / (d as f64).sqrt(), &mut rng);
    let noise = Normal::new(0.0, LABEL_NOISE_STD).expect("valid normal");
    let labels = (0..node_count)
        .map(|x| {
            let wg: f64 = structural.row(x).iter().zip(&w).map(|(a, b)| a * b).sum();
            log_deg[x] + wg + noise.sample(&mut rng)
        })
        .collect();

    Ok(SyntheticData {
        graph,
        features: NodeFeatureSet::new(structural, textual)?,
        labels,
    })
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

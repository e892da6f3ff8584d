//! Joint estimator (encoder + decoder) hyper-shapes, parameter layout,
//! initialization and the batched forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Bound, Tape, Var};
use crate::decoder::{self, Estimate, ScalingConfig};
use crate::encoder;
use crate::error::{Error, Result};
use crate::graph::{HetGraph, NodeFeatureSet};
use crate::params::ParamStore;
use crate::tensor::{DropoutMode, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Struct,
    Text,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Struct, Channel::Text];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Struct => "struct",
            Channel::Text => "text",
        }
    }
}

/// Decoder stream: `S` (mean) or `U` (covariance).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    S,
    U,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::S, Stream::U];

    pub fn name(self) -> &'static str {
        match self {
            Stream::S => "s",
            Stream::U => "u",
        }
    }
}

/// Parameter names.
pub mod names {
    use super::{Channel, Stream};

    pub const ALPHA_S: &str = "enc.alpha_s";
    pub const ALPHA_U: &str = "enc.alpha_u";
    pub const WS: &str = "dec.Ws";
    pub const WZ: &str = "dec.Wz";

    pub fn enc_edge_table(ch: Channel) -> String {
        format!("enc.{}.edge_table", ch.name())
    }

    pub fn enc_head(ch: Channel, l: usize, h: usize, w: &str) -> String {
        format!("enc.{}.layer{l}.head{h}.{w}", ch.name())
    }

    pub fn enc_layer(ch: Channel, l: usize, w: &str) -> String {
        format!("enc.{}.layer{l}.{w}", ch.name())
    }

    /// `WQ`, `WK` or `WV`; per stream only when the streams do not share them.
    pub fn dec_attn(l: usize, stream: Stream, w: &str, per_stream: bool) -> String {
        if per_stream {
            format!("dec.layer{l}.{}.{w}", stream.name())
        } else {
            format!("dec.layer{l}.{w}")
        }
    }

    pub fn dec_stream(l: usize, stream: Stream, w: &str) -> String {
        format!("dec.layer{l}.{}.{w}", stream.name())
    }
}

/// Hyper-shapes of one joint estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DjeConfig {
    /// Feature width per channel.
    pub d: usize,
    /// Rows of the distribution matrices.
    pub n_dist: usize,
    pub heads: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub dropout: f64,
    /// Edge-type vocabulary size including the self type.
    pub edge_type_count: usize,
    /// Separate decoder `WQ/WK/WV` for the two streams.
    pub dsa_per_stream: bool,
    pub scaling: ScalingConfig,
}

impl DjeConfig {
    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn d_ff(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_dist == 0 || self.heads == 0 || self.edge_type_count == 0 {
            return bad("d, N, H and the edge-type count must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by H = {}", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.scaling.validate()
    }

    pub fn check_features(&self, features: &NodeFeatureSet) -> Result<()> {
        if features.dim() != self.d {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("feature width {} but model width {}", features.dim(), self.d),
            });
        }
        Ok(())
    }

    /// Every parameter with its shape and initializer, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, dh, dff, n, w2) = (self.d, self.d_head(), self.d_ff(), self.n_dist, 2 * self.d);
        let mut v = Vec::new();
        let mut add = |name: String, shape: &[usize], init: Init| v.push((name, shape.to_vec(), init));
        for ch in Channel::ALL {
            add(names::enc_edge_table(ch), &[self.edge_type_count, d], Init::Embedding);
            for l in 0..self.layers {
                for h in 0..self.heads {
                    for w in ["WQ", "WK", "WV"] {
                        add(names::enc_head(ch, l, h, w), &[dh, d], Init::Weight);
                    }
                    add(names::enc_head(ch, l, h, "WE"), &[1, d], Init::Weight);
                }
                add(names::enc_layer(ch, l, "W"), &[d, d], Init::Weight);
                add(names::enc_layer(ch, l, "ffn.W1"), &[d, dff], Init::Weight);
                add(names::enc_layer(ch, l, "ffn.b1"), &[dff], Init::Zero);
                add(names::enc_layer(ch, l, "ffn.W2"), &[dff, d], Init::Weight);
                add(names::enc_layer(ch, l, "ffn.b2"), &[d], Init::Zero);
                for ln in ["ln1", "ln2"] {
                    add(names::enc_layer(ch, l, &format!("{ln}.gain")), &[d], Init::One);
                    add(names::enc_layer(ch, l, &format!("{ln}.bias")), &[d], Init::Zero);
                }
            }
        }
        add(names::ALPHA_S.into(), &[n], Init::Alpha);
        add(names::ALPHA_U.into(), &[n], Init::Alpha);
        for l in 0..self.layers {
            let attn_streams: &[Stream] = if self.dsa_per_stream { &Stream::ALL } else { &[Stream::S] };
            for &st in attn_streams {
                for w in ["WQ", "WK", "WV"] {
                    add(names::dec_attn(l, st, w, self.dsa_per_stream), &[w2, w2], Init::Weight);
                }
            }
            for st in Stream::ALL {
                add(names::dec_stream(l, st, "W1"), &[w2, w2], Init::Weight);
                add(names::dec_stream(l, st, "W2"), &[w2, w2], Init::Weight);
                for ln in ["ln1", "ln2"] {
                    add(names::dec_stream(l, st, &format!("{ln}.gain")), &[w2], Init::One);
                    add(names::dec_stream(l, st, &format!("{ln}.bias")), &[w2], Init::Zero);
                }
            }
        }
        add(names::WS.into(), &[n, w2], Init::Weight);
        add(names::WZ.into(), &[n, w2], Init::Weight);
        v
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let weight = Normal::new(0.0, INIT_STD).expect("valid normal");
        let alpha = Normal::new(0.0, 1.0 / (self.n_dist as f64).sqrt()).expect("valid normal");
        let embed = Normal::new(0.0, 1.0).expect("valid normal");
        let mut store = ParamStore::new();
        for (name, shape, init) in self.param_specs() {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Weight => (0..len).map(|_| weight.sample(rng)).collect(),
                Init::Alpha => (0..len).map(|_| alpha.sample(rng)).collect(),
                Init::Embedding => (0..len).map(|_| embed.sample(rng)).collect(),
                Init::One => vec![1.0; len],
                Init::Zero => vec![0.0; len],
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the expected names and shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        for (name, shape, _) in &specs {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) => t.check_finite(name)?,
            }
        }
        if store.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters present, expected {}",
                store.len(),
                specs.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Weight,
    Alpha,
    Embedding,
    One,
    Zero,
}

/// Inputs shared by every forward pass: graph, features and the per-node
/// scaling factors (when enabled).
pub struct ModelContext<'a> {
    pub graph: &'a HetGraph,
    pub features: &'a NodeFeatureSet,
    scale: Option<Vec<f64>>,
}

impl<'a> ModelContext<'a> {
    pub fn new(cfg: &DjeConfig, graph: &'a HetGraph, features: &'a NodeFeatureSet) -> Result<Self> {
        cfg.validate()?;
        cfg.check_features(features)?;
        if features.node_count() != graph.node_count() {
            return Err(Error::Shape {
                op: "model context",
                detail: format!(
                    "{} feature rows for {} nodes",
                    features.node_count(),
                    graph.node_count()
                ),
            });
        }
        if cfg.edge_type_count != graph.edge_type_count() {
            return Err(Error::Shape {
                op: "model context",
                detail: format!(
                    "model built for {} edge types, graph has {}",
                    cfg.edge_type_count,
                    graph.edge_type_count()
                ),
            });
        }
        let scale = cfg.scaling.enabled.then(|| {
            (0..graph.node_count())
                .map(|x| decoder::scaling_factor(graph, &features.textual, x, &cfg.scaling))
                .collect()
        });
        Ok(ModelContext {
            graph,
            features,
            scale,
        })
    }

    pub fn scale_factors(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }
}

/// `(ŝ, ẑ)` as `B × 1` columns for `nodes`, in request order.
pub fn forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    cfg: &DjeConfig,
    ctx: &ModelContext<'_>,
    nodes: &[usize],
    mode: DropoutMode,
    rng: &mut R,
) -> (Var<'t>, Var<'t>) {
    let (s, u) = encoder::encode_vars(tape, bound, cfg, ctx.graph, ctx.features, nodes, mode, rng);
    let (s_hat, z_hat) = decoder::decode_vars(bound, cfg, &s, &u, mode, rng);
    let s_hat = match &ctx.scale {
        Some(f) => s_hat.mul_const(Tensor::column(nodes.iter().map(|&x| f[x]).collect())),
        None => s_hat,
    };
    (s_hat, z_hat)
}

/// Forward pass without gradient tracking.
pub fn estimate<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &DjeConfig,
    ctx: &ModelContext<'_>,
    nodes: &[usize],
    mode: DropoutMode,
    rng: &mut R,
) -> Vec<Estimate> {
    if nodes.is_empty() {
        return Vec::new();
    }
    let tape = Tape::new();
    let bound = tape.bind(params, "");
    let (s, z) = forward(&tape, &bound, cfg, ctx, nodes, mode, rng);
    let (s, z) = (s.value(), z.value());
    s.data()
        .iter()
        .zip(z.data())
        .map(|(&s_hat, &z_hat)| Estimate { s_hat, z_hat })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_cfg(types: usize) -> DjeConfig {
        DjeConfig {
            d: 8,
            n_dist: 3,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            edge_type_count: types,
            dsa_per_stream: false,
            scaling: ScalingConfig::default(),
        }
    }

    #[test]
    fn validation() {
        let mut c = small_cfg(2);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_matches_specs() {
        let c = small_cfg(3);
        let p = c.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        c.check_params(&p).unwrap();
        assert_eq!(p.get("enc.struct.layer0.head1.WQ").unwrap().shape(), &[4, 8]);
        assert_eq!(p.get("enc.text.edge_table").unwrap().shape(), &[3, 8]);
        assert_eq!(p.get("dec.layer0.WQ").unwrap().shape(), &[16, 16]);
        assert_eq!(p.get("dec.layer0.u.ln2.gain").unwrap().data(), &[1.0; 16]);
        assert_eq!(p.get("dec.Wz").unwrap().shape(), &[3, 16]);
        let mut per = c.clone();
        per.dsa_per_stream = true;
        assert!(per.check_params(&p).is_err());
        let q = per.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(q.contains("dec.layer0.s.WK") && q.contains("dec.layer0.u.WK"));
    }

    #[test]
    fn init_is_seeded() {
        let c = small_cfg(2);
        let a = c.init_params(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = c.init_params(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let e = c.init_params(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, e);
    }
}

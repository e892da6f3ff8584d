use std::rc::Rc;

use easing_core::autodiff::{Bound, Segments, Tape, Var};
use easing_core::decoder::ScalingConfig;
use easing_core::gradcheck::check_gradients;
use easing_core::graph::HetGraph;
use easing_core::model::{self, DjeConfig, ModelContext};
use easing_core::params::ParamStore;
use easing_core::synth::generate_synthetic;
use easing_core::tensor::{DropoutMode, Tensor, LN_EPS};
use easing_core::trainer::{
    objective, Batch, DjePair, LabeledLoss, ObjectiveConfig, PseudoLabel, MODEL1, MODEL2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(n, s)| (n.to_string(), rand_tensor(&mut rng, s)))
        .collect()
}

fn assert_grad<F>(params: &ParamStore, f: F)
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let r = check_gradients(params, H, f).unwrap();
    assert!(r.checked > 0);
    assert!(
        r.max_rel_err <= TOL,
        "max rel err {} at {:?}: analytic {} numeric {}",
        r.max_rel_err,
        r.worst,
        r.analytic,
        r.numeric
    );
}

/// Fixed random weights so every output entry reaches the loss differently.
fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &v.shape());
    v.mul(&tape.constant(w)).sum()
}

#[test]
fn matmul_variants() {
    let p = store(1, &[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[2, 4])]);
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").matmul(&b.get("b")), 9));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").matmul_t(false, &b.get("c"), true), 9));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("b").matmul_t(true, &b.get("a"), true), 9));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("c").matmul_t(true, &b.get("b"), true), 9));
}

#[test]
fn elementwise_ops() {
    let p = store(2, &[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])]);
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").add(&b.get("b")), 1));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").sub(&b.get("b")), 1));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").mul(&b.get("b")), 1));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").square(), 1));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").add_row(&b.get("r")), 1));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").scale(-2.5), 1));
    assert_grad(&p, |t, b| {
        let c = rand_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[3, 4]);
        weighted_sum(t, b.get("a").mul_const(c), 1)
    });
}

#[test]
fn activations() {
    let p = store(3, &[("a", &[4, 5])]);
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").relu(), 2));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").elu(), 2));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").exp(), 2));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").scale(3.0).softmax_rows(), 2));
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").log_softmax_rows(), 2));
}

#[test]
fn layer_norm() {
    let p = store(4, &[("x", &[3, 6]), ("g", &[6]), ("b", &[6])]);
    assert_grad(&p, |t, b| {
        weighted_sum(t, b.get("x").layer_norm(&b.get("g"), &b.get("b"), LN_EPS), 3)
    });
}

#[test]
fn structural_ops() {
    let p = store(5, &[("a", &[4, 3]), ("b", &[4, 2]), ("al", &[3]), ("w", &[3, 3])]);
    assert_grad(&p, |t, b| weighted_sum(t, Var::concat_cols(&[b.get("a"), b.get("b")]), 4));
    assert_grad(&p, |t, b| {
        weighted_sum(t, b.get("a").gather_rows(Rc::new(vec![3, 0, 0, 2, 3])), 4)
    });
    assert_grad(&p, |t, b| weighted_sum(t, b.get("a").reshape(&[2, 6]), 4));
    assert_grad(&p, |_, b| b.get("a").mean());
    assert_grad(&p, |t, b| weighted_sum(t, Var::outer_repeat(&b.get("al"), &b.get("a")), 4));
    assert_grad(&p, |t, b| {
        let s = Var::outer_repeat(&b.get("al"), &b.get("a"));
        weighted_sum(t, Var::block_frobenius(&b.get("w"), &s), 4)
    });
}

#[test]
fn block_attention_ops() {
    let p = store(6, &[("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 5])]);
    assert_grad(&p, |t, b| weighted_sum(t, Var::block_matmul_nt(&b.get("q"), &b.get("k"), 3), 5));
    assert_grad(&p, |t, b| {
        let att = Var::block_matmul_nt(&b.get("q"), &b.get("k"), 2).softmax_rows();
        weighted_sum(t, Var::block_matmul(&att, &b.get("v"), 2), 5)
    });
}

#[test]
fn segment_ops() {
    // row 0 <- {0, 1, 1}, row 1 <- {2}, row 2 <- {0, 2, 3, 3}
    let seg = Rc::new(Segments {
        src: vec![0, 1, 1, 2, 0, 2, 3, 3],
        offsets: vec![0, 3, 4, 8],
    });
    let p = store(7, &[("q", &[3, 4]), ("k", &[4, 4]), ("v", &[4, 3]), ("e", &[8, 1])]);
    let s = Rc::clone(&seg);
    assert_grad(&p, move |t, b| weighted_sum(t, Var::edge_dot(&b.get("q"), &b.get("k"), Rc::clone(&s)), 6));
    let s = Rc::clone(&seg);
    assert_grad(&p, move |t, b| weighted_sum(t, b.get("e").scale(2.0).segment_softmax(Rc::clone(&s)), 6));
    let s = Rc::clone(&seg);
    assert_grad(&p, move |t, b| {
        let w = b.get("e").segment_softmax(Rc::clone(&s));
        weighted_sum(t, Var::segment_weighted_sum(&w, &b.get("v"), Rc::clone(&s)), 6)
    });
}

fn fixture() -> (HetGraph, easing_core::graph::NodeFeatureSet) {
    let s = generate_synthetic(12, 2, 2.0, 8, 3).unwrap();
    (s.graph, s.features)
}

fn cfg(types: usize, scaling: bool, per_stream: bool) -> DjeConfig {
    DjeConfig {
        d: 8,
        n_dist: 3,
        heads: 2,
        layers: 1,
        dropout: 0.0,
        edge_type_count: types,
        dsa_per_stream: per_stream,
        scaling: ScalingConfig {
            enabled: scaling,
            ..ScalingConfig::default()
        },
    }
}

/// Larger weights than the training init so that every path contributes.
fn params(cfg: &DjeConfig, seed: u64) -> ParamStore {
    perturbed(cfg, seed, 0.3)
}

fn perturbed(cfg: &DjeConfig, seed: u64, amp: f64) -> ParamStore {
    let mut p = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
    p
}

#[test]
fn single_model_forward() {
    let (g, f) = fixture();
    for (scaling, per_stream) in [(false, false), (true, true)] {
        let c = cfg(g.edge_type_count(), scaling, per_stream);
        let ctx = ModelContext::new(&c, &g, &f).unwrap();
        let p = params(&c, 11);
        let nodes = [0, 3, 5, 11];
        assert_grad(&p, |t, b| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (s, z) = model::forward(t, b, &c, &ctx, &nodes, DropoutMode::Off, &mut rng);
            weighted_sum(t, s, 1).add(&weighted_sum(t, z, 2))
        });
    }
}

#[test]
fn two_layer_forward() {
    let (g, f) = fixture();
    let mut c = cfg(g.edge_type_count(), false, false);
    c.layers = 2;
    let ctx = ModelContext::new(&c, &g, &f).unwrap();
    let p = params(&c, 12);
    assert_grad(&p, |t, b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, z) = model::forward(t, b, &c, &ctx, &[1, 7], DropoutMode::Off, &mut rng);
        weighted_sum(t, s, 1).add(&weighted_sum(t, z, 2))
    });
}

#[test]
fn full_objective_with_ranking_and_homoscedastic_variant() {
    let (g, f) = fixture();
    let c = cfg(g.edge_type_count(), true, false);
    let ctx = ModelContext::new(&c, &g, &f).unwrap();
    let pair = DjePair {
        config: c.clone(),
        model1: perturbed(&c, 21, 0.05),
        model2: perturbed(&c, 22, 0.05),
    };
    let labeled = [(0, 1.0), (2, 0.5), (4, 2.0), (6, -0.3)];
    let pseudo = [
        PseudoLabel { node: 1, s_plus: 0.7, z_plus: -0.2 },
        PseudoLabel { node: 9, s_plus: 1.3, z_plus: 0.4 },
    ];
    let rank_sets = vec![vec![0, 1, 2], vec![1, 3, 0], vec![2, 0, 3], vec![3, 2, 1]];
    for labeled_loss in [LabeledLoss::Heteroscedastic, LabeledLoss::Homoscedastic] {
        let opts = ObjectiveConfig {
            lambda: 0.7,
            labeled_loss,
            rank_weight: 0.5,
        };
        let batch = Batch {
            labeled: &labeled,
            pseudo: &pseudo,
            rank_sets: &rank_sets,
        };
        assert_grad(&pair.joint(), |t, b| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (b1, b2) = (b.scoped(MODEL1), b.scoped(MODEL2));
            objective(t, [&b1, &b2], &c, &ctx, &batch, &opts, DropoutMode::Off, &mut rng).total
        });
    }
}

//! Two-estimator semi-supervised training: MC-dropout pseudo-labels, the
//! four-term heteroscedastic objective, Adam, and early stopping.

use std::rc::Rc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Tape, Var};
use crate::decoder::Estimate;
use crate::error::{Error, Result};
use crate::graph::ImportanceDataset;
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics;
use crate::model::{self, DjeConfig, ModelContext};
use crate::params::{adam_step, AdamConfig, AdamState, Checkpoint, ParamStore};
use crate::tensor::{self, DropoutMode, Tensor};

pub const MODEL1: &str = "dje1.";
pub const MODEL2: &str = "dje2.";

const STREAM_MODEL1: u64 = 1;
const STREAM_MODEL2: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_INFER: u64 = 4;

/// Independent ChaCha stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random stream for inference-time MC passes (pseudo-label inspection).
pub fn inference_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_INFER)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DjePair {
    pub config: DjeConfig,
    pub model1: ParamStore,
    pub model2: ParamStore,
}

impl DjePair {
    pub fn init(config: DjeConfig, seed: u64) -> Result<Self> {
        let model1 = config.init_params(&mut stream_rng(seed, STREAM_MODEL1))?;
        let model2 = config.init_params(&mut stream_rng(seed, STREAM_MODEL2))?;
        Ok(DjePair {
            config,
            model1,
            model2,
        })
    }

    /// Both models in one store, names prefixed by [`MODEL1`] / [`MODEL2`].
    pub fn joint(&self) -> ParamStore {
        self.model1
            .prefixed(MODEL1)
            .iter()
            .chain(self.model2.prefixed(MODEL2).iter())
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    pub fn from_joint(config: DjeConfig, joint: &ParamStore) -> Result<Self> {
        let pair = DjePair {
            model1: joint.strip_prefix(MODEL1),
            model2: joint.strip_prefix(MODEL2),
            config,
        };
        pair.config.check_params(&pair.model1)?;
        pair.config.check_params(&pair.model2)?;
        Ok(pair)
    }

    pub fn push_to(&self, ck: &mut Checkpoint) {
        ck.push_store(MODEL1, &self.model1);
        ck.push_store(MODEL2, &self.model2);
    }

    pub fn from_checkpoint(config: DjeConfig, ck: &Checkpoint) -> Result<Self> {
        let pair = DjePair {
            model1: ck.store(MODEL1)?,
            model2: ck.store(MODEL2)?,
            config,
        };
        pair.config.check_params(&pair.model1)?;
        pair.config.check_params(&pair.model2)?;
        Ok(pair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub node: usize,
    pub s_plus: f64,
    pub z_plus: f64,
}

/// Per-position mean over passes. Values are summed in sorted order so the
/// result does not depend on the order of the passes.
pub fn ensemble_mean(passes: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = passes.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|j| {
            let mut v: Vec<f64> = passes.iter().map(|p| p[j]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

/// `T` MC-dropout passes through each model, averaged.
pub fn generate_pseudo_labels<R: Rng + ?Sized>(
    pair: &DjePair,
    ctx: &ModelContext<'_>,
    pool: &[usize],
    passes: usize,
    rng: &mut R,
) -> Result<Vec<PseudoLabel>> {
    if passes == 0 {
        return Err(Error::InvalidArgument("pseudo-labels need at least one pass".into()));
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let mut s = Vec::with_capacity(2 * passes);
    let mut z = Vec::with_capacity(2 * passes);
    for params in [&pair.model1, &pair.model2] {
        for _ in 0..passes {
            let est = model::estimate(params, &pair.config, ctx, pool, DropoutMode::McInfer, rng);
            s.push(est.iter().map(|e| e.s_hat).collect());
            z.push(est.iter().map(|e| e.z_hat).collect());
        }
    }
    let (s, z) = (ensemble_mean(&s), ensemble_mean(&z));
    let out: Vec<PseudoLabel> = pool
        .iter()
        .zip(s.iter().zip(&z))
        .map(|(&node, (&s_plus, &z_plus))| PseudoLabel {
            node,
            s_plus,
            z_plus,
        })
        .collect();
    if out.iter().any(|p| !p.s_plus.is_finite() || !p.z_plus.is_finite()) {
        return Err(Error::NonFinite("pseudo-label".into()));
    }
    Ok(out)
}

/// How the two trained models are combined at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combine {
    #[default]
    Average,
    Model1,
}

/// Dropout-off estimates for `nodes`.
pub fn predict(pair: &DjePair, ctx: &ModelContext<'_>, nodes: &[usize], combine: Combine) -> Vec<Estimate> {
    let mut rng = stream_rng(0, STREAM_INFER);
    let e1 = model::estimate(&pair.model1, &pair.config, ctx, nodes, DropoutMode::Off, &mut rng);
    if combine == Combine::Model1 {
        return e1;
    }
    let e2 = model::estimate(&pair.model2, &pair.config, ctx, nodes, DropoutMode::Off, &mut rng);
    e1.iter()
        .zip(&e2)
        .map(|(a, b)| Estimate {
            s_hat: (a.s_hat + b.s_hat) / 2.0,
            z_hat: (a.z_hat + b.z_hat) / 2.0,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabeledLoss {
    #[default]
    Heteroscedastic,
    Homoscedastic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingConfig {
    pub enabled: bool,
    pub n: usize,
    pub weight: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            enabled: false,
            n: 10,
            weight: 1.0,
        }
    }
}

/// Options that shape the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub labeled_loss: LabeledLoss,
    pub rank_weight: f64,
}

/// Inputs to one evaluation of the objective.
pub struct Batch<'a> {
    pub labeled: &'a [(usize, f64)],
    pub pseudo: &'a [PseudoLabel],
    /// Sampled ranking sets as positions in `labeled`.
    pub rank_sets: &'a [Vec<usize>],
}

pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub rank: f64,
}

fn hetero_mean<'t>(tape: &'t Tape, target: Vec<f64>, s: &Var<'t>, z: &Var<'t>) -> Var<'t> {
    let r2 = tape.constant(Tensor::column(target)).sub(s).square();
    r2.mul(&z.scale(-1.0).exp()).scale(0.5).add(&z.scale(0.5)).mean()
}

fn sq_mean<'t>(a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
    a.sub(b).square().mean()
}

fn rank_term<'t>(s_lab: &Var<'t>, truth: &[f64], sets: &[Vec<usize>]) -> Var<'t> {
    let n = sets[0].len();
    let idx: Vec<usize> = sets.iter().flatten().copied().collect();
    let targets: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
    let targets = tensor::softmax_rows(&Tensor::matrix(sets.len(), n, targets));
    s_lab
        .gather_rows(Rc::new(idx))
        .reshape(&[sets.len(), n])
        .log_softmax_rows()
        .mul_const(targets)
        .sum()
        .scale(-1.0 / sets.len() as f64)
}

/// Builds the full objective for both models on `tape`. `models` are the two
/// estimators' bound parameters.
#[allow(clippy::too_many_arguments)]
pub fn objective<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    models: [&Bound<'t>; 2],
    cfg: &DjeConfig,
    ctx: &ModelContext<'_>,
    batch: &Batch<'_>,
    opts: &ObjectiveConfig,
    mode: DropoutMode,
    rng: &mut R,
) -> Objective<'t> {
    let nl = batch.labeled.len();
    let np = batch.pseudo.len();
    let nodes: Vec<usize> = batch
        .labeled
        .iter()
        .map(|l| l.0)
        .chain(batch.pseudo.iter().map(|p| p.node))
        .collect();
    let lab_idx = Rc::new((0..nl).collect::<Vec<_>>());
    let unl_idx = Rc::new((nl..nl + np).collect::<Vec<_>>());
    let truth: Vec<f64> = batch.labeled.iter().map(|l| l.1).collect();
    let s_plus: Vec<f64> = batch.pseudo.iter().map(|p| p.s_plus).collect();
    let z_plus = tape.constant(Tensor::column(batch.pseudo.iter().map(|p| p.z_plus).collect()));

    let mut lb_reg = Vec::new();
    let mut lab_z = Vec::new();
    let mut unlb_reg = Vec::new();
    let mut unlb_stab = Vec::new();
    let mut rank = Vec::new();
    for bound in models {
        let (s, z) = model::forward(tape, bound, cfg, ctx, &nodes, mode, rng);
        let (s_lab, z_lab) = (s.gather_rows(Rc::clone(&lab_idx)), z.gather_rows(Rc::clone(&lab_idx)));
        lb_reg.push(match opts.labeled_loss {
            LabeledLoss::Heteroscedastic => hetero_mean(tape, truth.clone(), &s_lab, &z_lab),
            LabeledLoss::Homoscedastic => {
                sq_mean(&tape.constant(Tensor::column(truth.clone())), &s_lab)
            }
        });
        if np > 0 {
            let (s_u, z_u) = (s.gather_rows(Rc::clone(&unl_idx)), z.gather_rows(Rc::clone(&unl_idx)));
            unlb_reg.push(hetero_mean(tape, s_plus.clone(), &s_u, &z_u));
            unlb_stab.push(sq_mean(&z_plus, &z_u));
        }
        if !batch.rank_sets.is_empty() {
            rank.push(rank_term(&s_lab, &truth, batch.rank_sets));
        }
        lab_z.push(z_lab);
    }
    let lb_reg = lb_reg[0].add(&lb_reg[1]).scale(0.5);
    let lb_stab = sq_mean(&lab_z[0], &lab_z[1]);
    let mut total = lb_reg.add(&lb_stab);
    let (mut u_reg, mut u_stab) = (0.0, 0.0);
    if np > 0 {
        let ur = unlb_reg[0].add(&unlb_reg[1]);
        let us = unlb_stab[0].add(&unlb_stab[1]);
        u_reg = ur.item();
        u_stab = us.item();
        total = total.add(&ur.add(&us).scale(opts.lambda));
    }
    let mut rank_value = 0.0;
    if !rank.is_empty() {
        let r = rank[0].add(&rank[1]).scale(0.5);
        rank_value = r.item();
        total = total.add(&r.scale(opts.rank_weight));
    }
    let mut breakdown = total_loss(lb_reg.item(), lb_stab.item(), u_reg, u_stab, opts.lambda);
    breakdown.total += opts.rank_weight * rank_value;
    Objective {
        total,
        breakdown,
        rank: rank_value,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub lambda: f64,
    /// MC-dropout passes per model for pseudo-labels.
    pub passes: usize,
    /// Epochs without validation improvement before stopping; `None` trains
    /// for every epoch.
    pub patience: Option<usize>,
    pub labeled_loss: LabeledLoss,
    pub ranking: RankingConfig,
    pub combine: Combine,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            adam: AdamConfig::default(),
            lambda: 1.0,
            passes: 5,
            patience: Some(20),
            labeled_loss: LabeledLoss::Heteroscedastic,
            ranking: RankingConfig::default(),
            combine: Combine::Average,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.adam.lr)));
        }
        if self.ranking.enabled && self.ranking.n < 2 {
            return Err(Error::Config(format!(
                "ranking set size {} must be at least 2",
                self.ranking.n
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_nrmse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NRMSE.
    pub pair: DjePair,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn sample_rank_sets<R: Rng + ?Sized>(nl: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n = n.min(nl);
    (0..nl)
        .map(|a| {
            let others: Vec<usize> = (0..nl).filter(|&i| i != a).collect();
            let mut set = vec![a];
            set.extend(others.choose_multiple(rng, n - 1).copied());
            set
        })
        .collect()
}

/// Validation NRMSE of `pair` on `split`; NaN for an empty split.
fn split_nrmse(pair: &DjePair, ctx: &ModelContext<'_>, split: &[(usize, f64)], combine: Combine) -> Result<f64> {
    if split.is_empty() {
        return Ok(f64::NAN);
    }
    let ids: Vec<usize> = split.iter().map(|v| v.0).collect();
    let truth: Vec<f64> = split.iter().map(|v| v.1).collect();
    let pred: Vec<f64> = predict(pair, ctx, &ids, combine).iter().map(|e| e.s_hat).collect();
    Ok(metrics::regression_metrics(&pred, &truth)?.2)
}

pub fn train(
    pair: DjePair,
    dataset: &ImportanceDataset,
    ctx: &ModelContext<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled training nodes".into()));
    }
    if cfg.ranking.enabled && dataset.labeled.len() < 2 {
        return Err(Error::InvalidArgument("ranking loss needs at least 2 labeled nodes".into()));
    }
    let dcfg = pair.config.clone();
    let mut joint = pair.joint();
    let mut adam = AdamState::new();
    let mut rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let opts = ObjectiveConfig {
        lambda: cfg.lambda,
        labeled_loss: cfg.labeled_loss,
        rank_weight: if cfg.ranking.enabled { cfg.ranking.weight } else { 0.0 },
    };
    let use_pseudo = cfg.lambda > 0.0 && !dataset.unlabeled_pool.is_empty();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut current = pair;
    for epoch in 1..=cfg.epochs {
        let pseudo = if use_pseudo {
            let pool = &dataset.unlabeled_pool;
            let mut d_prime: Vec<usize> = if pool.len() > dataset.labeled.len() {
                pool.choose_multiple(&mut rng, dataset.labeled.len()).copied().collect()
            } else {
                pool.clone()
            };
            d_prime.sort_unstable();
            generate_pseudo_labels(&current, ctx, &d_prime, cfg.passes, &mut rng)
                .map_err(|e| diverged(e, epoch))?
        } else {
            Vec::new()
        };
        let rank_sets = if cfg.ranking.enabled {
            sample_rank_sets(dataset.labeled.len(), cfg.ranking.n, &mut rng)
        } else {
            Vec::new()
        };

        let tape = Tape::new();
        let bound = tape.bind(&joint, "");
        let (b1, b2) = (bound.scoped(MODEL1), bound.scoped(MODEL2));
        let batch = Batch {
            labeled: &dataset.labeled,
            pseudo: &pseudo,
            rank_sets: &rank_sets,
        };
        let obj = objective(&tape, [&b1, &b2], &dcfg, ctx, &batch, &opts, DropoutMode::Train, &mut rng);
        if !obj.breakdown.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let grads = tape.grad(obj.total).map_err(|e| diverged(e, epoch))?;
        drop(bound);
        adam_step(&mut joint, &grads.grads, &mut adam, &cfg.adam)?;
        if joint.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Diverged { epoch });
        }
        current = DjePair::from_joint(dcfg.clone(), &joint).map_err(|e| diverged(e, epoch))?;

        let val_nrmse = split_nrmse(&current, ctx, &dataset.val, cfg.combine)?;
        if val_nrmse.is_infinite() {
            return Err(Error::Diverged { epoch });
        }
        log.push(EpochLog {
            epoch,
            losses: obj.breakdown,
            val_nrmse,
        });

        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_nrmse < *b || (val_nrmse.is_nan() && b.is_nan()),
        };
        if improved {
            best = Some((val_nrmse, epoch, joint.clone()));
        }
        if let (Some(p), Some((_, be, _))) = (cfg.patience, &best) {
            if epoch - be >= p && !val_nrmse.is_nan() {
                break;
            }
        }
    }
    let (pair, best_epoch) = match best {
        Some((_, e, store)) => (DjePair::from_joint(dcfg, &store)?, e),
        None => (current, 0),
    };
    Ok(TrainOutcome {
        pair,
        log,
        best_epoch,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        e => e,
    }
}

/// `epoch,lb_reg,lb_stab,unlb_reg,unlb_stab,total,val_nrmse`
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lb_reg,lb_stab,unlb_reg,unlb_stab,total,val_nrmse\n");
    for e in log {
        let l = &e.losses;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, l.lb_reg, l.lb_stab, l.unlb_reg, l.unlb_stab, l.total, e.val_nrmse
        ));
    }
    s
}

/// `node_id,s_hat,z_hat`
pub fn predictions_csv(nodes: &[usize], est: &[Estimate]) -> String {
    let mut s = String::from("node_id,s_hat,z_hat\n");
    for (n, e) in nodes.iter().zip(est) {
        s.push_str(&format!("{n},{},{}\n", e.s_hat, e.z_hat));
    }
    s
}

/// `node_id,s_plus,z_plus`
pub fn pseudo_labels_csv(labels: &[PseudoLabel]) -> String {
    let mut s = String::from("node_id,s_plus,z_plus\n");
    for p in labels {
        s.push_str(&format!("{},{},{}\n", p.node, p.s_plus, p.z_plus));
    }
    s
}

//! Training loop: batch assembly, view generation, the combined loss, SGD
//! steps, loss-history upkeep, evaluation, checkpointing and run reports.
//!
//! An epoch is one pass over the unlabelled set in batches of `mu * batch`
//! (the final batch wraps around the shuffled order); labelled batches of
//! `batch` cycle through their own shuffled order as often as needed. Without
//! unlabelled data an epoch is one pass over the labelled set.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aha::{dispatch_augmentation, HistoricalLossTable};
use crate::augment::{strong_view, weak_view, AugPolicy};
use crate::error::{Error, Result};
use crate::graph::{floored_ln, zero_grads, Graph, Sgd, Tensor};
use crate::invlearn::{select_k, KScope};
use crate::losses::{
    contrastive_loss, inverse_loss, paired_index, pseudo_label_ce, sup_loss, supcon_loss,
    total_loss, unsup_loss, Components, LossValues, LossWeights,
};
use crate::metrics::{append_epoch_csv, utilization, Confusion, EpochMetrics, Flags};
use crate::model::{Architecture, Checkpoint, PointClassifier};
use crate::pcdata::{Dataset, LabeledSample, PointCloud};
use crate::rng::{self, Tag};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const FINAL_CHECKPOINT: &str = "final.amck";

/// Warm-up value meaning "never leave warm-up".
pub const NEVER: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Labelled batch size.
    pub batch: usize,
    /// Unlabelled-to-labelled batch ratio.
    pub mu: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub proj_dim: usize,
    pub loss: LossWeights,
    pub aug: AugPolicy,
    pub aha_kappa: f64,
    /// Epochs during which every sample gets the ordinary strong view.
    pub aha_warmup: u64,
    /// Also route the labelled strong views (used by the supervised
    /// contrastive term) through the easy/hard dispatch, with their own
    /// history of cross-entropy against the true label.
    pub aha_apply_to_labeled: bool,
    pub inv_k_scope: KScope,
    /// Restrict inverse learning to rows below the confidence threshold.
    pub inv_low_conf_only: bool,
    pub use_aha: bool,
    pub use_inverse: bool,
    pub use_contrastive: bool,
    pub use_supcon: bool,
    pub use_unsup: bool,
    /// Write `checkpoint_NNNN.amck` every this many epochs; 0 disables.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Small CPU-friendly profile for the synthetic dataset.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 8,
            mu: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            proj_dim: 64,
            loss: LossWeights::default(),
            aug: AugPolicy::default(),
            aha_kappa: 0.1,
            aha_warmup: 10,
            aha_apply_to_labeled: false,
            inv_k_scope: KScope::Batch,
            inv_low_conf_only: false,
            use_aha: true,
            use_inverse: true,
            use_contrastive: true,
            use_supcon: true,
            use_unsup: true,
            checkpoint_every: 10,
        }
    }

    /// Full-length schedule with the published hyperparameters.
    pub fn full() -> Self {
        TrainConfig {
            epochs: 350,
            batch: 24,
            lr: 0.00005,
            aha_warmup: 50,
            checkpoint_every: 50,
            ..TrainConfig::desk()
        }
    }

    pub fn flags(&self) -> Flags {
        Flags {
            inverse: self.use_inverse,
            aha: self.use_aha,
            contrastive: self.use_contrastive,
            supcon: self.use_supcon,
        }
    }

    pub fn set_flags(&mut self, f: Flags) {
        self.use_inverse = f.inverse;
        self.use_aha = f.aha;
        self.use_contrastive = f.contrastive;
        self.use_supcon = f.supcon;
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.mu == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "train.epochs, train.batch, train.mu and model.proj_dim must all be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.aha_kappa > 0.0 && self.aha_kappa <= 1.0) {
            return Err(Error::Config(format!(
                "aha.kappa must lie in (0, 1], got {}",
                self.aha_kappa
            )));
        }
        self.loss.validate().map_err(as_config)?;
        self.aug.validate().map_err(as_config)?;
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Indices consumed by one optimisation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

fn shuffled(n: usize, seed: u64, tag: Tag, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, tag, &[epoch]));
    order
}

/// Batch composition of `epoch` (1-based).
pub fn epoch_schedule(
    cfg: &TrainConfig,
    n_labeled: usize,
    n_unlabeled: usize,
    epoch: u64,
) -> Vec<Batch> {
    let lab = shuffled(n_labeled, cfg.seed, Tag::LabeledOrder, epoch);
    let unl = shuffled(n_unlabeled, cfg.seed, Tag::UnlabeledOrder, epoch);
    let ub = cfg.batch * cfg.mu;
    let steps = if n_unlabeled > 0 {
        n_unlabeled.div_ceil(ub)
    } else {
        n_labeled.div_ceil(cfg.batch)
    };
    (0..steps)
        .map(|s| Batch {
            labeled: (0..cfg.batch)
                .map(|j| lab[(s * cfg.batch + j) % n_labeled])
                .collect(),
            unlabeled: if n_unlabeled > 0 {
                (0..ub).map(|j| unl[(s * ub + j) % n_unlabeled]).collect()
            } else {
                Vec::new()
            },
        })
        .collect()
}

/// Stream key parts for the view of the sample in `slot` of `step`.
pub fn view_key(epoch: u64, id: usize, step: usize, slot: usize) -> [u64; 4] {
    [epoch, id as u64, step as u64, slot as u64]
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PointClassifier,
    pub opt: Sgd,
    pub history: Option<HistoricalLossTable>,
    pub labeled_history: Option<HistoricalLossTable>,
    /// Completed epochs.
    pub epoch: u64,
    /// Largest per-batch `k` of the last completed epoch (epoch-scoped `k`).
    pub k_carry: Option<usize>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(data.classes as usize, cfg.proj_dim);
        let history = if cfg.use_aha {
            Some(HistoricalLossTable::new(
                data.unlabeled.len(),
                cfg.aha_kappa,
                cfg.aha_warmup,
            )?)
        } else {
            None
        };
        let labeled_history = if cfg.use_aha && cfg.aha_apply_to_labeled {
            Some(HistoricalLossTable::new(
                data.labeled.len(),
                cfg.aha_kappa,
                cfg.aha_warmup,
            )?)
        } else {
            None
        };
        Ok(TrainState {
            model: PointClassifier::init(arch, cfg.seed)?,
            opt: Sgd::new(cfg.lr, cfg.momentum).map_err(as_config)?,
            history,
            labeled_history,
            epoch: 0,
            k_carry: None,
            seed: cfg.seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.epoch);
        for (p, v) in self.model.params.iter().zip(self.opt.velocity()) {
            ck.tensors.push((
                format!("sgd.velocity.{}", p.name),
                Tensor {
                    shape: p.value.shape.clone(),
                    data: v.clone(),
                },
            ));
        }
        for (prefix, table) in [
            ("aha", &self.history),
            ("aha_labeled", &self.labeled_history),
        ] {
            if let Some(t) = table {
                let (h, s, m) = t.export();
                for (name, data) in [("history", h), ("seen", s), ("marks", m)] {
                    ck.tensors.push((
                        format!("{prefix}.{name}"),
                        Tensor {
                            shape: vec![data.len()],
                            data,
                        },
                    ));
                }
            }
        }
        if let Some(k) = self.k_carry {
            ck.tensors
                .push(("inv.k_carry".into(), Tensor::scalar(k as f64)));
        }
        ck
    }

    /// Rebuilds the state from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(cfg: &TrainConfig, data: &Dataset, ck: &Checkpoint) -> Result<Self> {
        let mut st = TrainState::new(cfg, data)?;
        st.model = PointClassifier::from_checkpoint(st.model.arch, ck)?;
        let vel: Vec<Vec<f64>> = st
            .model
            .params
            .iter()
            .filter_map(|p| {
                ck.get(&format!("sgd.velocity.{}", p.name))
                    .map(|t| t.data.clone())
            })
            .collect();
        if !vel.is_empty() {
            st.opt
                .set_velocity(&st.model.params, vel)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        for (prefix, table) in [
            ("aha", &mut st.history),
            ("aha_labeled", &mut st.labeled_history),
        ] {
            if let Some(t) = table {
                let get = |n: &str| {
                    ck.get(&format!("{prefix}.{n}"))
                        .map(|t| t.data.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{prefix}.{n}`")))
                };
                t.restore(get("history")?, &get("seen")?, &get("marks")?)?;
            }
        }
        st.k_carry = ck.get("inv.k_carry").map(|t| t.data[0] as usize);
        st.epoch = ck.epoch;
        Ok(st)
    }
}

/// Accuracy on a labelled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: f64,
    pub mean: f64,
    pub confusion: Confusion,
}

const EVAL_CHUNK: usize = 64;

pub fn evaluate(model: &PointClassifier, test: &[LabeledSample]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let c = model.arch.classes;
    let mut confusion = Confusion::new(c);
    for chunk in test.chunks(EVAL_CHUNK) {
        let clouds: Vec<&PointCloud> = chunk.iter().map(|s| &s.cloud).collect();
        let pred = model.predict(&clouds)?;
        for (i, s) in chunk.iter().enumerate() {
            if s.label as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {} >= classes {c}",
                    s.label
                )));
            }
            confusion.add(s.label as usize, crate::invlearn::argmax(pred.probs_row(i)));
        }
    }
    Ok(Evaluation {
        overall: confusion.overall_accuracy()?,
        mean: confusion.mean_accuracy()?,
        confusion,
    })
}

/// Per-epoch accumulators over unique unlabelled samples.
struct Coverage {
    touched: Vec<bool>,
    pl: Vec<bool>,
    inv: Vec<usize>,
    con: Vec<bool>,
    pl_passed: usize,
    pl_correct: usize,
}

struct StepOutcome {
    values: LossValues,
    batch_k: Option<usize>,
}

fn train_step(
    st: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: u64,
    step: usize,
    batch: &Batch,
    cov: &mut Coverage,
) -> Result<StepOutcome> {
    let c = data.classes as usize;
    let seed = cfg.seed;
    let model = &st.model;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);

    let labels: Vec<u32> = batch
        .labeled
        .iter()
        .map(|&i| data.labeled[i].label)
        .collect();
    let lab_weak: Vec<PointCloud> = batch
        .labeled
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut r = rng::stream(seed, Tag::LabeledWeak, &view_key(epoch, i, step, slot));
            weak_view(&data.labeled[i].cloud, &mut r, &cfg.aug).cloud
        })
        .collect();
    let lab_out = model.forward(&mut g, &bound, &lab_weak.iter().collect::<Vec<_>>())?;
    let sup = sup_loss(&mut g, lab_out.logits, &labels)?;

    let mut comp = Components {
        sup,
        unsup: None,
        supcon: None,
        con: None,
        inv: None,
    };
    let mut lab_strong_ce = None;
    if cfg.use_supcon {
        let lab_strong: Vec<PointCloud> = batch
            .labeled
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut r = rng::stream(seed, Tag::LabeledStrong, &view_key(epoch, i, step, slot));
                let cloud = &data.labeled[i].cloud;
                Ok(match &st.labeled_history {
                    Some(t) => dispatch_augmentation(t.mark(i), cloud, &mut r, &cfg.aug)?.cloud,
                    None => strong_view(cloud, &mut r, &cfg.aug).cloud,
                })
            })
            .collect::<Result<_>>()?;
        let out = model.forward(&mut g, &bound, &lab_strong.iter().collect::<Vec<_>>())?;
        if st.labeled_history.is_some() {
            let p = g.value(out.probs);
            lab_strong_ce = Some(
                labels
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| -floored_ln(p[r * c + l as usize]))
                    .collect::<Vec<f64>>(),
            );
        }
        let emb = g.concat(&[lab_out.embedding, out.embedding])?;
        let both: Vec<u32> = labels.iter().chain(&labels).copied().collect();
        comp.supcon = Some(supcon_loss(&mut g, emb, &both, c, cfg.loss.tau_t)?);
    }

    let mut pl_ce = None;
    let mut k_used = None;
    let needs_unlabeled = cfg.use_unsup || cfg.use_inverse || cfg.use_contrastive || cfg.use_aha;
    if !batch.unlabeled.is_empty() && needs_unlabeled {
        let ub = batch.unlabeled.len();
        let weak: Vec<PointCloud> = batch
            .unlabeled
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut r = rng::stream(seed, Tag::UnlabeledWeak, &view_key(epoch, i, step, slot));
                weak_view(&data.unlabeled[i], &mut r, &cfg.aug).cloud
            })
            .collect();
        let strong: Vec<PointCloud> = batch
            .unlabeled
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut r =
                    rng::stream(seed, Tag::UnlabeledStrong, &view_key(epoch, i, step, slot));
                let cloud = &data.unlabeled[i];
                Ok(match &st.history {
                    Some(t) => dispatch_augmentation(t.mark(i), cloud, &mut r, &cfg.aug)?.cloud,
                    None => strong_view(cloud, &mut r, &cfg.aug).cloud,
                })
            })
            .collect::<Result<_>>()?;
        let weak_refs: Vec<&PointCloud> = weak.iter().collect();
        // the weak view only needs a graph when the contrastive term
        // differentiates through its embedding
        let (weak_probs, weak_emb) = if cfg.use_contrastive {
            let out = model.forward(&mut g, &bound, &weak_refs)?;
            (g.value(out.probs).to_vec(), Some(out.embedding))
        } else {
            (model.predict(&weak_refs)?.probs, None)
        };
        let s_out = model.forward(&mut g, &bound, &strong.iter().collect::<Vec<_>>())?;
        let strong_probs = g.value(s_out.probs).to_vec();

        let mut mask = vec![false; ub];
        if cfg.use_unsup {
            let (l, m) = unsup_loss(&mut g, &weak_probs, s_out.logits, cfg.loss.tau_c)?;
            comp.unsup = Some(l);
            mask = m;
            if let Some(truth) = &data.unlabeled_truth {
                for (slot, &i) in batch.unlabeled.iter().enumerate() {
                    if mask[slot] {
                        cov.pl_passed += 1;
                        let pl = crate::invlearn::argmax(&weak_probs[slot * c..(slot + 1) * c]);
                        if pl == truth[i] as usize {
                            cov.pl_correct += 1;
                        }
                    }
                }
            }
        }
        let mut counts = vec![0; ub];
        if cfg.use_inverse {
            let batch_k = select_k(&weak_probs, &strong_probs, c);
            let k = match (cfg.inv_k_scope, st.k_carry) {
                (KScope::Epoch, Some(k)) => k,
                _ => batch_k,
            };
            let low_conf: Vec<bool>;
            let rows = if cfg.inv_low_conf_only {
                low_conf = weak_probs
                    .chunks(c)
                    .map(|row| {
                        row.iter().copied().fold(f64::NEG_INFINITY, f64::max) < cfg.loss.tau_c
                    })
                    .collect();
                Some(low_conf.as_slice())
            } else {
                None
            };
            let (l, n) = inverse_loss(&mut g, &weak_probs, s_out.probs, k, rows)?;
            comp.inv = Some(l);
            counts = n;
            k_used = Some(batch_k);
        }
        if let Some(we) = weak_emb {
            let emb = g.concat(&[we, s_out.embedding])?;
            comp.con = Some(contrastive_loss(
                &mut g,
                emb,
                &paired_index(ub),
                cfg.loss.tau_t,
            )?);
        }
        for (slot, &i) in batch.unlabeled.iter().enumerate() {
            cov.touched[i] = true;
            cov.pl[i] |= mask[slot];
            cov.inv[i] = cov.inv[i].max(counts[slot]);
            cov.con[i] |= cfg.use_contrastive;
        }
        if st.history.is_some() {
            pl_ce = Some(pseudo_label_ce(&weak_probs, &strong_probs, c));
        }
    }

    let (total, values) = total_loss(&mut g, &comp, &cfg.loss)?;
    if !values.total.is_finite() {
        return Err(Error::Diverged {
            term: "total".into(),
            last_checkpoint: None,
        });
    }
    g.backward(total)?;
    st.model.accumulate_grads(&g, &bound);
    st.opt.step(&mut st.model.params);
    zero_grads(&mut st.model.params);

    if let (Some(t), Some(ce)) = (st.history.as_mut(), pl_ce) {
        for (&i, &l) in batch.unlabeled.iter().zip(&ce) {
            t.update(i, l)?;
        }
    }
    if let (Some(t), Some(ce)) = (st.labeled_history.as_mut(), lab_strong_ce) {
        for (&i, &l) in batch.labeled.iter().zip(&ce) {
            t.update(i, l)?;
        }
    }
    Ok(StepOutcome {
        values,
        batch_k: k_used,
    })
}

/// Runs one epoch (number `state.epoch + 1`) and returns its metrics.
pub fn train_epoch(st: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<EpochMetrics> {
    if data.labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one labelled sample".into(),
        ));
    }
    let epoch = st.epoch + 1;
    let n_unl = data.unlabeled.len();
    let schedule = epoch_schedule(cfg, data.labeled.len(), n_unl, epoch);
    let easy_frac = st.history.as_ref().map_or(0.0, |t| t.easy_fraction());
    let mut cov = Coverage {
        touched: vec![false; n_unl],
        pl: vec![false; n_unl],
        inv: vec![0; n_unl],
        con: vec![false; n_unl],
        pl_passed: 0,
        pl_correct: 0,
    };
    let mut sums = LossValues::default();
    let mut ks_used = Vec::new();
    let mut batch_ks = Vec::new();
    for (s, b) in schedule.iter().enumerate() {
        let out = train_step(st, data, cfg, epoch, s, b, &mut cov)?;
        let v = out.values;
        sums.sup += v.sup;
        sums.unsup += v.unsup;
        sums.con += v.con;
        sums.supcon += v.supcon;
        sums.inv += v.inv;
        sums.total += v.total;
        if let Some(bk) = out.batch_k {
            batch_ks.push(bk);
            ks_used.push(match (cfg.inv_k_scope, st.k_carry) {
                (KScope::Epoch, Some(k)) => k,
                _ => bk,
            });
        }
    }
    let steps = schedule.len() as f64;
    let losses = LossValues {
        sup: sums.sup / steps,
        unsup: sums.unsup / steps,
        con: sums.con / steps,
        supcon: sums.supcon / steps,
        inv: sums.inv / steps,
        total: sums.total / steps,
    };
    if cfg.inv_k_scope == KScope::Epoch {
        if let Some(&k) = batch_ks.iter().max() {
            st.k_carry = Some(k);
        }
    }

    let keep: Vec<usize> = (0..n_unl).filter(|&i| cov.touched[i]).collect();
    let util = utilization(
        &keep.iter().map(|&i| cov.pl[i]).collect::<Vec<_>>(),
        &keep.iter().map(|&i| cov.inv[i]).collect::<Vec<_>>(),
        &keep.iter().map(|&i| cov.con[i]).collect::<Vec<_>>(),
    )?;

    if let Some(t) = st.history.as_mut() {
        t.refresh_marks(epoch);
    }
    if let Some(t) = st.labeled_history.as_mut() {
        t.refresh_marks(epoch);
    }
    st.epoch = epoch;

    let eval = evaluate(&st.model, &data.test)?;
    Ok(EpochMetrics {
        epoch,
        losses,
        util,
        aha_easy_frac: easy_frac,
        inv_k_mean: (!ks_used.is_empty())
            .then(|| ks_used.iter().sum::<usize>() as f64 / ks_used.len() as f64),
        test_oa: eval.overall,
        test_macc: eval.mean,
        pl_correct_frac: (cov.pl_passed > 0).then(|| cov.pl_correct as f64 / cov.pl_passed as f64),
    })
}

/// Final summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub flags: Flags,
    pub seed: u64,
    pub epochs: u64,
    pub final_oa: f64,
    pub final_macc: f64,
    pub best_oa: f64,
    pub best_epoch: u64,
    pub mean_util_pl: f64,
    pub mean_util_any: f64,
    pub final_util_pl: f64,
    pub final_util_any: f64,
    pub final_aha_easy_frac: f64,
    pub config: TrainConfig,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn summary(&self) -> crate::metrics::RunSummary {
        crate::metrics::RunSummary {
            flags: self.flags,
            seed: self.seed,
            final_oa: self.final_oa,
            best_oa: self.best_oa,
            final_macc: self.final_macc,
        }
    }
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_{epoch:04}.amck")
}

/// Trains for `cfg.epochs` epochs, writing `metrics.csv`, periodic
/// checkpoints, `final.amck` and `report.json` into `out_dir`. With `resume`,
/// training continues after the checkpoint's epoch and metrics rows beyond
/// it are dropped.
pub fn run(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunReport> {
    data.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join(METRICS_FILE);
    let mut last_ckpt: Option<PathBuf> = None;
    let mut st = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let st = TrainState::from_checkpoint(cfg, data, &ck)?;
            truncate_metrics(&csv, st.epoch)?;
            last_ckpt = Some(p.to_path_buf());
            st
        }
        None => {
            if csv.exists() {
                fs::remove_file(&csv).map_err(|e| Error::io(&csv, e))?;
            }
            TrainState::new(cfg, data)?
        }
    };

    let mut rows: Vec<EpochMetrics> = Vec::new();
    while st.epoch < cfg.epochs {
        let m = match train_epoch(&mut st, data, cfg) {
            Ok(m) => m,
            Err(Error::Diverged { term, .. }) => {
                return Err(Error::Diverged {
                    term,
                    last_checkpoint: last_ckpt,
                })
            }
            Err(e) => return Err(e),
        };
        append_epoch_csv(&csv, std::slice::from_ref(&m))?;
        rows.push(m);
        if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
            let p = out_dir.join(checkpoint_name(st.epoch));
            st.to_checkpoint().save(&p)?;
            last_ckpt = Some(p);
        }
    }
    st.to_checkpoint().save(&out_dir.join(FINAL_CHECKPOINT))?;

    let all = crate::metrics::read_epoch_csv(&csv)?;
    let get = |r: &crate::metrics::CsvRow, k: &str| r.get(k).unwrap_or(0.0);
    let last = all
        .last()
        .ok_or_else(|| Error::Checkpoint("no epochs recorded".into()))?;
    let (best_epoch, best_oa) =
        all.iter()
            .map(|r| (r.epoch, get(r, "test_oa")))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
    let mean = |k: &str| all.iter().map(|r| get(r, k)).sum::<f64>() / all.len() as f64;
    // exact values of the final epoch when it ran in this process
    let (final_oa, final_macc) = match rows.last() {
        Some(m) => (m.test_oa, m.test_macc),
        None => (get(last, "test_oa"), get(last, "test_macc")),
    };
    let report = RunReport {
        flags: cfg.flags(),
        seed: cfg.seed,
        epochs: st.epoch,
        final_oa,
        final_macc,
        best_oa,
        best_epoch,
        mean_util_pl: mean("util_pl"),
        mean_util_any: mean("util_any"),
        final_util_pl: get(last, "util_pl"),
        final_util_any: get(last, "util_any"),
        final_aha_easy_frac: get(last, "aha_easy_frac"),
        config: cfg.clone(),
    };
    let path = out_dir.join(REPORT_FILE);
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Drops metrics rows for epochs after `epoch`.
fn truncate_metrics(csv: &Path, epoch: u64) -> Result<()> {
    if !csv.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e <= epoch);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(csv, out).map_err(|e| Error::io(csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcdata::{make_dataset, DatasetConfig};

    fn tiny_data() -> Dataset {
        make_dataset(&DatasetConfig {
            classes: 3,
            per_class: 12,
            test_per_class: 4,
            points: 16,
            labeled_fraction: 0.25,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch: 3,
            mu: 2,
            proj_dim: 8,
            aha_warmup: 1,
            checkpoint_every: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_shapes() {
        let cfg = TrainConfig {
            batch: 24,
            mu: 4,
            ..TrainConfig::desk()
        };
        let s = epoch_schedule(&cfg, 16, 784, 1);
        assert_eq!(s.len(), 9);
        for b in &s {
            assert_eq!(b.labeled.len(), 24);
            assert_eq!(b.unlabeled.len(), 96);
        }
        let mut seen = vec![false; 784];
        s.iter()
            .flat_map(|b| &b.unlabeled)
            .for_each(|&i| seen[i] = true);
        assert!(seen.iter().all(|&x| x));
        assert_ne!(epoch_schedule(&cfg, 16, 784, 2), s);
        assert_eq!(epoch_schedule(&cfg, 16, 784, 1), s);
        let sup = epoch_schedule(&cfg, 20, 0, 1);
        assert_eq!(sup.len(), 1);
        assert!(sup[0].unlabeled.is_empty());
    }

    #[test]
    fn evaluation_requires_every_class() {
        let data = tiny_data();
        let model = PointClassifier::init(Architecture::new(3, 8), 1).unwrap();
        let e = evaluate(&model, &data.test).unwrap();
        assert_eq!(e.confusion.total(), 12);
        let only0: Vec<_> = data.test.iter().filter(|s| s.label == 0).cloned().collect();
        assert!(evaluate(&model, &only0).is_err());
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn all_terms_off_leaves_only_supervised_loss() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.set_flags(Flags::ALL_OFF);
        cfg.use_unsup = false;
        let mut st = TrainState::new(&cfg, &data).unwrap();
        let m = train_epoch(&mut st, &data, &cfg).unwrap();
        assert_eq!(m.losses.total, m.losses.sup);
        assert_eq!(m.util.any, 0.0);
        assert_eq!(m.inv_k_mean, None);
    }

    #[test]
    fn full_method_covers_every_sample() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut st = TrainState::new(&cfg, &data).unwrap();
        for _ in 0..2 {
            let m = train_epoch(&mut st, &data, &cfg).unwrap();
            assert_eq!(m.util.con, 1.0);
            assert_eq!(m.util.any, 1.0);
            assert!(m.losses.total.is_finite());
            let k = m.inv_k_mean.unwrap();
            assert!((1.0..=3.0).contains(&k));
        }
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(&cfg, &data, a.path(), None).unwrap();
        let rb = run(&cfg, &data, b.path(), None).unwrap();
        assert_eq!(ra, rb);
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
        assert_eq!(
            read(a.path(), FINAL_CHECKPOINT),
            read(b.path(), FINAL_CHECKPOINT)
        );
        assert!(a.path().join(checkpoint_name(2)).exists());
        let csv = String::from_utf8(read(a.path(), METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);

        // resuming at epoch 2 rewrites epoch 3 only
        let ck = a.path().join(checkpoint_name(2));
        let r = run(&cfg, &data, b.path(), Some(&ck)).unwrap();
        assert_eq!(r.epochs, 3);
        let resumed = String::from_utf8(read(b.path(), METRICS_FILE)).unwrap();
        assert_eq!(resumed.lines().count(), 4);
        assert_eq!(
            resumed.lines().take(3).collect::<Vec<_>>(),
            csv.lines().take(3).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_restores_state() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut st = TrainState::new(&cfg, &data).unwrap();
        train_epoch(&mut st, &data, &cfg).unwrap();
        let ck = Checkpoint::decode(&st.to_checkpoint().encode().unwrap()).unwrap();
        let back = TrainState::from_checkpoint(&cfg, &data, &ck).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.opt.velocity().len(), st.opt.velocity().len());
        let (h0, _, m0) = st.history.as_ref().unwrap().export();
        let (h1, _, m1) = back.history.as_ref().unwrap().export();
        assert_eq!(m0, m1);
        for (x, y) in h0.iter().zip(&h1) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let data = tiny_data();
        let cfg = TrainConfig {
            batch: 0,
            ..tiny_cfg()
        };
        assert!(matches!(
            TrainState::new(&cfg, &data),
            Err(Error::Config(_))
        ));
        let cfg = TrainConfig {
            aha_kappa: 0.0,
            ..tiny_cfg()
        };
        assert!(matches!(
            TrainState::new(&cfg, &data),
            Err(Error::Config(_))
        ));
    }
}

//! Loss terms: supervised cross-entropy, confidence-masked pseudo-label loss,
//! inverse (top-k complement) loss, NT-Xent, supervised contrastive loss and
//! their weighted total.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated; inputs that
//! only select targets or masks (weak-view probabilities) are passed as plain
//! slices and carry no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::invlearn::{argmax, ranks};

/// Added to the self-similarity entries before the row log-sum-exp so they
/// vanish from the denominator.
const SELF_MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Supervised contrastive weight.
    pub alpha: f64,
    /// Unsupervised contrastive weight.
    pub beta: f64,
    /// Inverse-learning weight.
    pub gamma: f64,
    /// Pseudo-label loss weight.
    pub omega_u: f64,
    /// Confidence threshold for pseudo-labels.
    pub tau_c: f64,
    /// Contrastive temperature.
    pub tau_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta: 0.2,
            gamma: 1.0,
            omega_u: 1.0,
            tau_c: 0.95,
            tau_t: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.gamma", self.gamma),
            ("loss.omega_u", self.omega_u),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(self.tau_c > 0.0 && self.tau_c <= 1.0) {
            return Err(Error::Config(format!(
                "loss.tau_c must lie in (0, 1], got {}",
                self.tau_c
            )));
        }
        if !(self.tau_t > 0.0 && self.tau_t.is_finite()) {
            return Err(Error::Config(format!(
                "loss.tau_t must be > 0, got {}",
                self.tau_t
            )));
        }
        Ok(())
    }
}

fn rows_cols(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `-sum_i weight_i * log softmax(logits)_i[target_i]`.
fn weighted_ce(g: &mut Graph, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let (r, c) = rows_cols(g, logits, "cross_entropy")?;
    let mut w = vec![0.0; r * c];
    for (i, (&t, &wi)) in targets.iter().zip(weights).enumerate() {
        w[i * c + t] = -wi;
    }
    let p = g.softmax_rows(logits)?;
    let lp = g.log(p);
    let wv = g.constant(Tensor::matrix(r, c, w)?);
    let terms = g.mul(lp, wv)?;
    Ok(g.sum(terms))
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn sup_loss(g: &mut Graph, logits: Var, labels: &[u32]) -> Result<Var> {
    let (r, c) = rows_cols(g, logits, "sup_loss")?;
    if r == 0 || labels.len() != r {
        return Err(Error::InvalidArgument(format!(
            "sup_loss needs one label per row: {} labels for {r} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} >= classes {c}"
        )));
    }
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    weighted_ce(g, logits, &targets, &vec![1.0 / r as f64; r])
}

/// Pseudo-label loss: rows whose weak confidence reaches `tau_c` are trained
/// toward their weak argmax on the strong view. Returns the loss (averaged
/// over all rows, masked or not) and the mask.
pub fn unsup_loss(
    g: &mut Graph,
    weak_probs: &[f64],
    strong_logits: Var,
    tau_c: f64,
) -> Result<(Var, Vec<bool>)> {
    let (r, c) = rows_cols(g, strong_logits, "unsup_loss")?;
    if weak_probs.len() != r * c {
        return Err(Error::shape(
            "unsup_loss",
            format!("weak probs {} vs strong {r}x{c}", weak_probs.len()),
        ));
    }
    let mut targets = Vec::with_capacity(r);
    let mut mask = Vec::with_capacity(r);
    for row in weak_probs.chunks(c) {
        let t = argmax(row);
        targets.push(t);
        mask.push(row[t] >= tau_c);
    }
    let weights: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / r as f64 } else { 0.0 })
        .collect();
    Ok((weighted_ce(g, strong_logits, &targets, &weights)?, mask))
}

/// Per-row cross-entropy of strong probabilities against weak-view
/// pseudo-labels, as plain values.
pub fn pseudo_label_ce(weak_probs: &[f64], strong_probs: &[f64], classes: usize) -> Vec<f64> {
    weak_probs
        .chunks(classes)
        .zip(strong_probs.chunks(classes))
        .map(|(w, s)| -crate::graph::floored_ln(s[argmax(w)]))
        .collect()
}

/// Inverse learning: for each row, classes ranked below `k` on the weak view
/// are pushed toward zero probability on the strong view via
/// `-log(1 - p)`. `rows` optionally restricts which rows take part.
/// Returns the loss (mean over all rows) and the number of penalised classes
/// per row.
pub fn inverse_loss(
    g: &mut Graph,
    weak_probs: &[f64],
    strong_probs: Var,
    k: usize,
    rows: Option<&[bool]>,
) -> Result<(Var, Vec<usize>)> {
    let (r, c) = rows_cols(g, strong_probs, "inverse_loss")?;
    if weak_probs.len() != r * c || r == 0 {
        return Err(Error::shape(
            "inverse_loss",
            format!("weak probs {} vs strong {r}x{c}", weak_probs.len()),
        ));
    }
    if !(1..=c).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..={c}, got {k}"
        )));
    }
    let mut w = vec![0.0; r * c];
    let mut counts = vec![0; r];
    for (i, row) in weak_probs.chunks(c).enumerate() {
        if rows.is_some_and(|m| !m[i]) {
            continue;
        }
        for (cls, rank) in ranks(row).into_iter().enumerate() {
            if rank > k {
                w[i * c + cls] = -1.0 / r as f64;
                counts[i] += 1;
            }
        }
    }
    let neg = g.scale(strong_probs, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let logs = g.log(one_minus);
    let wv = g.constant(Tensor::matrix(r, c, w)?);
    let terms = g.mul(logs, wv)?;
    Ok((g.sum(terms), counts))
}

/// Scaled similarity matrix and its per-row log-sum-exp over `k != i`.
fn similarity_lse(g: &mut Graph, emb: Var, tau_t: f64) -> Result<(Var, Var, usize)> {
    let (n, _) = rows_cols(g, emb, "contrastive")?;
    let et = g.transpose(emb)?;
    let dots = g.matmul(emb, et)?;
    let sim = g.scale(dots, 1.0 / tau_t);
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = SELF_MASK;
    }
    let dv = g.constant(Tensor::matrix(n, n, diag)?);
    let masked = g.add(sim, dv)?;
    let rowmax = g.max_axis(masked, 1)?;
    let rowmax = g.reshape(rowmax, vec![n, 1])?;
    let shifted = g.sub(masked, rowmax)?;
    let e = g.exp(shifted);
    let s = g.sum_axis(e, 1)?;
    let s = g.reshape(s, vec![n, 1])?;
    let ls = g.log(s);
    let lse = g.add(ls, rowmax)?;
    Ok((sim, lse, n))
}

/// Partner index for `2 * half` views laid out as `[first views; second views]`.
pub fn paired_index(half: usize) -> Vec<usize> {
    (0..2 * half).map(|i| (i + half) % (2 * half)).collect()
}

/// NT-Xent over L2-normalised embeddings: the mean over anchors of
/// `-log(exp(s_{i,pair(i)}) / sum_{k != i} exp(s_{ik}))`, `s = z_i . z_k / tau_t`.
pub fn contrastive_loss(g: &mut Graph, emb: Var, pairs: &[usize], tau_t: f64) -> Result<Var> {
    let (n, _) = rows_cols(g, emb, "contrastive_loss")?;
    if n < 2 || pairs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "contrastive_loss needs at least one pair and one partner per row ({n} rows, {} pairs)",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .enumerate()
        .any(|(i, &p)| p >= n || p == i || pairs[p] != i)
    {
        return Err(Error::InvalidArgument(
            "pairing must be a fixed-point-free involution".into(),
        ));
    }
    let (sim, lse, n) = similarity_lse(g, emb, tau_t)?;
    let mut pick = vec![0.0; n * n];
    for (i, &p) in pairs.iter().enumerate() {
        pick[i * n + p] = 1.0;
    }
    let pv = g.constant(Tensor::matrix(n, n, pick)?);
    let chosen = g.mul(sim, pv)?;
    let pos = g.sum_axis(chosen, 1)?;
    let pos = g.reshape(pos, vec![n, 1])?;
    let per_anchor = g.sub(lse, pos)?;
    g.mean(per_anchor)
}

/// Supervised contrastive loss summed over anchors: each anchor averages
/// `-log softmax` similarity over the other views sharing its label.
pub fn supcon_loss(
    g: &mut Graph,
    emb: Var,
    labels: &[u32],
    classes: usize,
    tau_t: f64,
) -> Result<Var> {
    let (n, _) = rows_cols(g, emb, "supcon_loss")?;
    if n < 2 || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "supcon_loss needs one label per view ({} labels, {n} views)",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} >= classes {classes}"
        )));
    }
    let (sim, lse, n) = similarity_lse(g, emb, tau_t)?;
    let mut w = vec![0.0; n * n];
    let mut has_pos = vec![0.0; n];
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        has_pos[i] = 1.0;
        for j in &pos {
            w[i * n + j] = 1.0 / pos.len() as f64;
        }
    }
    let wv = g.constant(Tensor::matrix(n, n, w)?);
    let weighted = g.mul(sim, wv)?;
    let pos = g.sum_axis(weighted, 1)?;
    let pos = g.reshape(pos, vec![n, 1])?;
    let per_anchor = g.sub(lse, pos)?;
    let mv = g.constant(Tensor::matrix(n, 1, has_pos)?);
    let kept = g.mul(per_anchor, mv)?;
    Ok(g.sum(kept))
}

/// Loss nodes; `None` marks a disabled term.
#[derive(Debug, Clone, Copy)]
pub struct Components {
    pub sup: Var,
    pub unsup: Option<Var>,
    pub supcon: Option<Var>,
    pub con: Option<Var>,
    pub inv: Option<Var>,
}

/// Scalar values of each term (0 when disabled) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub sup: f64,
    pub unsup: f64,
    pub con: f64,
    pub supcon: f64,
    pub inv: f64,
    pub total: f64,
}

/// Per-step loss breakdown plus the per-sample masks behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub values: LossValues,
    /// Unlabelled rows that passed the confidence threshold.
    pub pl_mask: Vec<bool>,
    /// Number of inverse-penalised classes per unlabelled row.
    pub inv_class_counts: Vec<usize>,
}

/// `sup + omega_u*unsup + alpha*supcon + beta*con + gamma*inv`, skipping
/// disabled terms. Fails with [`Error::Diverged`] naming the first non-finite
/// term.
pub fn total_loss(g: &mut Graph, c: &Components, w: &LossWeights) -> Result<(Var, LossValues)> {
    let mut vals = LossValues::default();
    let terms: [(&str, Option<Var>, f64, &mut f64); 5] = [
        ("sup", Some(c.sup), 1.0, &mut vals.sup),
        ("unsup", c.unsup, w.omega_u, &mut vals.unsup),
        ("supcon", c.supcon, w.alpha, &mut vals.supcon),
        ("con", c.con, w.beta, &mut vals.con),
        ("inv", c.inv, w.gamma, &mut vals.inv),
    ];
    let mut total: Option<Var> = None;
    for (name, var, weight, slot) in terms {
        let Some(v) = var else { continue };
        let x = g.item(v);
        if !x.is_finite() {
            return Err(Error::Diverged {
                term: name.to_string(),
                last_checkpoint: None,
            });
        }
        *slot = x;
        let scaled = if name == "sup" { v } else { g.scale(v, weight) };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = total.expect("sup is always present");
    vals.total = g.item(total);
    if !vals.total.is_finite() {
        return Err(Error::Diverged {
            term: "total".into(),
            last_checkpoint: None,
        });
    }
    Ok((total, vals))
}

//! Instance branch and critical-instance attention pooling.
//!
//! The instance branch aligns each instance (`GELU(h W_a + b_a)`) and scores
//! it with a linear classifier. Its strongest instance becomes the query for
//! pooling: `Q_i = tanh(W_q h_i)`, `alpha = softmax(Q · Q_crit / sqrt(d_q))`,
//! `B = sum_i alpha_i h_i`.

use rand::Rng;

use crate::diffmath::{
    init_linear, init_uniform, softmax_row, GradTape, ParamId, ParamStore, Tensor2, Var,
};
use crate::error::{Error, Result};

/// Default share of a positive bag's instances pseudo-labelled positive.
pub const DEFAULT_K_FRAC: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceBranchParams {
    pub align_w: ParamId,
    pub align_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl InstanceBranchParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        align_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (align_w, align_b) = init_linear(store, "instance.align", feature_dim, align_dim, rng)?;
        let (cls_w, cls_b) = init_linear(store, "instance.classifier", align_dim, classes, rng)?;
        Ok(Self {
            align_w,
            align_b,
            cls_w,
            cls_b,
        })
    }
}

/// K×C instance logits for K×d `features`.
pub fn instance_logits(
    tape: &mut GradTape,
    p: &InstanceBranchParams,
    features: Var,
) -> Result<Var> {
    let (aw, ab, cw, cb) = (
        tape.param(p.align_w),
        tape.param(p.align_b),
        tape.param(p.cls_w),
        tape.param(p.cls_b),
    );
    let aligned = tape.affine(features, aw, ab)?;
    let aligned = tape.gelu(aligned);
    tape.affine(aligned, cw, cb)
}

/// Per-instance softmax probability of `class`.
pub fn class_scores(logits: &Tensor2, class: usize) -> Result<Vec<f64>> {
    if class >= logits.cols() {
        return Err(Error::Domain(format!(
            "class {class} out of range for {} logits",
            logits.cols()
        )));
    }
    (0..logits.rows())
        .map(|r| softmax_row(logits.row(r)).map(|p| p[class]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub top_k: usize,
}

/// `max(1, ceil(k_frac * K))`.
pub fn top_k_count(instances: usize, k_frac: f64) -> usize {
    // The small offset keeps products like 0.4 * 5 from rounding up.
    (((k_frac * instances as f64) - 1e-9).ceil().max(1.0) as usize).min(instances)
}

/// Negative bags: every instance 0. Otherwise the `top_k` instances with the
/// highest score get the bag label, the rest 0. Ties go to the lower index.
pub fn pseudo_labels_from_scores(scores: &[f64], bag_label: usize, k_frac: f64) -> PseudoLabels {
    let k = scores.len();
    if bag_label == 0 || k == 0 {
        return PseudoLabels {
            labels: vec![0; k],
            top_k: 0,
        };
    }
    let top_k = top_k_count(k, k_frac);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![0; k];
    for &i in &order[..top_k] {
        labels[i] = bag_label;
    }
    PseudoLabels { labels, top_k }
}

/// Pseudo-labels ranked by the predicted probability of the bag's class.
pub fn assign_pseudo_labels(
    logits: &Tensor2,
    bag_label: usize,
    k_frac: f64,
) -> Result<PseudoLabels> {
    if bag_label == 0 {
        return Ok(PseudoLabels {
            labels: vec![0; logits.rows()],
            top_k: 0,
        });
    }
    let scores = class_scores(logits, bag_label)?;
    Ok(pseudo_labels_from_scores(&scores, bag_label, k_frac))
}

/// Mean cross-entropy of instance logits against pseudo-labels.
pub fn instance_loss(tape: &mut GradTape, logits: Var, pseudo: &PseudoLabels) -> Result<Var> {
    tape.cross_entropy(logits, &pseudo.labels)
}

/// Index of the critical instance. Binary: highest positive-class
/// probability. Multiclass: highest single logit in the row. Ties go to the
/// lowest index.
pub fn critical_index(logits: &Tensor2) -> Result<usize> {
    if logits.rows() == 0 {
        return Err(Error::Domain("critical instance of an empty bag".into()));
    }
    let scores: Vec<f64> = if logits.cols() == 2 {
        class_scores(logits, 1)?
    } else {
        (0..logits.rows())
            .map(|r| {
                logits
                    .row(r)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    };
    Ok(argmax_first(&scores))
}

/// Critical index and that instance's feature row.
pub fn select_critical(logits: &Tensor2, features: &Tensor2) -> Result<(usize, Vec<f64>)> {
    if logits.rows() != features.rows() {
        return Err(Error::dim(format!(
            "{} logit rows for {} instances",
            logits.rows(),
            features.rows()
        )));
    }
    let j = critical_index(logits)?;
    Ok((j, features.row(j).to_vec()))
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolingParams {
    pub query: ParamId,
    pub query_dim: usize,
}

impl PoolingParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let query = init_uniform(store, "pool.query.w", feature_dim, query_dim, bound, rng)?;
        Ok(Self { query, query_dim })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// 1×d bag representation.
    pub bag: Var,
    /// 1×K attention weights.
    pub alpha: Var,
}

pub fn attention_pool(
    tape: &mut GradTape,
    p: &PoolingParams,
    features: Var,
    critical: usize,
) -> Result<Pooled> {
    let wq = tape.param(p.query);
    let projected = tape.matmul(features, wq)?;
    let queries = tape.tanh(projected);
    let crit = tape.select_rows(queries, &[critical])?;
    let crit_t = tape.transpose(crit);
    let scores = tape.matmul(queries, crit_t)?;
    let scores = tape.scale(scores, 1.0 / (p.query_dim as f64).sqrt());
    let scores = tape.transpose(scores);
    let alpha = tape.softmax_rows(scores);
    let bag = tape.matmul(alpha, features)?;
    Ok(Pooled { bag, alpha })
}

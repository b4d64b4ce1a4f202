//! Training loop: seeded per-epoch shuffles, windows of `accumulation_steps`
//! bags per optimizer step (`survival_window` for Cox training), Adam with
//! decoupled weight decay under a cosine schedule, and early stopping on the
//! validation score (AUC, or C-index for survival models).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagio::{Cohort, FeatureBag, Split};
use crate::diffmath::{Adam, AdamConfig, CosineSchedule, Grads, Mode, ParamStore};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    self, assemble_report, attribute_bag, BagAttribution, EvalReport, PredictionRecord,
};
use crate::objectives::{window_objective, LossParts, LossWeights};
use crate::scmgraph::{CausalMil, GraphVariant, ModelConfig};

// Separates the shuffle/dropout stream from parameter initialization.
const TRAIN_STREAM: u64 = 0x7261_696e;

/// Validation scores closer than this count as ties. A tie never resets
/// patience, but the snapshot moves to the tied epoch if its validation loss
/// is lower.
pub const SCORE_TIE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub accumulation_steps: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub variant: GraphVariant,
    pub hidden_dim: usize,
    pub query_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub k_frac: f64,
    pub sigma_unc: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
    /// Train a single risk output with the Cox criterion.
    pub survival: bool,
    /// Bags per optimizer step in survival mode; each window is also the
    /// Cox risk set.
    pub survival_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        Self {
            epochs: 50,
            accumulation_steps: 4,
            patience: 10,
            dropout: m.dropout,
            seed: 0,
            weights: LossWeights::default(),
            variant: m.variant,
            hidden_dim: m.hidden_dim,
            query_dim: m.query_dim,
            heads: m.heads,
            layers: m.layers,
            k_frac: m.k_frac,
            sigma_unc: m.sigma_unc,
            lr: a.base_lr,
            weight_decay: a.weight_decay,
            eta_min: CosineSchedule::DEFAULT_ETA_MIN,
            survival: false,
            survival_window: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config(
                "accumulation_steps must be at least 1".into(),
            ));
        }
        if self.survival_window == 0 {
            return Err(Error::Config("survival_window must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn model_config(&self, feature_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            classes,
            hidden_dim: self.hidden_dim,
            query_dim: self.query_dim,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            k_frac: self.k_frac,
            sigma_unc: self.sigma_unc,
            variant: self.variant,
            survival: self.survival,
        }
    }

    /// Bags per optimizer step.
    pub fn window(&self) -> usize {
        if self.survival {
            self.survival_window
        } else {
            self.accumulation_steps
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_c_index: Option<f64>,
    /// Score used for early stopping.
    pub val_score: f64,
    pub improved: bool,
    /// This epoch's parameters became the retained snapshot.
    pub snapshot: bool,
    /// Elapsed time; kept out of the JSON log so logs stay reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: CausalMil,
    pub log: Vec<TrainLogRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean window loss over `bags` without touching gradients.
fn split_loss(
    model: &CausalMil,
    bags: &[&FeatureBag],
    cfg: &TrainConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let mut total = LossParts::default();
    for window in bags.chunks(cfg.window()) {
        let parts = window_objective(
            &model.arch,
            &model.params,
            window,
            &cfg.weights,
            mode,
            rng,
            None,
        )?;
        total.add_weighted(&parts, window.len() as f64 / bags.len() as f64);
    }
    Ok(total)
}

/// Called with the model and optimizer gradient before every step; returns
/// the gradient actually applied. Lets tests substitute a synthetic one.
pub type GradientHook<'a> = dyn FnMut(&ParamStore, Grads) -> Grads + 'a;

pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(cohort, cfg, None)
}

pub fn train_with_hook(
    cohort: &Cohort,
    cfg: &TrainConfig,
    mut hook: Option<&mut GradientHook>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let train_bags = cohort.split_bags(Split::Train);
    let val_bags = cohort.split_bags(Split::Val);
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    if cfg.survival && !cohort.has_survival() {
        return Err(Error::Config(
            "survival training needs a survival record on every bag".into(),
        ));
    }
    let feature_dim = cohort.feature_dim().expect("non-empty cohort");
    let mut model = CausalMil::new(&cfg.model_config(feature_dim, cohort.class_count), cfg.seed)?;
    model.set_neutral_from(train_bags.iter().copied());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut adam = Adam::new(cfg.adam(), &model.params);
    let schedule = CosineSchedule::new(cfg.lr, cfg.eta_min.min(cfg.lr), cfg.epochs as f64)?;
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch as f64);
        order.shuffle(&mut rng);
        let mut train_parts = LossParts::default();
        for window in order.chunks(cfg.window()) {
            let bags: Vec<&FeatureBag> = window.iter().map(|&i| train_bags[i]).collect();
            let mut grads = Grads::zeros_like(&model.params);
            let parts = window_objective(
                &model.arch,
                &model.params,
                &bags,
                &cfg.weights,
                Mode::Train,
                &mut rng,
                Some(&mut grads),
            )?;
            if !grads.is_finite() {
                let ids: Vec<&str> = bags.iter().map(|b| b.bag_id.as_str()).collect();
                log::error!(
                    "non-finite gradient in window {ids:?} at epoch {}",
                    epoch + 1
                );
                return Err(Error::Numeric(format!(
                    "non-finite gradient in window {ids:?}"
                )));
            }
            if let Some(h) = hook.as_deref_mut() {
                grads = h(&model.params, grads);
            }
            adam.step(&mut model.params, &grads, lr)?;
            train_parts.add_weighted(&parts, bags.len() as f64 / train_bags.len() as f64);
        }

        let val_loss = split_loss(&model, &val_bags, cfg, Mode::Eval, &mut rng)?;
        let records = predict_records(&model, &val_bags)?;
        let report = assemble_report(&records, cohort.class_count, &[])?;
        let score = if cfg.survival {
            report.c_index
        } else {
            report.auc
        }
        .unwrap_or(-val_loss.total);
        let improved = score > best.0 + SCORE_TIE;
        let tie_break = !improved && score >= best.0 - SCORE_TIE && val_loss.total < best_loss;
        if improved || tie_break {
            best = (score.max(best.0), epoch + 1, model.params.clone());
            best_loss = val_loss.total;
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
        }
        let record = TrainLogRecord {
            epoch: epoch + 1,
            lr,
            train: train_parts,
            val: val_loss,
            val_acc: report.acc,
            val_auc: report.auc,
            val_f1: report.f1,
            val_c_index: report.c_index,
            val_score: score,
            improved,
            snapshot: improved || tie_break,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.3e} train {:.4} val {:.4} score {:.4}{}",
            record.epoch,
            lr,
            train_parts.total,
            val_loss.total,
            score,
            if improved {
                " *"
            } else if tie_break {
                " ="
            } else {
                ""
            }
        );
        log.push(record);
        if stale >= cfg.patience {
            break;
        }
    }

    let (best_score, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_score,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn predict_records(model: &CausalMil, bags: &[&FeatureBag]) -> Result<Vec<PredictionRecord>> {
    bags.iter()
        .map(|b| predict_record(model, b).map(|(r, _)| r))
        .collect()
}

fn predict_record(
    model: &CausalMil,
    bag: &FeatureBag,
) -> Result<(PredictionRecord, crate::scmgraph::BagPrediction)> {
    let pred = model.predict(bag)?;
    let [gender, race, age_bin] = evalmetrics::demographic_groups(&bag.demographics);
    let pred_label = if pred.probs.is_empty() {
        0
    } else {
        crate::milnet::argmax_first(&pred.probs)
    };
    let record = PredictionRecord {
        bag_id: bag.bag_id.clone(),
        true_label: bag.bag_label,
        pred_label,
        probs: pred.probs.clone(),
        gender,
        race,
        age_bin,
        risk: pred.risk,
        time: bag.survival.map(|s| s.time),
        event: bag.survival.map(|s| s.event),
    };
    Ok((record, pred))
}

/// Everything produced by evaluating one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<PredictionRecord>,
    pub attributions: Vec<BagAttribution>,
    /// Per bag: id and pooling weights.
    pub attention: Vec<(String, Vec<f64>)>,
}

/// Eval-mode predictions, attributions and report for one split.
pub fn evaluate(model: &CausalMil, cohort: &Cohort, split: Split) -> Result<Evaluation> {
    let bags = cohort.split_bags(split);
    if bags.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let mut records = Vec::with_capacity(bags.len());
    let mut attributions = Vec::with_capacity(bags.len());
    let mut attention = Vec::with_capacity(bags.len());
    for bag in bags {
        let (record, pred) = predict_record(model, bag)?;
        attributions.push(attribute_bag(model, &bag.bag_id, &pred)?);
        attention.push((bag.bag_id.clone(), pred.alpha));
        records.push(record);
    }
    let report = assemble_report(&records, cohort.class_count, &attributions)?;
    Ok(Evaluation {
        report,
        records,
        attributions,
        attention,
    })
}

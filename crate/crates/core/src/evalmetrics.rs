//! Classification, fairness, attribution and survival metrics.
//!
//! Metrics that can be undefined on a given split (AUC with one class,
//! C-index without comparable pairs, GDV without observed groups) return
//! `None`, serialized as `null`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bagio::{age_bin, Attribute, DemographicVector, DEMO_DIM};
use crate::error::{Error, Result};
use crate::scmgraph::{BagPrediction, CausalMil};

/// Mann-Whitney AUC: the share of (positive, negative) pairs ranked
/// correctly, ties counting one half. `None` unless both classes occur.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        positive.len(),
        "scores and labels differ in length"
    );
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tied blocks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary AUC on the positive-class probability, or the macro one-vs-rest
/// mean over classes with both outcomes present.
pub fn auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<f64> {
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&scores, &pos);
    }
    let per_class: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_binary(&scores, &pos)
        })
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

fn f1_for(pred: &[usize], truth: &[usize], c: usize) -> f64 {
    let tp = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p == c && t == c)
        .count() as f64;
    let fp = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p == c && t != c)
        .count() as f64;
    let fn_ = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p != c && t == c)
        .count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Positive-class F1 for two classes, macro F1 otherwise.
pub fn f1(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    if classes == 2 {
        return f1_for(pred, truth, 1);
    }
    (0..classes).map(|c| f1_for(pred, truth, c)).sum::<f64>() / classes as f64
}

/// Population standard deviation of group accuracies.
pub fn gdv(group_accuracies: &[f64]) -> f64 {
    if group_accuracies.is_empty() {
        return 0.0;
    }
    // Centering on the first value keeps equal accuracies at exactly 0.
    let n = group_accuracies.len() as f64;
    let base = group_accuracies[0];
    let shifted: Vec<f64> = group_accuracies.iter().map(|a| a - base).collect();
    let mean = shifted.iter().sum::<f64>() / n;
    (shifted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Harrell's C over pairs with `t_i < t_j` and an event at `i`; risk ties
/// count one half. `None` without comparable pairs.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let mut concordant = 0.0;
    let mut pairs = 0usize;
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risks.len() {
            if times[i] < times[j] {
                pairs += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| concordant / pairs as f64)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `||Z(X, U) - Z(X, U = 0)||`.
pub fn attribution_total(model: &CausalMil, pred: &BagPrediction) -> Result<f64> {
    let z0 = model.intervene(&pred.bag_repr, &[0.0; DEMO_DIM])?;
    Ok(l2(&pred.z, &z0))
}

/// `||Z(X, U) - Z(X, U_-j)||` where attribute `j` (0 gender, 1 race, 2 age)
/// is set to its neutral value.
pub fn attribution_factor(model: &CausalMil, pred: &BagPrediction, j: usize) -> Result<f64> {
    let attr = *Attribute::ALL.get(j).ok_or_else(|| {
        Error::Domain(format!(
            "attribute index {j} is not one of gender, race, age"
        ))
    })?;
    let z = model.intervene(&pred.bag_repr, &model.neutralize(&pred.u_final, attr))?;
    Ok(l2(&pred.z, &z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagAttribution {
    pub bag_id: String,
    pub total: f64,
    pub gender: f64,
    pub race: f64,
    pub age: f64,
}

pub fn attribute_bag(
    model: &CausalMil,
    bag_id: &str,
    pred: &BagPrediction,
) -> Result<BagAttribution> {
    Ok(BagAttribution {
        bag_id: bag_id.to_string(),
        total: attribution_total(model, pred)?,
        gender: attribution_factor(model, pred, 0)?,
        race: attribution_factor(model, pred, 1)?,
        age: attribution_factor(model, pred, 2)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub bag_id: String,
    pub true_label: usize,
    /// Argmax class; 0 for survival models.
    pub pred_label: usize,
    pub probs: Vec<f64>,
    pub gender: Option<usize>,
    pub race: Option<usize>,
    pub age_bin: Option<usize>,
    pub risk: Option<f64>,
    pub time: Option<f64>,
    pub event: Option<bool>,
}

impl PredictionRecord {
    pub fn group(&self, attr: Attribute) -> Option<usize> {
        match attr {
            Attribute::Gender => self.gender,
            Attribute::Race => self.race,
            Attribute::Age => self.age_bin,
        }
    }
}

pub fn demographic_groups(u: &DemographicVector) -> [Option<usize>; 3] {
    [
        u.group(Attribute::Gender),
        u.group(Attribute::Race),
        u.is_observed(Attribute::Age).then(|| age_bin(u.values[7])),
    ]
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with header `bag_id,true,pred,p0..p{C-1},gender,race,age_bin,risk,time,event`.
/// Empty cells mean "not observed" or "not applicable".
pub fn predictions_csv(records: &[PredictionRecord], classes: usize) -> Result<String> {
    let mut out = String::from("bag_id,true,pred");
    for c in 0..classes {
        let _ = write!(out, ",p{c}");
    }
    out.push_str(",gender,race,age_bin,risk,time,event\n");
    for r in records {
        if r.bag_id.contains([',', '"', '\n']) {
            return Err(Error::Config(format!(
                "bag id {:?} cannot be written to CSV",
                r.bag_id
            )));
        }
        let _ = write!(out, "{},{},{}", r.bag_id, r.true_label, r.pred_label);
        for c in 0..classes {
            let _ = write!(out, ",{}", opt(r.probs.get(c)));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            opt(r.gender),
            opt(r.race),
            opt(r.age_bin),
            opt(r.risk),
            opt(r.time),
            opt(r.event.map(u8::from))
        );
    }
    Ok(out)
}

pub fn parse_predictions_csv(text: &str) -> Result<(Vec<PredictionRecord>, usize)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("empty predictions CSV".into()))?
        .split(',')
        .collect();
    let classes = header
        .iter()
        .filter(|h| h.starts_with('p') && h[1..].parse::<usize>().is_ok())
        .count();
    if header.len() != 3 + classes + 6 {
        return Err(Error::Config("unexpected predictions CSV header".into()));
    }
    fn cell<T: std::str::FromStr>(s: &str, line: usize) -> Result<Option<T>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad cell {s:?} on line {line}")))
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let ln = n + 2;
        if f.len() != header.len() {
            return Err(Error::Config(format!("line {ln} has {} cells", f.len())));
        }
        let need = |v: Option<usize>| {
            v.ok_or_else(|| Error::Config(format!("missing label on line {ln}")))
        };
        let probs = f[3..3 + classes]
            .iter()
            .map(|s| cell::<f64>(s, ln))
            .collect::<Result<Vec<_>>>()?;
        let rest = &f[3 + classes..];
        records.push(PredictionRecord {
            bag_id: f[0].to_string(),
            true_label: need(cell(f[1], ln)?)?,
            pred_label: need(cell(f[2], ln)?)?,
            probs: probs.into_iter().flatten().collect(),
            gender: cell(rest[0], ln)?,
            race: cell(rest[1], ln)?,
            age_bin: cell(rest[2], ln)?,
            risk: cell(rest[3], ln)?,
            time: cell(rest[4], ln)?,
            event: cell::<u8>(rest[5], ln)?.map(|e| e == 1),
        });
    }
    Ok((records, classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy per observed group of `attr`, optionally restricted to bags whose
/// true label is positive (nonzero). Empty groups are omitted.
pub fn group_accuracies(
    records: &[PredictionRecord],
    attr: Attribute,
    positives_only: bool,
) -> Vec<GroupAccuracy> {
    (0..attr.group_count())
        .filter_map(|g| {
            let members: Vec<&PredictionRecord> = records
                .iter()
                .filter(|r| r.group(attr) == Some(g) && (!positives_only || r.true_label != 0))
                .collect();
            (!members.is_empty()).then(|| GroupAccuracy {
                group: attr.group_name(g).to_string(),
                n: members.len(),
                accuracy: members
                    .iter()
                    .filter(|r| r.pred_label == r.true_label)
                    .count() as f64
                    / members.len() as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub mean_total: f64,
    pub mean_gender: f64,
    pub mean_race: f64,
    pub mean_age: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_bags: usize,
    pub classes: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    /// GDV per attribute on positive samples (all samples when C > 2).
    pub gdv: BTreeMap<String, Option<f64>>,
    /// GDV per attribute over every sample.
    pub gdv_all_samples: BTreeMap<String, Option<f64>>,
    pub group_accuracy: BTreeMap<String, Vec<GroupAccuracy>>,
    pub attribution: Option<AttributionSummary>,
    pub c_index: Option<f64>,
}

pub fn assemble_report(
    records: &[PredictionRecord],
    classes: usize,
    attributions: &[BagAttribution],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Domain("cannot report on zero predictions".into()));
    }
    let classified = records.iter().all(|r| r.probs.len() == classes);
    let truth: Vec<usize> = records.iter().map(|r| r.true_label).collect();
    let pred: Vec<usize> = records.iter().map(|r| r.pred_label).collect();
    let (acc, auc_v, f1_v) = if classified {
        let probs: Vec<Vec<f64>> = records.iter().map(|r| r.probs.clone()).collect();
        (
            Some(accuracy(&pred, &truth)),
            auc(&probs, &truth, classes),
            Some(f1(&pred, &truth, classes)),
        )
    } else {
        (None, None, None)
    };

    let mut gdv_pos = BTreeMap::new();
    let mut gdv_all = BTreeMap::new();
    let mut tables = BTreeMap::new();
    for attr in Attribute::ALL {
        let default_rows = group_accuracies(records, attr, classified && classes == 2);
        let all_rows = group_accuracies(records, attr, false);
        let value = |rows: &[GroupAccuracy]| {
            (classified && !rows.is_empty())
                .then(|| gdv(&rows.iter().map(|g| g.accuracy).collect::<Vec<_>>()))
        };
        gdv_pos.insert(attr.name().to_string(), value(&default_rows));
        gdv_all.insert(attr.name().to_string(), value(&all_rows));
        tables.insert(attr.name().to_string(), default_rows);
    }

    let attribution = (!attributions.is_empty()).then(|| {
        let n = attributions.len() as f64;
        AttributionSummary {
            mean_total: attributions.iter().map(|a| a.total).sum::<f64>() / n,
            mean_gender: attributions.iter().map(|a| a.gender).sum::<f64>() / n,
            mean_race: attributions.iter().map(|a| a.race).sum::<f64>() / n,
            mean_age: attributions.iter().map(|a| a.age).sum::<f64>() / n,
        }
    });

    let c = if records
        .iter()
        .all(|r| r.risk.is_some() && r.time.is_some() && r.event.is_some())
    {
        let risks: Vec<f64> = records.iter().map(|r| r.risk.unwrap()).collect();
        let times: Vec<f64> = records.iter().map(|r| r.time.unwrap()).collect();
        let events: Vec<bool> = records.iter().map(|r| r.event.unwrap()).collect();
        c_index(&risks, &times, &events)
    } else {
        None
    };

    Ok(EvalReport {
        n_bags: records.len(),
        classes,
        acc,
        auc: auc_v,
        f1: f1_v,
        gdv: gdv_pos,
        gdv_all_samples: gdv_all,
        group_accuracy: tables,
        attribution,
        c_index: c,
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

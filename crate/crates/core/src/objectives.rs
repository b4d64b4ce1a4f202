//! Loss terms and the per-window training objective.
//!
//! `L_total = L_cls + lambda_causal * L_causal + lambda_fair * L_fair`, with
//! `L_cls = CE(bag) + lambda_ins * L_ins` and
//! `L_causal = ||Z - sg(h_X)||^2 + lambda_demo * L_demo`. The fairness penalty
//! couples every bag in a window, so it is evaluated once per window and its
//! gradient is pushed back through each bag's tape as a constant cotangent on
//! the head logits. Survival models replace the bag cross-entropy with the Cox
//! partial likelihood over the window.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagio::{age_bin, Attribute, DemographicVector, FeatureBag};
use crate::diffmath::{softmax_row, GradTape, Grads, Mode, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};
use crate::milnet;
use crate::scmgraph::Architecture;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_causal: f64,
    pub lambda_fair: f64,
    pub lambda_ins: f64,
    pub lambda_demo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_causal: 0.1,
            lambda_fair: 0.05,
            lambda_ins: 0.5,
            lambda_demo: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_causal", self.lambda_causal),
            ("lambda_fair", self.lambda_fair),
            ("lambda_ins", self.lambda_ins),
            ("lambda_demo", self.lambda_demo),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn classification_loss(
    bag_logits: &[f64],
    bag_label: usize,
    instance_loss: f64,
    w: &LossWeights,
) -> Result<f64> {
    Ok(crate::diffmath::cross_entropy(bag_logits, bag_label)? + w.lambda_ins * instance_loss)
}

/// Squared distance between decoded and true demographics.
pub fn demo_loss(pred: &[f64], u: &[f64]) -> Result<f64> {
    if pred.len() != u.len() {
        return Err(Error::dim(format!(
            "demographic lengths {} and {}",
            pred.len(),
            u.len()
        )));
    }
    Ok(pred.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn causal_loss(z: &[f64], anchor: &[f64], demo_loss: f64, w: &LossWeights) -> Result<f64> {
    if z.len() != anchor.len() {
        return Err(Error::dim(format!(
            "Z has {} entries, the anchor {}",
            z.len(),
            anchor.len()
        )));
    }
    Ok(z.iter()
        .zip(anchor)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        + w.lambda_demo * demo_loss)
}

pub fn total_loss(cls: f64, causal: f64, fair: f64, w: &LossWeights) -> f64 {
    cls + w.lambda_causal * causal + w.lambda_fair * fair
}

/// Sum over unordered pairs of `(m_g - m_h)^2`.
pub fn pairwise_gap(means: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += (means[i] - means[j]).powi(2);
        }
    }
    total
}

fn group_of(u: &DemographicVector, attr: Attribute) -> Option<usize> {
    match attr {
        Attribute::Age => u.is_observed(Attribute::Age).then(|| age_bin(u.values[7])),
        _ => u.group(attr),
    }
}

/// Predicted class probabilities of a window's bags, with each bag's group
/// per attribute (`None` when unobserved).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchFairnessBuffer {
    probs: Vec<Vec<f64>>,
    groups: Vec<[Option<usize>; 3]>,
}

impl BatchFairnessBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, probs: Vec<f64>, u: &DemographicVector) {
        self.groups.push(Attribute::ALL.map(|a| group_of(u, a)));
        self.probs.push(probs);
    }

    pub fn push_groups(&mut self, probs: Vec<f64>, groups: [Option<usize>; 3]) {
        self.groups.push(groups);
        self.probs.push(probs);
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn classes(&self) -> Vec<usize> {
        match self.probs.first().map(Vec::len) {
            Some(2) => vec![1],
            Some(c) => (0..c).collect(),
            None => Vec::new(),
        }
    }

    /// Group means of class `c` for one attribute; `None` for empty groups.
    fn means(&self, a: usize, c: usize) -> Vec<Option<(f64, usize)>> {
        let n = Attribute::ALL[a].group_count();
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        for (p, g) in self.probs.iter().zip(&self.groups) {
            if let Some(g) = g[a] {
                sum[g] += p[c];
                count[g] += 1;
            }
        }
        (0..n)
            .map(|g| (count[g] > 0).then(|| (sum[g] / count[g] as f64, count[g])))
            .collect()
    }

    /// Pairwise squared gaps in group-mean positive probability, summed over
    /// attributes. With more than two classes each class is treated as the
    /// positive one and the results are averaged.
    pub fn loss(&self) -> f64 {
        let classes = self.classes();
        if !self.groups.iter().any(|g| g.iter().any(Option::is_some)) {
            if !self.is_empty() {
                log::warn!(
                    "fairness penalty skipped: no bag in the window has an observed attribute"
                );
            }
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..3 {
            for &c in &classes {
                let present: Vec<f64> = self
                    .means(a, c)
                    .into_iter()
                    .flatten()
                    .map(|(m, _)| m)
                    .collect();
                total += pairwise_gap(&present) / classes.len() as f64;
            }
        }
        total
    }

    /// Gradient of [`Self::loss`] with respect to every stored probability.
    pub fn gradient(&self) -> Vec<Vec<f64>> {
        let classes = self.classes();
        let mut grad: Vec<Vec<f64>> = self.probs.iter().map(|p| vec![0.0; p.len()]).collect();
        for a in 0..3 {
            for &c in &classes {
                let means = self.means(a, c);
                let present: Vec<f64> = means.iter().flatten().map(|&(m, _)| m).collect();
                for (i, g) in self.groups.iter().enumerate() {
                    if let Some(g) = g[a] {
                        let (m, n) = means[g].expect("member of a present group");
                        let dm: f64 = present.iter().map(|o| 2.0 * (m - o)).sum();
                        grad[i][c] += dm / n as f64 / classes.len() as f64;
                    }
                }
            }
        }
        grad
    }
}

/// Negative Breslow partial log-likelihood:
/// `-sum_{i: event} [r_i - log sum_{j: t_j >= t_i} exp(r_j)]`.
pub fn cox_partial_likelihood(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    Ok(cox_with_gradient(risks, times, events)?.0)
}

pub fn cox_with_gradient(risks: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::dim("risks, times and events differ in length"));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!("survival time {t} is not positive")));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::Domain(
            "Cox likelihood needs at least one event".into(),
        ));
    }
    let shift = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = risks.iter().map(|r| (r - shift).exp()).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in (0..n).filter(|&i| events[i]) {
        let at_risk: Vec<usize> = (0..n).filter(|&j| times[j] >= times[i]).collect();
        let s: f64 = at_risk.iter().map(|&j| w[j]).sum();
        loss -= risks[i] - (s.ln() + shift);
        grad[i] -= 1.0;
        for &j in &at_risk {
            grad[j] += w[j] / s;
        }
    }
    Ok((loss, grad))
}

/// Window-averaged loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub causal: f64,
    pub fair: f64,
    pub demo: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add_weighted(&mut self, other: &LossParts, weight: f64) {
        self.cls += weight * other.cls;
        self.causal += weight * other.causal;
        self.fair += weight * other.fair;
        self.demo += weight * other.demo;
        self.total += weight * other.total;
    }
}

struct BagTerms {
    anchor: Tensor2,
    loss: Var,
    logits: Var,
    cls: f64,
    causal: f64,
    demo: f64,
}

fn bag_terms(
    arch: &Architecture,
    tape: &mut GradTape,
    bag: &FeatureBag,
    w: &LossWeights,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    frozen_anchor: Option<&Tensor2>,
) -> Result<BagTerms> {
    let fwd = arch.forward_bag(tape, bag, mode, rng)?;
    let inst = milnet::instance_loss(tape, fwd.instance_logits, &fwd.pseudo)?;
    let inst = tape.scale(inst, w.lambda_ins);
    let cls = if arch.config.survival {
        inst
    } else {
        let ce = tape.cross_entropy(fwd.logits, &[bag.bag_label])?;
        tape.add(ce, inst)?
    };

    let u = &bag.demographics;
    let mask = Tensor2::row_vector(u.mask_slots().to_vec());
    let target = tape.constant(Tensor2::row_vector(u.values.to_vec()));
    let diff = tape.sub(fwd.demo_pred, target)?;
    let diff = tape.mul_const(diff, mask)?;
    let demo = tape.sum_squares(diff);

    let anchor = match frozen_anchor {
        Some(a) => tape.constant(a.clone()),
        None => tape.detach(fwd.h_x),
    };
    let gap = tape.sub(fwd.z, anchor)?;
    let gap = tape.sum_squares(gap);
    let weighted_demo = tape.scale(demo, w.lambda_demo);
    let causal = tape.add(gap, weighted_demo)?;

    let scaled = tape.scale(causal, w.lambda_causal);
    let loss = tape.add(cls, scaled)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on bag {}",
            bag.bag_id
        )));
    }
    Ok(BagTerms {
        anchor: tape.value(anchor).clone(),
        loss,
        logits: fwd.logits,
        cls: tape.value(cls).item(),
        causal: tape.value(causal).item(),
        demo: tape.value(demo).item(),
    })
}

/// Objective of one accumulation window:
/// `mean_b(L_cls + lambda_causal * L_causal) + lambda_fair * L_fair`, where
/// survival models fold `Cox / events` into `L_cls` and skip the fairness
/// term. When `grads` is given, the window-mean gradient is added to it.
pub fn window_objective(
    arch: &Architecture,
    params: &ParamStore,
    bags: &[&FeatureBag],
    w: &LossWeights,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    grads: Option<&mut Grads>,
) -> Result<LossParts> {
    window_objective_anchored(arch, params, bags, w, mode, rng, grads, None).map(|(p, _)| p)
}

/// [`window_objective`] that also returns the per-bag `h_X` anchors and can
/// pin them to given values. With pinned anchors the loss is an ordinary
/// function of the parameters whose gradient equals the stop-gradient one at
/// the point where the anchors were recorded, which is what a finite
/// difference check needs.
#[allow(clippy::too_many_arguments)]
pub fn window_objective_anchored(
    arch: &Architecture,
    params: &ParamStore,
    bags: &[&FeatureBag],
    w: &LossWeights,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    grads: Option<&mut Grads>,
    anchors: Option<&[Tensor2]>,
) -> Result<(LossParts, Vec<Tensor2>)> {
    if let Some(a) = anchors {
        if a.len() != bags.len() {
            return Err(Error::dim(format!(
                "{} anchors for {} bags",
                a.len(),
                bags.len()
            )));
        }
    }
    if bags.is_empty() {
        return Err(Error::Domain("empty accumulation window".into()));
    }
    let n = bags.len() as f64;
    let mut tapes = Vec::with_capacity(bags.len());
    let mut terms = Vec::with_capacity(bags.len());
    let mut parts = LossParts::default();
    for (i, bag) in bags.iter().enumerate() {
        let mut tape = GradTape::new(params);
        let t = bag_terms(arch, &mut tape, bag, w, mode, rng, anchors.map(|a| &a[i]))?;
        parts.cls += t.cls / n;
        parts.causal += t.causal / n;
        parts.demo += t.demo / n;
        terms.push(t);
        tapes.push(tape);
    }

    // Cotangent on each bag's head output from the coupled window term.
    let mut head_grads: Vec<Option<Tensor2>> = vec![None; bags.len()];
    if arch.config.survival {
        let risks: Vec<f64> = terms
            .iter()
            .zip(&tapes)
            .map(|(t, tape)| tape.value(t.logits).item())
            .collect();
        let surv: Vec<_> = bags
            .iter()
            .map(|b| {
                b.survival.ok_or_else(|| {
                    Error::Config(format!("bag {} has no survival record", b.bag_id))
                })
            })
            .collect::<Result<_>>()?;
        let events = surv.iter().filter(|s| s.event).count();
        if events > 0 {
            let times: Vec<f64> = surv.iter().map(|s| s.time).collect();
            let flags: Vec<bool> = surv.iter().map(|s| s.event).collect();
            let (cox, g) = cox_with_gradient(&risks, &times, &flags)?;
            let scale = 1.0 / events as f64;
            parts.cls += cox * scale;
            for (slot, gi) in head_grads.iter_mut().zip(g) {
                *slot = Some(Tensor2::scalar(gi * scale));
            }
        }
    } else if w.lambda_fair > 0.0 {
        let mut buffer = BatchFairnessBuffer::new();
        for ((t, tape), bag) in terms.iter().zip(&tapes).zip(bags) {
            buffer.push(softmax_row(tape.value(t.logits).data())?, &bag.demographics);
        }
        parts.fair = buffer.loss();
        for (i, (dp, (t, tape))) in buffer
            .gradient()
            .into_iter()
            .zip(terms.iter().zip(&tapes))
            .enumerate()
        {
            let p = softmax_row(tape.value(t.logits).data())?;
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = p
                .iter()
                .zip(&dp)
                .map(|(pk, gk)| w.lambda_fair * pk * (gk - dot))
                .collect();
            head_grads[i] = Some(Tensor2::row_vector(dz));
        }
    }
    parts.total = parts.cls + w.lambda_causal * parts.causal + w.lambda_fair * parts.fair;

    if let Some(into) = grads {
        for ((t, tape), hg) in terms.iter().zip(tapes.iter_mut()).zip(head_grads) {
            let mut seeds = vec![(t.loss, 1.0 / n)];
            if let Some(g) = hg {
                let projected = tape.mul_const(t.logits, g)?;
                let s = tape.sum(projected);
                seeds.push((s, 1.0));
            }
            tape.backward_seeded(&seeds, into)?;
        }
    }
    Ok((parts, terms.into_iter().map(|t| t.anchor).collect()))
}

/// Running sum of gradients, averaged on read.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sum: Grads,
    count: usize,
}

impl GradAccumulator {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            sum: Grads::zeros_like(params),
            count: 0,
        }
    }

    pub fn add(&mut self, g: &Grads) -> Result<()> {
        self.sum.add_assign(g)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean of the accumulated gradients; resets the accumulator.
    pub fn take_mean(&mut self) -> Grads {
        let mut out = self.sum.clone();
        if self.count > 0 {
            out.scale(1.0 / self.count as f64);
        }
        self.sum.clear();
        self.count = 0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn classification_cases() {
        let w = LossWeights::default();
        assert!(classification_loss(&[30.0, -30.0], 0, 0.0, &w).unwrap() < 1e-20);
        let bare = LossWeights {
            lambda_ins: 0.0,
            ..w
        };
        let ce = crate::diffmath::cross_entropy(&[0.3, -0.2], 1).unwrap();
        assert_eq!(
            classification_loss(&[0.3, -0.2], 1, 7.0, &bare).unwrap(),
            ce
        );
        let want = (0.3f64.exp() + (-0.2f64).exp()).ln() + 0.2 + 0.5 * 0.8;
        assert!((classification_loss(&[0.3, -0.2], 1, 0.8, &w).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn causal_and_demo_cases() {
        let w = LossWeights::default();
        let z = [0.1, -0.4, 2.0];
        assert_eq!(causal_loss(&z, &z, 0.0, &w).unwrap(), 0.0);
        let free = LossWeights {
            lambda_demo: 0.0,
            ..w
        };
        assert_eq!(
            causal_loss(&[1.0, 0.0, 0.0], &[0.0; 3], 5.0, &free).unwrap(),
            1.0
        );
        let want = 0.5f64.powi(2) + 0.25f64.powi(2) + 0.1 * 2.0;
        assert!((causal_loss(&[0.5, 0.0], &[0.0, 0.25], 2.0, &w).unwrap() - want).abs() < 1e-15);
        assert!(matches!(
            causal_loss(&[0.0; 2], &[0.0; 3], 0.0, &w),
            Err(Error::Dimension(_))
        ));

        let u = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.4];
        assert_eq!(demo_loss(&u, &u).unwrap(), 0.0);
        let mut off = u;
        off[0] += 1.0;
        assert_eq!(demo_loss(&off, &u).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.15).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.3, 0.2, &w), 0.7 + 0.1 * 0.3 + 0.05 * 0.2);
    }

    fn buffer_with(means: &[(usize, f64)]) -> BatchFairnessBuffer {
        let mut b = BatchFairnessBuffer::new();
        for &(g, p) in means {
            b.push_groups(vec![1.0 - p, p], [Some(g), None, None]);
        }
        b
    }

    #[test]
    fn fairness_examples() {
        assert_eq!(buffer_with(&[(0, 0.7), (1, 0.7)]).loss(), 0.0);
        assert!((buffer_with(&[(0, 0.8), (1, 0.6)]).loss() - 0.04).abs() < 1e-15);
        assert_eq!(buffer_with(&[(0, 0.8), (0, 0.3)]).loss(), 0.0);
        let mut empty = BatchFairnessBuffer::new();
        empty.push_groups(vec![0.5, 0.5], [None, None, None]);
        assert_eq!(empty.loss(), 0.0);
    }

    #[test]
    fn fairness_invariances() {
        let a = buffer_with(&[(0, 0.9), (0, 0.5), (1, 0.2)]);
        let relabelled = buffer_with(&[(1, 0.9), (1, 0.5), (0, 0.2)]);
        let doubled = buffer_with(&[(0, 0.9), (0, 0.5), (1, 0.2), (0, 0.9), (0, 0.5), (1, 0.2)]);
        assert!((a.loss() - relabelled.loss()).abs() < 1e-15);
        assert!((a.loss() - doubled.loss()).abs() < 1e-15);
    }

    #[test]
    fn fairness_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for classes in [2usize, 4] {
            let mut buf = BatchFairnessBuffer::new();
            for _ in 0..7 {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
                let groups = [
                    Some(rng.random_range(0..2)),
                    Some(rng.random_range(0..5)),
                    None,
                ];
                buf.push_groups(softmax_row(&raw).unwrap(), groups);
            }
            let g = buf.gradient();
            for i in 0..buf.len() {
                for c in 0..classes {
                    let h = 1e-6;
                    let mut up = buf.clone();
                    up.probs[i][c] += h;
                    let mut down = buf.clone();
                    down.probs[i][c] -= h;
                    let fd = (up.loss() - down.loss()) / (2.0 * h);
                    assert!((fd - g[i][c]).abs() < 1e-8, "{fd} vs {}", g[i][c]);
                }
            }
        }
    }

    #[test]
    fn cox_examples() {
        let two = cox_partial_likelihood(&[0.3, 0.3], &[1.0, 2.0], &[true, false]).unwrap();
        assert!((two - 2f64.ln()).abs() < 1e-15);
        assert!(cox_partial_likelihood(&[20.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap() < 1e-8);
        assert!(matches!(
            cox_partial_likelihood(&[0.0], &[1.0], &[false]),
            Err(Error::Domain(_))
        ));

        let risks = [0.2, -1.0, 0.7, 0.0, 1.3];
        let times = [5.0, 1.0, 3.0, 3.0, 8.0];
        let events = [true, true, false, true, true];
        let mut want = 0.0;
        for i in 0..5 {
            if events[i] {
                let s: f64 = (0..5)
                    .filter(|&j| times[j] >= times[i])
                    .map(|j| f64::exp(risks[j]))
                    .sum();
                want -= risks[i] - s.ln();
            }
        }
        let (got, grad) = cox_with_gradient(&risks, &times, &events).unwrap();
        assert!((got - want).abs() < 1e-12);
        for k in 0..5 {
            let h = 1e-6;
            let mut up = risks;
            up[k] += h;
            let mut down = risks;
            down[k] -= h;
            let fd = (cox_partial_likelihood(&up, &times, &events).unwrap()
                - cox_partial_likelihood(&down, &times, &events).unwrap())
                / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn accumulator_averages() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor2::zeros(1, 2)).unwrap();
        let mut acc = GradAccumulator::new(&store);
        for v in [1.0, 2.0, 3.0, 6.0] {
            let mut g = Grads::zeros_like(&store);
            g.get_mut(id).data_mut().fill(v);
            acc.add(&g).unwrap();
        }
        assert_eq!(acc.count(), 4);
        assert_eq!(acc.take_mean().get(id).data(), &[3.0, 3.0]);
        assert_eq!(acc.count(), 0);
    }
}

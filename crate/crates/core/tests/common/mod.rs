#![allow(dead_code)]

use causal_mil::bagio::{DemographicVector, FeatureBag, FeatureMatrix, Survival};
use causal_mil::diffmath::{Grads, Mode, ParamStore};
use causal_mil::objectives::{window_objective_anchored, LossWeights};
use causal_mil::scmgraph::{CausalMil, GraphVariant, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(variant: GraphVariant, survival: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        classes: 2,
        hidden_dim: 8,
        query_dim: 8,
        heads: 2,
        layers: 1,
        dropout: 0.0,
        k_frac: 0.25,
        sigma_unc: 0.5,
        variant,
        survival,
    }
}

/// Bags with full, partial and missing demographics and both labels.
pub fn tiny_bags(seed: u64, n: usize, k: usize, d: usize) -> Vec<FeatureBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let demographics = match i % 4 {
                0 => DemographicVector::new(Some(0), Some(1), Some(44.0)).unwrap(),
                1 => DemographicVector::new(Some(1), None, Some(71.0)).unwrap(),
                2 => DemographicVector::missing(),
                _ => DemographicVector::new(Some(1), Some(0), Some(58.0)).unwrap(),
            };
            FeatureBag {
                bag_id: format!("g{i}"),
                features: FeatureMatrix::new(
                    k,
                    d,
                    (0..k * d).map(|_| rng.random_range(-1.5f32..1.5)).collect(),
                )
                .unwrap(),
                bag_label: i % 2,
                class_count: 2,
                survival: Some(Survival {
                    time: 1.0 + i as f64 * 0.7,
                    event: i % 3 != 2,
                }),
                demographics,
            }
        })
        .collect()
}

pub struct GradcheckResult {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences on every parameter scalar of the window objective.
pub fn gradcheck(
    model: &CausalMil,
    bags: &[FeatureBag],
    w: &LossWeights,
    h: f64,
) -> GradcheckResult {
    let refs: Vec<&FeatureBag> = bags.iter().collect();
    let mut grads = Grads::zeros_like(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, anchors) = window_objective_anchored(
        &model.arch,
        &model.params,
        &refs,
        w,
        Mode::Train,
        &mut rng,
        Some(&mut grads),
        None,
    )
    .unwrap();
    // The image anchor is a stop-gradient copy, so differences hold it fixed.
    let eval = |params: &ParamStore| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        window_objective_anchored(
            &model.arch,
            params,
            &refs,
            w,
            Mode::Train,
            &mut rng,
            None,
            Some(&anchors),
        )
        .unwrap()
        .0
        .total
    };

    let mut out = GradcheckResult {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut params = model.params.clone();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for k in 0..model.params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&params);
            params.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&params);
            params.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).data()[k];
            if an.abs().max(fd.abs()) <= 1e-8 {
                continue;
            }
            out.checked += 1;
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!(
                    "{}[{k}] analytic {an:e} numeric {fd:e}",
                    model.params.name(id)
                );
            }
        }
    }
    out
}

/// A bag with random shape, label, survival record, partially masked
/// demographics and raw f32 bit patterns (subnormals and signed zeros
/// included, non-finite values excluded).
pub fn random_bag<R: Rng>(rng: &mut R, id: &str) -> FeatureBag {
    let k = rng.random_range(1..=12);
    let d = rng.random_range(1..=10);
    let classes = rng.random_range(2..=6);
    let features = (0..k * d)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    let gender = rng.random_bool(0.8).then(|| rng.random_range(0..2));
    let race = rng.random_bool(0.8).then(|| rng.random_range(0..5));
    let age = rng.random_bool(0.8).then(|| rng.random_range(20.0..90.0));
    FeatureBag {
        bag_id: id.to_string(),
        features: FeatureMatrix::new(k, d, features).unwrap(),
        bag_label: rng.random_range(0..classes),
        class_count: classes,
        survival: rng.random_bool(0.5).then(|| Survival {
            time: rng.random_range(1e-6..1e3),
            event: rng.random_bool(0.6),
        }),
        demographics: DemographicVector::new(gender, race, age).unwrap(),
    }
}

/// Field-by-field equality with features compared by bit pattern.
pub fn bitwise_equal(a: &FeatureBag, b: &FeatureBag) -> bool {
    let bits = |m: &FeatureMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.bag_id == b.bag_id
        && a.features.rows() == b.features.rows()
        && a.features.cols() == b.features.cols()
        && bits(&a.features) == bits(&b.features)
        && a.bag_label == b.bag_label
        && a.class_count == b.class_count
        && a.survival.map(|s| (s.time.to_bits(), s.event))
            == b.survival.map(|s| (s.time.to_bits(), s.event))
        && a.demographics.mask == b.demographics.mask
        && a.demographics.values.map(f64::to_bits) == b.demographics.values.map(f64::to_bits)
}

//! Synthetic cohorts drawn from a known structural model.
//!
//! Per bag: demographics `u` are drawn from independent marginals, the
//! disease state `s` uniformly over classes. Instance features are
//! `mu_s + gamma * M_u + sigma * eps` for a `rho` fraction of instances in
//! bags with `s > 0`, and `mu_0 + gamma * M_u + sigma * eps` otherwise.
//! `mu_s` and the per-group directions summed into `M_u` are unit vectors
//! drawn once from the seed. With `gamma = 0` features and demographics are
//! independent.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cohort::Cohort;
use super::{
    Attribute, DemographicVector, FeatureBag, FeatureMatrix, Survival, AGE_BINS, GENDER_GROUPS,
    RACE_GROUPS,
};
use crate::error::{Error, Result};

/// Age range in years covered by each bin when sampling.
const AGE_BIN_YEARS: [(f64, f64); AGE_BINS] = [
    (20.0, 40.0),
    (40.0, 50.0),
    (50.0, 60.0),
    (60.0, 70.0),
    (70.0, 90.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub seed: u64,
    pub n_bags: usize,
    /// Instances per bag.
    pub instances: usize,
    pub dim: usize,
    pub classes: usize,
    /// Fraction of instances carrying the class signal in non-normal bags.
    pub positive_fraction: f64,
    /// Strength of the demographic shift `gamma`.
    pub confounding: f64,
    /// Per-coordinate noise standard deviation `sigma`.
    pub noise: f64,
    pub gender_marginals: Vec<f64>,
    pub race_marginals: Vec<f64>,
    pub age_marginals: Vec<f64>,
    pub survival: bool,
    pub base_hazard: f64,
    /// Multiplicative hazard per disease-state step.
    pub hazard_ratio: f64,
    /// Log-hazard slope in normalized age.
    pub age_hazard: f64,
    /// Rate of the independent exponential censoring clock; 0 disables it.
    pub censoring_rate: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_bags: 200,
            instances: 32,
            dim: 64,
            classes: 2,
            positive_fraction: 0.25,
            confounding: 0.0,
            noise: 0.5,
            gender_marginals: vec![0.42, 0.58],
            race_marginals: vec![0.78, 0.09, 0.07, 0.06, 0.0],
            age_marginals: vec![0.15, 0.20, 0.25, 0.25, 0.15],
            survival: false,
            base_hazard: 0.1,
            hazard_ratio: 3.0,
            age_hazard: 1.0,
            censoring_rate: 0.03,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_bags == 0 {
            return bad("n_bags must be at least 1".into());
        }
        if self.instances == 0 || self.dim == 0 {
            return bad("instances and dim must be at least 1".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad(format!(
                "positive_fraction must lie in (0, 1], got {}",
                self.positive_fraction
            ));
        }
        if !(self.confounding >= 0.0) || !self.confounding.is_finite() {
            return bad(format!(
                "confounding must be >= 0, got {}",
                self.confounding
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        for (name, m, n) in [
            ("gender", &self.gender_marginals, GENDER_GROUPS),
            ("race", &self.race_marginals, RACE_GROUPS),
            ("age", &self.age_marginals, AGE_BINS),
        ] {
            if m.len() != n {
                return bad(format!(
                    "{name} marginals need {n} entries, got {}",
                    m.len()
                ));
            }
            if m.iter().any(|&p| !(p >= 0.0)) {
                return bad(format!("{name} marginals must be non-negative"));
            }
            let total: f64 = m.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("{name} marginals sum to {total}, not 1"));
            }
        }
        if self.survival {
            if !(self.base_hazard > 0.0)
                || !(self.hazard_ratio > 0.0)
                || !(self.censoring_rate >= 0.0)
            {
                return bad("survival rates must be positive".into());
            }
            if !self.age_hazard.is_finite() {
                return bad("age_hazard must be finite".into());
            }
        }
        Ok(())
    }
}

/// Ground-truth directions used by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmTruth {
    pub class_means: Vec<Vec<f64>>,
    /// Indexed by attribute (gender, race, age) then group.
    pub group_directions: [Vec<Vec<f64>>; 3],
}

impl ScmTruth {
    fn shift(&self, groups: [usize; 3], dim: usize) -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for (a, &g) in groups.iter().enumerate() {
            for (acc, v) in m.iter_mut().zip(&self.group_directions[a][g]) {
                *acc += v;
            }
        }
        m
    }
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn generate_cohort(cfg: &ScmConfig) -> Result<Cohort> {
    generate_cohort_with_truth(cfg).map(|(c, _)| c)
}

pub fn generate_cohort_with_truth(cfg: &ScmConfig) -> Result<(Cohort, ScmTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let class_means: Vec<Vec<f64>> = (0..cfg.classes).map(|_| unit_vector(&mut rng, d)).collect();
    let group_directions = [
        (0..GENDER_GROUPS)
            .map(|_| unit_vector(&mut rng, d))
            .collect(),
        (0..RACE_GROUPS).map(|_| unit_vector(&mut rng, d)).collect(),
        (0..AGE_BINS).map(|_| unit_vector(&mut rng, d)).collect(),
    ];
    let truth = ScmTruth {
        class_means,
        group_directions,
    };

    let k = cfg.instances;
    let n_signal = ((cfg.positive_fraction * k as f64).round() as usize).clamp(1, k);
    let mut bags = Vec::with_capacity(cfg.n_bags);
    for i in 0..cfg.n_bags {
        let gender = categorical(&mut rng, &cfg.gender_marginals);
        let race = categorical(&mut rng, &cfg.race_marginals);
        let bin = categorical(&mut rng, &cfg.age_marginals);
        let (lo, hi) = AGE_BIN_YEARS[bin];
        let years = rng.random_range(lo..hi);
        let demographics = DemographicVector::new(Some(gender), Some(race), Some(years))?;
        let groups = [
            gender,
            race,
            demographics.group(Attribute::Age).unwrap_or(bin),
        ];
        let shift = truth.shift(groups, d);

        let state = rng.random_range(0..cfg.classes);
        let mut signal = vec![false; k];
        if state > 0 {
            for idx in sample(&mut rng, k, n_signal) {
                signal[idx] = true;
            }
        }
        let mut data = Vec::with_capacity(k * d);
        for &is_signal in &signal {
            let mean = &truth.class_means[if is_signal { state } else { 0 }];
            for c in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                data.push((mean[c] + cfg.confounding * shift[c] + cfg.noise * eps) as f32);
            }
        }

        let survival = if cfg.survival {
            let log_rate = cfg.base_hazard.ln()
                + cfg.hazard_ratio.ln() * state as f64
                + cfg.age_hazard * demographics.values[7];
            let event_time = Exp::new(log_rate.exp())
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng);
            let censor_time = if cfg.censoring_rate > 0.0 {
                Exp::new(cfg.censoring_rate)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng)
            } else {
                f64::INFINITY
            };
            let event = event_time <= censor_time;
            Some(Survival {
                time: event_time.min(censor_time).max(1e-9),
                event,
            })
        } else {
            None
        };

        bags.push(FeatureBag {
            bag_id: format!("bag_{i:05}"),
            features: FeatureMatrix::new(k, d, data)?,
            bag_label: state,
            class_count: cfg.classes,
            survival,
            demographics,
        });
    }
    Ok((Cohort::with_auto_split(bags, cfg.classes, cfg.seed)?, truth))
}

/// Masks every demographic block in each bag independently with probability
/// `fraction`.
pub fn drop_demographics<R: Rng>(cohort: &Cohort, fraction: f64, rng: &mut R) -> Result<Cohort> {
    check_fraction(fraction)?;
    let mut out = cohort.clone();
    for bag in &mut out.bags {
        if rng.random::<f64>() < fraction {
            for attr in Attribute::ALL {
                bag.demographics.mask_out(attr);
            }
        }
    }
    Ok(out)
}

/// Masks one attribute block in each bag independently with probability
/// `fraction`, leaving partially observed vectors.
pub fn drop_attribute<R: Rng>(
    cohort: &Cohort,
    attr: Attribute,
    fraction: f64,
    rng: &mut R,
) -> Result<Cohort> {
    check_fraction(fraction)?;
    let mut out = cohort.clone();
    for bag in &mut out.bags {
        if rng.random::<f64>() < fraction {
            bag.demographics.mask_out(attr);
        }
    }
    Ok(out)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    Ok(())
}

//! Feature bags, demographics, cohorts, the on-disk bag format, and the
//! synthetic cohort generator.

mod cohort;
mod format;
mod synth;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor2;
use crate::error::{Error, Result};

pub use cohort::{
    read_cohort, write_cohort, BagEntry, Cohort, CohortManifest, Split, MANIFEST_FILE,
};
pub use format::{
    decode_bag, encode_bag, encoded_len, read_bag, write_bag, BAG_EXTENSION, BAG_MAGIC, BAG_VERSION,
};
pub use synth::{
    drop_attribute, drop_demographics, generate_cohort, generate_cohort_with_truth, ScmConfig,
    ScmTruth,
};

/// Width of the demographic encoding: gender (2), race (5), normalized age (1).
pub const DEMO_DIM: usize = 8;
pub const GENDER_GROUPS: usize = 2;
pub const RACE_GROUPS: usize = 5;
pub const AGE_BINS: usize = 5;

pub const GENDER_NAMES: [&str; GENDER_GROUPS] = ["male", "female"];
pub const RACE_NAMES: [&str; RACE_GROUPS] = ["white", "black", "asian", "other", "native"];
pub const AGE_BIN_NAMES: [&str; AGE_BINS] = ["<40", "40-50", "50-60", "60-70", ">=70"];

/// Sensitive attribute families. Each owns a contiguous block of the
/// demographic vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Race,
    Age,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Race, Attribute::Age];

    pub fn block(self) -> std::ops::Range<usize> {
        match self {
            Attribute::Gender => 0..2,
            Attribute::Race => 2..7,
            Attribute::Age => 7..8,
        }
    }

    /// Number of fairness groups (age uses bins).
    pub fn group_count(self) -> usize {
        match self {
            Attribute::Gender => GENDER_GROUPS,
            Attribute::Race => RACE_GROUPS,
            Attribute::Age => AGE_BINS,
        }
    }

    pub fn group_name(self, group: usize) -> &'static str {
        match self {
            Attribute::Gender => GENDER_NAMES[group],
            Attribute::Race => RACE_NAMES[group],
            Attribute::Age => AGE_BIN_NAMES[group],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Race => "race",
            Attribute::Age => "age",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "race" => Ok(Attribute::Race),
            "age" => Ok(Attribute::Age),
            other => Err(Error::Domain(format!("unknown attribute {other:?}"))),
        }
    }

    fn mask_bits(self) -> u8 {
        self.block().fold(0u8, |acc, i| acc | (1 << i))
    }
}

/// `(years - 20) / 70`, clamped to `[0, 1]`.
pub fn normalize_age(years: f64) -> f64 {
    ((years - 20.0) / 70.0).clamp(0.0, 1.0)
}

pub fn denormalize_age(normalized: f64) -> f64 {
    normalized * 70.0 + 20.0
}

/// Bin index for a normalized age: <40, 40-50, 50-60, 60-70, >=70.
pub fn age_bin(normalized: f64) -> usize {
    let years = denormalize_age(normalized);
    match years {
        y if y < 40.0 => 0,
        y if y < 50.0 => 1,
        y if y < 60.0 => 2,
        y if y < 70.0 => 3,
        _ => 4,
    }
}

/// Eight-slot demographic encoding plus an observation mask (bit i set when
/// slot i is observed). Unobserved slots hold 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicVector {
    pub values: [f64; DEMO_DIM],
    pub mask: u8,
}

impl DemographicVector {
    pub const FULL_MASK: u8 = 0xFF;

    pub fn missing() -> Self {
        Self {
            values: [0.0; DEMO_DIM],
            mask: 0,
        }
    }

    /// Builds an encoding from group indices and age in years; `None` leaves
    /// that block unobserved.
    pub fn new(gender: Option<usize>, race: Option<usize>, age_years: Option<f64>) -> Result<Self> {
        let mut d = Self::missing();
        if let Some(g) = gender {
            if g >= GENDER_GROUPS {
                return Err(Error::Domain(format!("gender group {g} out of range")));
            }
            d.values[g] = 1.0;
            d.mask |= Attribute::Gender.mask_bits();
        }
        if let Some(r) = race {
            if r >= RACE_GROUPS {
                return Err(Error::Domain(format!("race group {r} out of range")));
            }
            d.values[2 + r] = 1.0;
            d.mask |= Attribute::Race.mask_bits();
        }
        if let Some(a) = age_years {
            if !a.is_finite() {
                return Err(Error::Domain("age must be finite".into()));
            }
            d.values[7] = normalize_age(a);
            d.mask |= Attribute::Age.mask_bits();
        }
        Ok(d)
    }

    pub fn is_observed(&self, attr: Attribute) -> bool {
        let bits = attr.mask_bits();
        self.mask & bits == bits
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask == Self::FULL_MASK
    }

    pub fn is_fully_missing(&self) -> bool {
        self.mask == 0
    }

    /// Fairness group of `attr`, or `None` when the block is unobserved.
    pub fn group(&self, attr: Attribute) -> Option<usize> {
        if !self.is_observed(attr) {
            return None;
        }
        match attr {
            Attribute::Age => Some(age_bin(self.values[7])),
            _ => {
                let block = &self.values[attr.block()];
                block.iter().position(|&v| v == 1.0)
            }
        }
    }

    /// Clears the block for `attr`.
    pub fn mask_out(&mut self, attr: Attribute) {
        for i in attr.block() {
            self.values[i] = 0.0;
        }
        self.mask &= !attr.mask_bits();
    }

    pub fn mask_slots(&self) -> [f64; DEMO_DIM] {
        let mut m = [0.0; DEMO_DIM];
        for (i, slot) in m.iter_mut().enumerate() {
            if self.mask & (1 << i) != 0 {
                *slot = 1.0;
            }
        }
        m
    }

    /// Checks the observed-block invariants: one-hot blocks hold exactly one
    /// 1, age lies in [0, 1], blocks are observed whole, unobserved slots are 0.
    pub fn validate(&self) -> Result<()> {
        for attr in Attribute::ALL {
            let bits = attr.mask_bits();
            let present = self.mask & bits;
            if present != 0 && present != bits {
                return Err(Error::Domain(format!(
                    "{} block partially observed",
                    attr.name()
                )));
            }
            let block = &self.values[attr.block()];
            if present == 0 {
                if block.iter().any(|&v| v != 0.0) {
                    return Err(Error::Domain(format!(
                        "unobserved {} block holds values",
                        attr.name()
                    )));
                }
                continue;
            }
            match attr {
                Attribute::Age => {
                    if !(0.0..=1.0).contains(&block[0]) {
                        return Err(Error::Domain(format!(
                            "normalized age {} outside [0,1]",
                            block[0]
                        )));
                    }
                }
                _ => {
                    let ones = block.iter().filter(|&&v| v == 1.0).count();
                    let zeros = block.iter().filter(|&&v| v == 0.0).count();
                    if ones != 1 || ones + zeros != block.len() {
                        return Err(Error::Domain(format!(
                            "{} block is not one-hot",
                            attr.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Survival {
    pub time: f64,
    pub event: bool,
}

/// K×d instance features, stored as `f32` exactly as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} features for a {rows}x{cols} bag",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite instance feature".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor2 {
        Tensor2::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Column means (the unweighted bag centroid).
    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, &v) in m
                .iter_mut()
                .zip(&self.data[r * self.cols..(r + 1) * self.cols])
            {
                *acc += f64::from(v);
            }
        }
        for v in &mut m {
            *v /= self.rows as f64;
        }
        m
    }
}

/// One slide: its instances, label, optional survival record, demographics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub features: FeatureMatrix,
    pub bag_label: usize,
    pub class_count: usize,
    pub survival: Option<Survival>,
    pub demographics: DemographicVector,
}

impl FeatureBag {
    pub fn instance_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.bag_label >= self.class_count {
            return Err(Error::Domain(format!(
                "bag {}: label {} outside [0, {})",
                self.bag_id, self.bag_label, self.class_count
            )));
        }
        if let Some(s) = self.survival {
            if !(s.time > 0.0) || !s.time.is_finite() {
                return Err(Error::Domain(format!(
                    "bag {}: survival time must be positive",
                    self.bag_id
                )));
            }
        }
        self.demographics.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demographic_encoding_and_groups() {
        let d = DemographicVector::new(Some(1), Some(2), Some(63.0)).unwrap();
        assert_eq!(d.values[..2], [0.0, 1.0]);
        assert_eq!(d.values[2..7], [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((d.values[7] - 43.0 / 70.0).abs() < 1e-15);
        assert!(d.is_fully_observed());
        assert_eq!(d.group(Attribute::Gender), Some(1));
        assert_eq!(d.group(Attribute::Race), Some(2));
        assert_eq!(d.group(Attribute::Age), Some(3));
        d.validate().unwrap();

        let mut partial = d;
        partial.mask_out(Attribute::Race);
        assert_eq!(partial.group(Attribute::Race), None);
        assert!(!partial.is_fully_observed() && !partial.is_fully_missing());
        partial.validate().unwrap();

        let missing = DemographicVector::missing();
        assert!(missing.is_fully_missing());
        missing.validate().unwrap();
    }

    #[test]
    fn age_normalization_and_bins() {
        assert_eq!(normalize_age(10.0), 0.0);
        assert_eq!(normalize_age(120.0), 1.0);
        assert_eq!(age_bin(normalize_age(39.9)), 0);
        assert_eq!(age_bin(normalize_age(40.0)), 1);
        assert_eq!(age_bin(normalize_age(55.0)), 2);
        assert_eq!(age_bin(normalize_age(69.0)), 3);
        assert_eq!(age_bin(normalize_age(70.0)), 4);
    }

    #[test]
    fn invalid_demographics_are_rejected() {
        assert!(DemographicVector::new(Some(2), None, None).is_err());
        let mut bad = DemographicVector::new(Some(0), None, None).unwrap();
        bad.values[1] = 1.0;
        assert!(bad.validate().is_err());
        let mut half = DemographicVector::new(Some(0), None, None).unwrap();
        half.mask = 0b1;
        assert!(half.validate().is_err());
    }

    #[test]
    fn feature_matrix_rejects_empty_and_non_finite() {
        assert!(FeatureMatrix::new(0, 3, vec![]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
        let m = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(m.mean_row(), vec![2.0, 4.0]);
    }
}

//! Graph-attention structural equation model over the nodes `{X, U, Z}`.
//!
//! A bag is pooled to `B`, demographics are imputed to `u_final`, both are
//! embedded, and one round of masked multi-head attention updates the node
//! states. The disease representation is the updated `Z` node, which feeds
//! the prediction head and the demographic decoder. [`Architecture::intervene`]
//! reruns the SEM with `u` overwritten, which is the do-operator used for
//! attribution.

mod checkpoint;
mod graph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use graph::{build_adjacency, CausalGraphSpec, GraphVariant, NODE_U, NODE_X, NODE_Z};

use crate::bagio::{Attribute, DemographicVector, FeatureBag, DEMO_DIM};
use crate::diffmath::{
    check_dropout_rate, dropout_mask, init_linear, init_uniform, GradTape, Mode, ParamId,
    ParamStore, Tensor2, Var, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::milnet::{self, InstanceBranchParams, PoolingParams, PseudoLabels};

/// Architecture hyperparameters. Stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    pub query_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub k_frac: f64,
    pub sigma_unc: f64,
    pub variant: GraphVariant,
    /// Single risk output trained with the Cox criterion instead of class logits.
    pub survival: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            classes: 2,
            hidden_dim: 256,
            query_dim: 128,
            heads: 4,
            layers: 1,
            dropout: 0.3,
            k_frac: milnet::DEFAULT_K_FRAC,
            sigma_unc: 0.5,
            variant: GraphVariant::Collider,
            survival: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.query_dim == 0 {
            return bad("feature_dim, hidden_dim and query_dim must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        check_dropout_rate(self.dropout)?;
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return bad(format!("k_frac must lie in (0, 1], got {}", self.k_frac));
        }
        if !(0.0..1.0).contains(&self.sigma_unc) {
            return bad(format!(
                "sigma_unc must lie in [0, 1), got {}",
                self.sigma_unc
            ));
        }
        Ok(())
    }

    pub fn head_outputs(&self) -> usize {
        if self.survival {
            1
        } else {
            self.classes
        }
    }

    fn head_inputs(&self) -> usize {
        if self.variant == GraphVariant::Direct {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (w, b) = init_linear(store, name, fan_in, fan_out, rng)?;
        Ok(Self { w, b })
    }

    pub fn apply(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor2::filled(1, dim, 1.0))?;
        let bias = store.insert(format!("{name}.bias"), Tensor2::zeros(1, dim))?;
        Ok(Self { gain, bias })
    }

    pub fn apply(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// One attention layer. Head `h` owns columns `h*d_k..(h+1)*d_k` of the
/// query, key and value maps; `wo` merges the concatenated heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Parameter handles of the SEM and its heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SemParams {
    pub embed_x: Linear,
    pub norm_x: Norm,
    pub embed_u: Linear,
    pub norm_u: Norm,
    /// Learned bias; `Linear(0)` reduces to it.
    pub z_init: ParamId,
    pub layers: Vec<AttentionLayer>,
    /// Only for the concat variant.
    pub concat: Option<Linear>,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
    pub imputer_hidden: Linear,
    pub imputer_out: Linear,
    pub head: Linear,
}

/// Parameter layout of the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub spec: CausalGraphSpec,
    pub instance: InstanceBranchParams,
    pub pool: PoolingParams,
    pub sem: SemParams,
}

impl Architecture {
    /// Registers every parameter in a fixed order, drawing initial values
    /// from `rng`.
    pub fn register(
        config: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, dh) = (config.feature_dim, config.hidden_dim);
        let instance = InstanceBranchParams::register(store, d, d, config.classes, rng)?;
        let pool = PoolingParams::register(store, d, config.query_dim, rng)?;
        let embed_x = Linear::register(store, "sem.embed_x", d, dh, rng)?;
        let norm_x = Norm::register(store, "sem.norm_x", dh)?;
        let embed_u = Linear::register(store, "sem.embed_u", DEMO_DIM, dh, rng)?;
        let norm_u = Norm::register(store, "sem.norm_u", dh)?;
        let z_init = init_uniform(store, "sem.z_init.b", 1, dh, 1.0 / (dh as f64).sqrt(), rng)?;
        let spec = build_adjacency(config.variant);
        let mut layers = Vec::new();
        let mut concat = None;
        if spec.uses_graph() {
            let bound = 1.0 / (dh as f64).sqrt();
            for l in 0..config.layers {
                let mut m =
                    |n: &str| init_uniform(store, &format!("sem.layer{l}.{n}"), dh, dh, bound, rng);
                layers.push(AttentionLayer {
                    wq: m("wq")?,
                    wk: m("wk")?,
                    wv: m("wv")?,
                    wo: m("wo")?,
                });
            }
        } else {
            concat = Some(Linear::register(store, "sem.concat", 2 * dh, dh, rng)?);
        }
        let decoder_hidden = Linear::register(store, "decoder.hidden", dh, dh, rng)?;
        let decoder_out = Linear::register(store, "decoder.out", dh, DEMO_DIM, rng)?;
        let imputer_hidden = Linear::register(store, "imputer.hidden", d, dh, rng)?;
        let imputer_out = Linear::register(store, "imputer.out", dh, DEMO_DIM, rng)?;
        let head = Linear::register(
            store,
            "head",
            config.head_inputs(),
            config.head_outputs(),
            rng,
        )?;
        let sem = SemParams {
            embed_x,
            norm_x,
            embed_u,
            norm_u,
            z_init,
            layers,
            concat,
            decoder_hidden,
            decoder_out,
            imputer_hidden,
            imputer_out,
            head,
        };
        Ok(Self {
            config: config.clone(),
            spec,
            instance,
            pool,
            sem,
        })
    }

    fn embed(
        &self,
        tape: &mut GradTape,
        x: Var,
        lin: Linear,
        norm: Norm,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let h = lin.apply(tape, x)?;
        let h = norm.apply(tape, h)?;
        let h = tape.gelu(h);
        if mode == Mode::Train && self.config.dropout > 0.0 {
            let mask = dropout_mask(1, self.config.hidden_dim, self.config.dropout, rng)?;
            return tape.mul_const(h, mask);
        }
        Ok(h)
    }

    /// `(h_X, h_U, h_Z0)`, each 1×d_h. `h_Z0` does not depend on the inputs.
    pub fn embed_nodes(
        &self,
        tape: &mut GradTape,
        bag: Var,
        u: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Var)> {
        let h_x = self.embed(tape, bag, self.sem.embed_x, self.sem.norm_x, mode, rng)?;
        let h_u = self.embed(tape, u, self.sem.embed_u, self.sem.norm_u, mode, rng)?;
        let h_z = tape.param(self.sem.z_init);
        Ok((h_x, h_u, h_z))
    }

    /// Masked multi-head attention over the stacked 3×d_h node matrix.
    /// Returns the updated nodes and, per layer and head, the 3×3 weights.
    pub fn graph_pass(
        &self,
        tape: &mut GradTape,
        nodes: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Vec<Tensor2>>)> {
        let mask = self.spec.mask(mode);
        let heads = self.config.heads;
        let dk = self.config.hidden_dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut h = nodes;
        let mut weights = Vec::with_capacity(self.sem.layers.len());
        for layer in &self.sem.layers {
            let (wq, wk, wv, wo) = (
                tape.param(layer.wq),
                tape.param(layer.wk),
                tape.param(layer.wv),
                tape.param(layer.wo),
            );
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            let mut layer_weights = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * dk, dk)?;
                let kh = tape.slice_cols(k, head * dk, dk)?;
                let vh = tape.slice_cols(v, head * dk, dk)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let alpha = tape.masked_softmax_rows(scores, &mask)?;
                let a = tape.value(alpha);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!(
                            mask.get(i, j) != 0.0 || a.get(i, j) == 0.0,
                            "attention leaked through a masked edge"
                        );
                    }
                }
                layer_weights.push(a.clone());
                outs.push(tape.matmul(alpha, vh)?);
            }
            let merged = tape.concat_cols(&outs)?;
            let merged = tape.matmul(merged, wo)?;
            h = tape.add(h, merged)?;
            weights.push(layer_weights);
        }
        Ok((h, weights))
    }

    /// Runs the SEM from a pooled bag and final demographics to `Z`.
    pub fn sem_forward(
        &self,
        tape: &mut GradTape,
        bag: Var,
        u_final: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<SemOutput> {
        let (h_x, h_u, h_z0) = self.embed_nodes(tape, bag, u_final, mode, rng)?;
        let (z, attention) = match self.sem.concat {
            Some(proj) => {
                let joined = tape.concat_cols(&[h_x, h_u])?;
                (proj.apply(tape, joined)?, Vec::new())
            }
            None => {
                let nodes = tape.concat_rows(&[h_x, h_u, h_z0])?;
                let (out, weights) = self.graph_pass(tape, nodes, mode)?;
                (tape.select_rows(out, &[NODE_Z])?, weights)
            }
        };
        Ok(SemOutput {
            h_x,
            h_u,
            z,
            attention,
        })
    }

    /// `u_final`: observed slots pass through, missing slots come from the
    /// imputer, scaled by `sigma_unc` when nothing is observed.
    pub fn impute(&self, tape: &mut GradTape, bag: Var, u: &DemographicVector) -> Result<Var> {
        if u.is_fully_observed() {
            return Ok(tape.constant(Tensor2::row_vector(u.values.to_vec())));
        }
        let hidden = self.sem.imputer_hidden.apply(tape, bag)?;
        let hidden = tape.gelu(hidden);
        let out = self.sem.imputer_out.apply(tape, hidden)?;
        let guess = tape.sigmoid(out);
        if u.is_fully_missing() {
            return Ok(tape.scale(guess, self.config.sigma_unc));
        }
        let mask = u.mask_slots();
        let observed = tape.constant(Tensor2::row_vector(
            u.values.iter().zip(mask).map(|(v, m)| v * m).collect(),
        ));
        let fill = tape.mul_const(
            guess,
            Tensor2::row_vector(mask.iter().map(|m| 1.0 - m).collect()),
        )?;
        tape.add(observed, fill)
    }

    pub fn decode(&self, tape: &mut GradTape, z: Var) -> Result<Var> {
        let hidden = self.sem.decoder_hidden.apply(tape, z)?;
        let hidden = tape.gelu(hidden);
        self.sem.decoder_out.apply(tape, hidden)
    }

    /// Head logits (or the single risk score). The direct variant also sees `h_U`.
    pub fn bag_logits(&self, tape: &mut GradTape, z: Var, h_u: Var) -> Result<Var> {
        let input = if self.config.variant == GraphVariant::Direct {
            tape.concat_cols(&[z, h_u])?
        } else {
            z
        };
        self.sem.head.apply(tape, input)
    }

    /// Full per-bag forward pass.
    pub fn forward_bag(
        &self,
        tape: &mut GradTape,
        bag: &FeatureBag,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BagForward> {
        if bag.feature_dim() != self.config.feature_dim {
            return Err(Error::dim(format!(
                "bag {} has feature dim {}, model expects {}",
                bag.bag_id,
                bag.feature_dim(),
                self.config.feature_dim
            )));
        }
        let x_value = bag.features.to_tensor();
        let x = tape.constant(x_value.clone());
        let instance_logits = milnet::instance_logits(tape, &self.instance, x)?;
        let inst_value = tape.value(instance_logits).clone();
        let pseudo = milnet::assign_pseudo_labels(&inst_value, bag.bag_label, self.config.k_frac)?;
        let critical = milnet::critical_index(&inst_value)?;
        let pooled = milnet::attention_pool(tape, &self.pool, x, critical)?;
        let u_final = self.impute(tape, pooled.bag, &bag.demographics)?;
        let sem = self.sem_forward(tape, pooled.bag, u_final, mode, rng)?;
        let logits = self.bag_logits(tape, sem.z, sem.h_u)?;
        let demo_pred = self.decode(tape, sem.z)?;
        Ok(BagForward {
            instance_logits,
            pseudo,
            critical,
            alpha: pooled.alpha,
            bag: pooled.bag,
            u_final,
            h_x: sem.h_x,
            h_u: sem.h_u,
            z: sem.z,
            logits,
            demo_pred,
            attention: sem.attention,
        })
    }

    /// `Z` with demographics forced to `u_do`, bypassing imputation. Always
    /// uses the inference graph.
    pub fn intervene(
        &self,
        params: &ParamStore,
        bag_repr: &[f64],
        u_do: &[f64; DEMO_DIM],
    ) -> Result<Vec<f64>> {
        let mut tape = GradTape::new(params);
        let b = tape.constant(Tensor2::row_vector(bag_repr.to_vec()));
        let u = tape.constant(Tensor2::row_vector(u_do.to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.sem_forward(&mut tape, b, u, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.z).data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct SemOutput {
    pub h_x: Var,
    pub h_u: Var,
    pub z: Var,
    pub attention: Vec<Vec<Tensor2>>,
}

/// Tape handles produced by [`Architecture::forward_bag`].
#[derive(Clone, Debug)]
pub struct BagForward {
    pub instance_logits: Var,
    pub pseudo: PseudoLabels,
    pub critical: usize,
    pub alpha: Var,
    pub bag: Var,
    pub u_final: Var,
    pub h_x: Var,
    pub h_u: Var,
    pub z: Var,
    pub logits: Var,
    pub demo_pred: Var,
    pub attention: Vec<Vec<Tensor2>>,
}

/// Eval-mode outputs for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    /// Class probabilities; empty for survival models.
    pub probs: Vec<f64>,
    /// Risk score for survival models.
    pub risk: Option<f64>,
    pub alpha: Vec<f64>,
    pub bag_repr: Vec<f64>,
    pub u_final: [f64; DEMO_DIM],
    pub z: Vec<f64>,
}

/// Parameters plus layout, plus the per-slot training means used as the
/// neutral value in factor attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMil {
    pub arch: Architecture,
    pub params: ParamStore,
    pub neutral: [f64; DEMO_DIM],
}

impl CausalMil {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = Architecture::register(config, &mut params, &mut rng)?;
        Ok(Self {
            arch,
            params,
            neutral: [0.0; DEMO_DIM],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Sets the neutral value to the mean of observed slots over `bags`.
    pub fn set_neutral_from<'a>(&mut self, bags: impl IntoIterator<Item = &'a FeatureBag>) {
        self.neutral = neutral_demographics(bags);
    }

    pub fn predict(&self, bag: &FeatureBag) -> Result<BagPrediction> {
        let mut tape = GradTape::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self
            .arch
            .forward_bag(&mut tape, bag, Mode::Eval, &mut rng)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let (probs, risk) = if self.arch.config.survival {
            (Vec::new(), Some(logits[0]))
        } else {
            (crate::diffmath::softmax_row(&logits)?, None)
        };
        let mut u_final = [0.0; DEMO_DIM];
        u_final.copy_from_slice(tape.value(fwd.u_final).data());
        Ok(BagPrediction {
            probs,
            risk,
            alpha: tape.value(fwd.alpha).data().to_vec(),
            bag_repr: tape.value(fwd.bag).data().to_vec(),
            u_final,
            z: tape.value(fwd.z).data().to_vec(),
        })
    }

    pub fn intervene(&self, bag_repr: &[f64], u_do: &[f64; DEMO_DIM]) -> Result<Vec<f64>> {
        self.arch.intervene(&self.params, bag_repr, u_do)
    }

    /// `u_final` with the block of `attr` replaced by the neutral value.
    pub fn neutralize(&self, u_final: &[f64; DEMO_DIM], attr: Attribute) -> [f64; DEMO_DIM] {
        let mut out = *u_final;
        for i in attr.block() {
            out[i] = self.neutral[i];
        }
        out
    }
}

/// Per-slot mean over bags whose slot is observed; 0 where none are.
pub fn neutral_demographics<'a>(bags: impl IntoIterator<Item = &'a FeatureBag>) -> [f64; DEMO_DIM] {
    let mut sum = [0.0; DEMO_DIM];
    let mut count = [0usize; DEMO_DIM];
    for bag in bags {
        let mask = bag.demographics.mask_slots();
        for i in 0..DEMO_DIM {
            if mask[i] != 0.0 {
                sum[i] += bag.demographics.values[i];
                count[i] += 1;
            }
        }
    }
    let mut out = [0.0; DEMO_DIM];
    for i in 0..DEMO_DIM {
        if count[i] > 0 {
            out[i] = sum[i] / count[i] as f64;
        }
    }
    out
}

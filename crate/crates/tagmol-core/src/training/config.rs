use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::losses::LossWeights;
use crate::molgraph::PROPERTY_COUNT;
use crate::networks::{LayerVariant, NetDims};

/// Every knob of the training loop. All fields have defaults so a config
/// file may specify any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer iterations, mapped to passes over the training set.
    pub epochs: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub batch_size: usize,

    pub lambda_gp: f64,
    pub alpha_l2: f64,
    pub beta_energy: f64,
    pub gamma_reward: f64,
    /// Scale inside the reward loss (kept literal from the update rule).
    pub reward_coeff: f64,

    /// Protein embedding width; 0 trains an unconditional model.
    pub xdim: usize,
    pub zdim: usize,
    pub n_atoms: usize,
    pub layer_variant: LayerVariant,
    pub encoder_hidden: usize,
    pub gen_hidden: [usize; 3],
    pub graph_dim: usize,
    pub graph_layers: usize,
    pub property_count: usize,

    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,

    pub master_seed: u64,

    /// Skip the energy-network update phase entirely (ablation runs).
    pub train_energy: bool,
    /// Skip the reward-network update phase entirely (ablation runs).
    pub train_reward: bool,
    /// Generator energy term as the literal contrastive difference instead
    /// of the default +E(x, fake).
    pub literal_energy_term: bool,
    /// None = argmax discretization; Some(t) = tempered categorical.
    pub st_temperature: Option<f64>,
    /// Draw separate minibatches for the energy/reward/generator phases
    /// instead of sharing one fresh batch.
    pub separate_guidance_batches: bool,
    /// Record parameter-group hashes around every update phase.
    pub audit_updates: bool,

    /// Cap on test molecules used for the per-epoch Fréchet distance.
    pub fd_eval_max: usize,
    /// Treat each whole batch as one feature point instead of one point
    /// per molecule.
    pub fd_per_batch_points: bool,

    /// Write an intermediate checkpoint every this many epochs (0 = final
    /// checkpoint only).
    pub checkpoint_every: usize,

    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            critic_steps: 5,
            batch_size: 64,
            lambda_gp: 10.0,
            alpha_l2: 1e-3,
            beta_energy: 1.0,
            gamma_reward: 1.0,
            reward_coeff: 1.0 / 3.0,
            xdim: 16,
            zdim: 32,
            n_atoms: 32,
            layer_variant: LayerVariant::Gat,
            encoder_hidden: 64,
            gen_hidden: [128, 256, 512],
            graph_dim: 64,
            graph_layers: 2,
            property_count: PROPERTY_COUNT,
            lr_initial: 1e-4,
            lr_after: 1e-5,
            lr_switch_epoch: 200,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            master_seed: 42,
            train_energy: true,
            train_reward: true,
            literal_energy_term: false,
            st_temperature: None,
            separate_guidance_batches: false,
            audit_updates: false,
            fd_eval_max: 512,
            fd_per_batch_points: false,
            checkpoint_every: 0,
            train_path: None,
            test_path: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.critic_steps < 1 {
            return fail("critic_steps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr_initial > 0.0) || !(self.lr_after > 0.0) {
            return fail("learning rates must be > 0".into());
        }
        if self.zdim < 1 {
            return fail("zdim must be >= 1".into());
        }
        if self.n_atoms < 1 {
            return fail("n_atoms must be >= 1".into());
        }
        if self.graph_layers < 1 {
            return fail("graph_layers must be >= 1".into());
        }
        if self.property_count != PROPERTY_COUNT {
            return fail(format!(
                "property_count {} unsupported: the built-in property oracle produces exactly {} values",
                self.property_count, PROPERTY_COUNT
            ));
        }
        if let Some(t) = self.st_temperature {
            if !(t > 0.0) {
                return fail("st_temperature must be > 0 when set".into());
            }
        }
        let weights = [self.lambda_gp, self.alpha_l2, self.beta_energy, self.gamma_reward, self.reward_coeff];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail(format!("loss weights must be finite and >= 0, got {:?}", weights));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam moment decays must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn net_dims(&self) -> NetDims {
        NetDims {
            n_atoms: self.n_atoms,
            xdim: self.xdim,
            zdim: self.zdim,
            encoder_hidden: self.encoder_hidden,
            gen_hidden: self.gen_hidden,
            graph_dim: self.graph_dim,
            graph_layers: self.graph_layers,
            property_count: self.property_count,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_gp: self.lambda_gp,
            alpha_l2: self.alpha_l2,
            beta_energy: if self.train_energy { self.beta_energy } else { 0.0 },
            gamma_reward: if self.train_reward { self.gamma_reward } else { 0.0 },
        }
    }

    /// SHA-256 of the canonical JSON form with filesystem paths cleared,
    /// so the same numeric configuration hashes identically anywhere.
    pub fn config_hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.train_path = None;
        canonical.test_path = None;
        canonical.out_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }

    pub fn config_hash_hex(&self) -> String {
        self.config_hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};
use tagmol_core::training::TrainConfig;

/// Training-config overrides exposed as flags. Names mirror the config
/// file keys one for one; a flag beats the file, the file beats the
/// `TAGMOL_SEED` environment variable, which beats the built-in default.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    #[arg(long)]
    pub alpha_l2: Option<f64>,
    #[arg(long)]
    pub beta_energy: Option<f64>,
    #[arg(long)]
    pub gamma_reward: Option<f64>,
    #[arg(long)]
    pub reward_coeff: Option<f64>,
    #[arg(long)]
    pub xdim: Option<usize>,
    #[arg(long)]
    pub zdim: Option<usize>,
    #[arg(long)]
    pub n_atoms: Option<usize>,
    /// "gat" or "gcn".
    #[arg(long)]
    pub layer_variant: Option<String>,
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    /// Three comma-separated widths, e.g. 128,256,512.
    #[arg(long, value_delimiter = ',')]
    pub gen_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub graph_dim: Option<usize>,
    #[arg(long)]
    pub graph_layers: Option<usize>,
    #[arg(long)]
    pub property_count: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_after: Option<f64>,
    #[arg(long)]
    pub lr_switch_epoch: Option<usize>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub master_seed: Option<u64>,
    #[arg(long)]
    pub train_energy: Option<bool>,
    #[arg(long)]
    pub train_reward: Option<bool>,
    #[arg(long)]
    pub literal_energy_term: Option<bool>,
    #[arg(long)]
    pub st_temperature: Option<f64>,
    #[arg(long)]
    pub separate_guidance_batches: Option<bool>,
    #[arg(long)]
    pub audit_updates: Option<bool>,
    #[arg(long)]
    pub fd_eval_max: Option<usize>,
    #[arg(long)]
    pub fd_per_batch_points: Option<bool>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl ConfigOverrides {
    fn apply(&self, map: &mut Map<String, Value>) -> Result<()> {
        fn set<T: serde::Serialize>(map: &mut Map<String, Value>, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                map.insert(key.to_string(), serde_json::to_value(v).expect("flag serializes"));
            }
        }
        set(map, "epochs", &self.epochs);
        set(map, "critic_steps", &self.critic_steps);
        set(map, "batch_size", &self.batch_size);
        set(map, "lambda_gp", &self.lambda_gp);
        set(map, "alpha_l2", &self.alpha_l2);
        set(map, "beta_energy", &self.beta_energy);
        set(map, "gamma_reward", &self.gamma_reward);
        set(map, "reward_coeff", &self.reward_coeff);
        set(map, "xdim", &self.xdim);
        set(map, "zdim", &self.zdim);
        set(map, "n_atoms", &self.n_atoms);
        if let Some(v) = &self.layer_variant {
            let v = v.to_lowercase();
            if v != "gat" && v != "gcn" {
                bail!("layer_variant must be \"gat\" or \"gcn\", got {v:?}");
            }
            map.insert("layer_variant".into(), Value::String(v));
        }
        set(map, "encoder_hidden", &self.encoder_hidden);
        if let Some(widths) = &self.gen_hidden {
            if widths.len() != 3 {
                bail!("gen_hidden needs exactly 3 widths, got {}", widths.len());
            }
            map.insert("gen_hidden".into(), serde_json::to_value(widths).unwrap());
        }
        set(map, "graph_dim", &self.graph_dim);
        set(map, "graph_layers", &self.graph_layers);
        set(map, "property_count", &self.property_count);
        set(map, "lr_initial", &self.lr_initial);
        set(map, "lr_after", &self.lr_after);
        set(map, "lr_switch_epoch", &self.lr_switch_epoch);
        set(map, "adam_beta1", &self.adam_beta1);
        set(map, "adam_beta2", &self.adam_beta2);
        set(map, "master_seed", &self.master_seed);
        set(map, "train_energy", &self.train_energy);
        set(map, "train_reward", &self.train_reward);
        set(map, "literal_energy_term", &self.literal_energy_term);
        set(map, "st_temperature", &self.st_temperature);
        set(map, "separate_guidance_batches", &self.separate_guidance_batches);
        set(map, "audit_updates", &self.audit_updates);
        set(map, "fd_eval_max", &self.fd_eval_max);
        set(map, "fd_per_batch_points", &self.fd_per_batch_points);
        set(map, "checkpoint_every", &self.checkpoint_every);
        Ok(())
    }
}

/// Environment variable consulted as the lowest-precedence seed source.
pub const SEED_ENV_VAR: &str = "TAGMOL_SEED";

/// Resolves the effective configuration: built-in defaults, then the
/// `TAGMOL_SEED` environment variable, then the config file, then flags.
pub fn resolve_config(
    config_file: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<TrainConfig> {
    let mut map = match serde_json::to_value(TrainConfig::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };

    if let Ok(env_seed) = std::env::var(SEED_ENV_VAR) {
        let seed: u64 = env_seed
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV_VAR} must be an unsigned integer, got {env_seed:?}"))?;
        map.insert("master_seed".into(), Value::from(seed));
    }

    if let Some(path) = config_file {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let file_value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        let Value::Object(file_map) = file_value else {
            bail!("config file {} must hold a JSON object", path.display());
        };
        for (k, v) in file_map {
            map.insert(k, v);
        }
    }

    overrides.apply(&mut map)?;

    let config: TrainConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(config)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Everything needed to reproduce a run, written before training starts.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub dataset_checksums: DatasetChecksums,
    pub layout: RunLayout,
    pub resolved_config: TrainConfig,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetChecksums {
    pub train: String,
    pub test: String,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct RunLayout {
    pub config: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub samples_dir: PathBuf,
}

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{file_checksum, resolve_config, ConfigOverrides, DatasetChecksums, RunLayout, RunManifest};
use tagmol_core::diffcore::{Tape, Tensor};
use tagmol_core::evalmetrics::{
    binding_energy_report, write_energy_report_csv, write_energy_report_jsonl, xdim_ablation,
};
use tagmol_core::molgraph::{
    load_dataset, property_targets_lenient, synthesize_dataset, write_dataset, Molecule,
    PairRecord, ProteinRecord, NONE_BOND, PROTEIN_FEATURE_DIM,
};
use tagmol_core::networks::{discretize, encode_protein, generate, soft_values};
use tagmol_core::training::{
    derive_rng, evaluate_fd, latent_values, load_checkpoint, train, write_metrics_csv,
    write_metrics_jsonl, Checkpoint, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(
    name = "tagmol",
    version,
    about = "Energy-guided conditional molecular graph generation: synthetic data, training, sampling, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic protein-ligand dataset and split it into
    /// train/test JSONL files.
    SynthData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        n_atoms: usize,
        /// Fraction of records that go to train.jsonl.
        #[arg(long, default_value_t = 0.85)]
        train_frac: f64,
        /// Output directory for train.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the five networks and write a run directory with manifest,
    /// config, metrics, and checkpoints.
    Train {
        /// JSON config file; flags with the same names override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Sample ligands for one protein from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file with {"id": ..., "features": [21 numbers]}.
        #[arg(long)]
        protein: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Stochastic discretization temperature (argmax when omitted).
        #[arg(long)]
        temperature: Option<f64>,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fréchet distance between test-set ligands and generated ones.
    EvalFd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Cap on molecules per cloud.
        #[arg(long, default_value_t = 512)]
        max: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// One feature point per batch instead of per molecule.
        #[arg(long)]
        per_batch: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional JSON report path (result always prints to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-pair binding-energy separation table.
    EvalEnergy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Latents drawn per protein.
        #[arg(long, default_value_t = 8)]
        sample_count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Graph layer variant the checkpoint was trained with.
        #[arg(long, default_value = "gat")]
        layer_variant: String,
        #[arg(long, default_value_t = 1e-3)]
        alpha_l2: f64,
        /// Output directory for energy.csv and energy.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per protein-embedding width and compare Fréchet
    /// distance trajectories.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 8, 16, 32, 64])]
        xdims: Vec<usize>,
        /// Concurrent sub-runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(msg: impl Into<String>) -> Self {
        Failure { code: 1, message: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 2, message: msg.into() }
    }

    fn incompatible(msg: impl Into<String>) -> Self {
        Failure { code: 3, message: msg.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::Dataset(_) => 1,
            TrainError::Checkpoint(_) | TrainError::CheckpointVersion { .. } => 3,
            TrainError::Mol(_) => 1,
            TrainError::Io(_) | TrainError::Diff(_) | TrainError::NonFiniteGradient { .. } => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<tagmol_core::molgraph::MolError> for Failure {
    fn from(e: tagmol_core::molgraph::MolError) -> Self {
        use tagmol_core::molgraph::MolError;
        let code = match &e {
            MolError::Io(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData { seed, count, n_atoms, train_frac, out } => {
            cmd_synth_data(seed, count, n_atoms, train_frac, &out)
        }
        Command::Train { config, train_data, test_data, out, overrides } => {
            cmd_train(config.as_deref(), &train_data, test_data.as_deref(), &out, &overrides)
        }
        Command::Sample { checkpoint, protein, count, seed, temperature, out } => {
            cmd_sample(&checkpoint, &protein, count, seed, temperature, &out)
        }
        Command::EvalFd { checkpoint, testset, max, batch_size, per_batch, seed, out } => {
            cmd_eval_fd(&checkpoint, &testset, max, batch_size, per_batch, seed, out.as_deref())
        }
        Command::EvalEnergy {
            checkpoint,
            dataset,
            sample_count,
            seed,
            layer_variant,
            alpha_l2,
            out,
        } => cmd_eval_energy(&checkpoint, &dataset, sample_count, seed, &layer_variant, alpha_l2, &out),
        Command::Ablate { config, train_data, test_data, xdims, jobs, out, overrides } => {
            cmd_ablate(config.as_deref(), &train_data, &test_data, &xdims, jobs, &out, &overrides)
        }
    }
}

fn cmd_synth_data(
    seed: u64,
    count: usize,
    n_atoms: usize,
    train_frac: f64,
    out: &Path,
) -> Result<(), Failure> {
    if count < 1 {
        return Err(Failure::validation("count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Failure::validation("train_frac must lie in [0, 1]"));
    }
    let records = synthesize_dataset(seed, count, n_atoms);
    let n_train = ((count as f64) * train_frac).round() as usize;
    let n_train = n_train.min(count);
    fs::create_dir_all(out)?;
    write_dataset(&out.join("train.jsonl"), &records[..n_train])?;
    write_dataset(&out.join("test.jsonl"), &records[n_train..])?;
    println!(
        "wrote {} train and {} test records under {}",
        n_train,
        count - n_train,
        out.display()
    );
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<PairRecord>, Failure> {
    Ok(load_dataset(path)?)
}

fn cmd_train(
    config_file: Option<&Path>,
    train_data: &Path,
    test_data: Option<&Path>,
    out: &Path,
    overrides: &ConfigOverrides,
) -> Result<(), Failure> {
    let mut config = resolve_config(config_file, overrides)
        .map_err(|e| Failure::validation(format!("{e:#}")))?;
    config.train_path = Some(train_data.to_path_buf());
    config.test_path = test_data.map(Path::to_path_buf);
    config.out_dir = Some(out.to_path_buf());

    let trainset = load_split(train_data)?;
    let testset = match test_data {
        Some(p) => load_split(p)?,
        None => Vec::new(),
    };

    fs::create_dir_all(out)?;
    let checkpoints_dir = out.join("checkpoints");
    let samples_dir = out.join("samples");
    fs::create_dir_all(&checkpoints_dir)?;
    fs::create_dir_all(&samples_dir)?;

    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: config.master_seed,
        config_hash: config.config_hash_hex(),
        dataset_checksums: DatasetChecksums {
            train: file_checksum(train_data).map_err(|e| Failure::runtime(format!("{e:#}")))?,
            test: match test_data {
                Some(p) => file_checksum(p).map_err(|e| Failure::runtime(format!("{e:#}")))?,
                None => String::new(),
            },
        },
        layout: RunLayout {
            config: PathBuf::from("config.json"),
            metrics_csv: PathBuf::from("metrics.csv"),
            metrics_jsonl: PathBuf::from("metrics.jsonl"),
            checkpoints_dir: PathBuf::from("checkpoints"),
            samples_dir: PathBuf::from("samples"),
        },
        resolved_config: config.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("config.json"), &config)?;

    let result = train(&config, &trainset, &testset, Some(&checkpoints_dir))?;
    write_metrics_csv(&out.join("metrics.csv"), &result.metrics)?;
    write_metrics_jsonl(&out.join("metrics.jsonl"), &result.metrics)?;

    if let Some(last) = result.metrics.last() {
        println!(
            "trained {} epochs: loss_d={:.4} loss_g={:.4} fd={:.4}",
            result.metrics.len(),
            last.loss_d,
            last.loss_g,
            last.fd
        );
    } else {
        println!("trained 0 epochs (initial checkpoint only)");
    }
    if result.diverged {
        return Err(Failure::runtime(
            "training diverged; partial metrics and the last checkpoint were written",
        ));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ProteinFile {
    id: String,
    features: Vec<f64>,
}

#[derive(Serialize)]
struct SampleRow<'a> {
    id: String,
    protein_id: &'a str,
    atoms: Vec<u8>,
    bonds: Vec<(usize, usize, u8)>,
    properties: tagmol_core::molgraph::PropertyVector,
    valid: bool,
}

fn bonds_list(m: &Molecule) -> Vec<(usize, usize, u8)> {
    let mut bonds = Vec::new();
    for i in 0..m.n() {
        for j in (i + 1)..m.n() {
            let t = m.bond_type(i, j);
            if t != NONE_BOND {
                bonds.push((i, j, t));
            }
        }
    }
    bonds
}

fn load_checkpoint_for_cli(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(Failure::from)
}

fn cmd_sample(
    checkpoint: &Path,
    protein: &Path,
    count: usize,
    seed: u64,
    temperature: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    if count < 1 {
        return Err(Failure::validation("count must be >= 1"));
    }
    let cp = load_checkpoint_for_cli(checkpoint)?;
    let text = fs::read_to_string(protein)?;
    let pf: ProteinFile = serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("protein file: {e}")))?;
    let protein_rec = ProteinRecord::new(pf.id, pf.features)?;

    let mut rng = derive_rng(seed, "cli-sample");
    let mut tape = Tape::new();
    let enc = cp.params.encoder.stage(&mut tape, false);
    let gen = cp.params.generator.stage(&mut tape, false);
    let xp = tape.constant(
        Tensor::from_values(vec![PROTEIN_FEATURE_DIM], protein_rec.features.clone())
            .map_err(|e| Failure::validation(e.to_string()))?,
    );
    let x = encode_protein(&mut tape, &enc, xp).map_err(|e| Failure::runtime(e.to_string()))?;

    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    for k in 0..count {
        let z_vals = latent_values(&mut rng, cp.dims.zdim);
        let z = tape.constant(
            Tensor::from_values(vec![cp.dims.zdim], z_vals)
                .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        let soft = generate(&mut tape, &gen, x, z).map_err(|e| Failure::runtime(e.to_string()))?;
        let mol = discretize(&soft_values(&tape, &soft), temperature, &mut rng);
        let row = SampleRow {
            id: format!("sample-{k:05}"),
            protein_id: &protein_rec.id,
            atoms: mol.atom_types().to_vec(),
            bonds: bonds_list(&mol),
            properties: property_targets_lenient(&mol),
            valid: mol.validity_report().is_valid(),
        };
        writeln!(w, "{}", serde_json::to_string(&row).expect("sample row serializes"))?;
    }
    w.flush()?;
    println!("wrote {} samples to {}", count, out.display());
    Ok(())
}

fn check_dataset_compat(cp: &Checkpoint, records: &[PairRecord]) -> Result<(), Failure> {
    if let Some(rec) = records.first() {
        if rec.ligand.n() != cp.dims.n_atoms {
            return Err(Failure::incompatible(format!(
                "checkpoint was trained with {} atom slots but the dataset uses {}",
                cp.dims.n_atoms,
                rec.ligand.n()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FdReport {
    fd: f64,
    valid_fraction: f64,
    real_count: usize,
    per_batch_points: bool,
    seed: u64,
}

fn cmd_eval_fd(
    checkpoint: &Path,
    testset: &Path,
    max: usize,
    batch_size: usize,
    per_batch: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cp = load_checkpoint_for_cli(checkpoint)?;
    let records = load_split(testset)?;
    check_dataset_compat(&cp, &records)?;
    let config = TrainConfig {
        n_atoms: cp.dims.n_atoms,
        xdim: cp.dims.xdim,
        zdim: cp.dims.zdim,
        encoder_hidden: cp.dims.encoder_hidden,
        gen_hidden: cp.dims.gen_hidden,
        graph_dim: cp.dims.graph_dim,
        graph_layers: cp.dims.graph_layers,
        fd_eval_max: max,
        batch_size,
        fd_per_batch_points: per_batch,
        master_seed: seed,
        ..TrainConfig::default()
    };
    let (fd, valid_fraction) = evaluate_fd(&cp.params, &config, &records, 0)?;
    let report = FdReport {
        fd,
        valid_fraction,
        real_count: records.len().min(max),
        per_batch_points: per_batch,
        seed,
    };
    println!("fd={fd} valid_fraction={valid_fraction}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_eval_energy(
    checkpoint: &Path,
    dataset: &Path,
    sample_count: usize,
    seed: u64,
    layer_variant: &str,
    alpha_l2: f64,
    out: &Path,
) -> Result<(), Failure> {
    let cp = load_checkpoint_for_cli(checkpoint)?;
    let records = load_split(dataset)?;
    check_dataset_compat(&cp, &records)?;
    let variant = match layer_variant.to_lowercase().as_str() {
        "gat" => tagmol_core::networks::LayerVariant::Gat,
        "gcn" => tagmol_core::networks::LayerVariant::Gcn,
        other => return Err(Failure::validation(format!("unknown layer variant {other:?}"))),
    };
    let config = TrainConfig {
        n_atoms: cp.dims.n_atoms,
        xdim: cp.dims.xdim,
        zdim: cp.dims.zdim,
        encoder_hidden: cp.dims.encoder_hidden,
        gen_hidden: cp.dims.gen_hidden,
        graph_dim: cp.dims.graph_dim,
        graph_layers: cp.dims.graph_layers,
        layer_variant: variant,
        alpha_l2,
        ..TrainConfig::default()
    };
    let rows = binding_energy_report(&cp.params, &config, &records, sample_count, seed)?;
    fs::create_dir_all(out)?;
    write_energy_report_csv(&out.join("energy.csv"), &rows)?;
    write_energy_report_jsonl(&out.join("energy.jsonl"), &rows)?;
    let mean_gap = rows.iter().map(|r| r.energy_gap).sum::<f64>() / rows.len().max(1) as f64;
    println!("evaluated {} pairs: mean energy gap {mean_gap}", rows.len());
    Ok(())
}

fn cmd_ablate(
    config_file: Option<&Path>,
    train_data: &Path,
    test_data: &Path,
    xdims: &[usize],
    jobs: usize,
    out: &Path,
    overrides: &ConfigOverrides,
) -> Result<(), Failure> {
    let base = resolve_config(config_file, overrides)
        .map_err(|e| Failure::validation(format!("{e:#}")))?;
    let trainset = load_split(train_data)?;
    let testset = load_split(test_data)?;
    fs::create_dir_all(out)?;

    let runs = xdim_ablation(&base, xdims, &trainset, &testset, jobs)?;

    #[derive(Serialize)]
    struct Summary {
        xdim: usize,
        final_fd: f64,
        diverged: bool,
        epochs_completed: usize,
    }
    let mut summaries = Vec::new();
    for run in &runs {
        let path = out.join(format!("metrics_xdim_{}.csv", run.xdim));
        write_metrics_csv(&path, &run.metrics)?;
        summaries.push(Summary {
            xdim: run.xdim,
            final_fd: run.final_fd,
            diverged: run.diverged,
            epochs_completed: run.metrics.len(),
        });
        println!("xdim {:>3}: final fd {}", run.xdim, run.final_fd);
    }
    write_json(&out.join("summary.json"), &summaries)?;
    Ok(())
}

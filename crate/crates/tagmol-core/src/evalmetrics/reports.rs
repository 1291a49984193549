use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::molgraph::{PairRecord, PROTEIN_FEATURE_DIM};
use crate::networks::{
    discretize, encode_protein, energy_score, generate, soft_values, stage_molecule, ModelParams,
};
use crate::training::{derive_rng, train, MetricRecord, TrainConfig, TrainError, TrainOutput};

/// Per-pair binding-energy evaluation against a frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReportRow {
    pub pair_id: String,
    /// E(x, y) for the dataset ligand.
    pub energy_real: f64,
    /// Mean E(x, ŷ) over the sampled, discretized ligands.
    pub energy_fake_mean: f64,
    /// Contrastive gap E(x, y) - mean E(x, ŷ); negative means the real
    /// ligand scores a better (lower) energy than samples.
    pub energy_gap: f64,
    /// α (E(x,y)² + mean E(x,ŷ)²).
    pub scaled_mse: f64,
}

pub const ENERGY_REPORT_CSV_HEADER: &str =
    "pair_id,energy_real,energy_fake_mean,energy_gap,scaled_mse";

/// Evaluates the energy separation for every pair in the dataset: draws
/// `sample_count` latents per protein, generates and discretizes ligands,
/// and reports the mean energies. Deterministic in `seed`.
pub fn binding_energy_report(
    params: &ModelParams,
    config: &TrainConfig,
    dataset: &[PairRecord],
    sample_count: usize,
    seed: u64,
) -> Result<Vec<EnergyReportRow>, TrainError> {
    if sample_count == 0 {
        return Err(TrainError::Config("sample_count must be >= 1".into()));
    }
    let mut rng = derive_rng(seed, "energy-report");
    let mut rows = Vec::with_capacity(dataset.len());
    for rec in dataset {
        let mut tape = Tape::new();
        let enc = params.encoder.stage(&mut tape, false);
        let gen = params.generator.stage(&mut tape, false);
        let energy = params.energy.stage(&mut tape, false);
        let xp = tape.constant(
            Tensor::from_values(vec![PROTEIN_FEATURE_DIM], rec.protein.features.clone())
                .map_err(TrainError::Diff)?,
        );
        let x = encode_protein(&mut tape, &enc, xp)?;
        let real_vars = stage_molecule(&mut tape, &rec.ligand);
        let e_real = energy_score(&mut tape, &energy, x, &real_vars, config.layer_variant)?;
        let e_real = tape.value(e_real).scalar_value();

        let mut fake_sum = 0.0;
        let mut fake_sq_sum = 0.0;
        for _ in 0..sample_count {
            let z_values = crate::training::latent_values(&mut rng, config.zdim);
            let z = tape.constant(Tensor::from_values(vec![config.zdim], z_values).map_err(TrainError::Diff)?);
            let soft = generate(&mut tape, &gen, x, z)?;
            let mol = discretize(&soft_values(&tape, &soft), None, &mut rng);
            let fake_vars = stage_molecule(&mut tape, &mol);
            let e_fake = energy_score(&mut tape, &energy, x, &fake_vars, config.layer_variant)?;
            let v = tape.value(e_fake).scalar_value();
            fake_sum += v;
            fake_sq_sum += v * v;
        }
        let fake_mean = fake_sum / sample_count as f64;
        rows.push(EnergyReportRow {
            pair_id: rec.protein.id.clone(),
            energy_real: e_real,
            energy_fake_mean: fake_mean,
            energy_gap: e_real - fake_mean,
            scaled_mse: config.alpha_l2 * (e_real * e_real + fake_sq_sum / sample_count as f64),
        });
    }
    Ok(rows)
}

pub fn write_energy_report_csv(path: &Path, rows: &[EnergyReportRow]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{ENERGY_REPORT_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.pair_id, r.energy_real, r.energy_fake_mean, r.energy_gap, r.scaled_mse
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_energy_report_jsonl(path: &Path, rows: &[EnergyReportRow]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r).expect("row serializes"))?;
    }
    w.flush()?;
    Ok(())
}

/// One completed ablation sub-run.
#[derive(Debug)]
pub struct AblationRun {
    pub xdim: usize,
    pub metrics: Vec<MetricRecord>,
    pub diverged: bool,
    /// Last finite per-epoch Fréchet distance.
    pub final_fd: f64,
}

/// Trains one model per embedding width with a shared seed and identical
/// epochs, returning each run's Fréchet-distance trajectory. `jobs` bounds
/// the number of concurrent sub-runs (1 = serial); a diverged sub-run is
/// recorded, not fatal to its siblings.
pub fn xdim_ablation(
    base: &TrainConfig,
    xdims: &[usize],
    trainset: &[PairRecord],
    testset: &[PairRecord],
    jobs: usize,
) -> Result<Vec<AblationRun>, TrainError> {
    if xdims.is_empty() {
        return Err(TrainError::Config("xdim list must not be empty".into()));
    }
    let jobs = jobs.max(1);
    let mut runs: Vec<Option<Result<AblationRun, TrainError>>> = Vec::new();
    runs.resize_with(xdims.len(), || None);

    for chunk_start in (0..xdims.len()).step_by(jobs) {
        let chunk_end = (chunk_start + jobs).min(xdims.len());
        let chunk = &xdims[chunk_start..chunk_end];
        let results: Vec<Result<AblationRun, TrainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&xdim| {
                    let config = TrainConfig { xdim, ..base.clone() };
                    scope.spawn(move || {
                        let TrainOutput { metrics, diverged, .. } =
                            train(&config, trainset, testset, None)?;
                        let final_fd = metrics
                            .iter()
                            .rev()
                            .map(|m| m.fd)
                            .find(|fd| fd.is_finite())
                            .unwrap_or(f64::NAN);
                        Ok(AblationRun { xdim, metrics, diverged, final_fd })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for (offset, result) in results.into_iter().enumerate() {
            runs[chunk_start + offset] = Some(result);
        }
    }
    runs.into_iter().map(|r| r.expect("all sub-runs executed")).collect()
}

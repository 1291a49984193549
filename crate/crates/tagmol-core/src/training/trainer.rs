use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use super::adam::{adam_step, lr_at_epoch, AdamState};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::metrics::{divergence_check, MetricRecord};
use super::{TrainConfig, TrainError};
use crate::diffcore::{Tape, Tensor};
use crate::evalmetrics::{raw_feature_vector, frechet_distance, FeatureCloud};
use crate::losses::{critic_loss, energy_loss, generator_loss, reward_loss, GenBatch, GeneratorLossCfg};
use crate::molgraph::{property_targets_lenient, Molecule, PairRecord, SoftMolecule, PROTEIN_FEATURE_DIM};
use crate::networks::{
    critic_score, discretize, encode_protein_batch, energy_score, generate_batch, reward_predict,
    soft_values, stage_molecule, stage_soft, ModelParams, MolVars, ParamGroup,
};

/// Derives an independent, reproducible RNG stream from the master seed.
pub fn derive_rng(master_seed: u64, tag: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(tag.as_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(seed)
}

/// Counters from the update-isolation audit (populated when
/// `audit_updates` is set).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateAudit {
    pub outer_iterations: u64,
    pub critic_updates: u64,
    pub energy_updates: u64,
    pub reward_updates: u64,
    pub generator_updates: u64,
    /// Times a phase changed a parameter group it does not own.
    pub phase_violations: u64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub diverged: bool,
    pub audit: Option<UpdateAudit>,
}

/// Endless shuffled index stream; reshuffles whenever a pass is exhausted.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha12Rng,
}

impl BatchStream {
    fn new(n: usize, mut rng: ChaCha12Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchStream { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn protein_batch(records: &[PairRecord], idx: &[usize]) -> Tensor {
    let mut values = Vec::with_capacity(idx.len() * PROTEIN_FEATURE_DIM);
    for &i in idx {
        values.extend_from_slice(&records[i].protein.features);
    }
    Tensor::from_values(vec![idx.len(), PROTEIN_FEATURE_DIM], values).expect("protein batch")
}

/// Standard-normal draws via Box-Muller on the seeded stream; identical
/// across library versions.
pub fn latent_values(rng: &mut ChaCha12Rng, count: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(count + 1);
    while values.len() < count {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        values.push(r * theta.cos());
        if values.len() < count {
            values.push(r * theta.sin());
        }
    }
    values
}

fn latent_batch(rng: &mut ChaCha12Rng, batch: usize, zdim: usize) -> Tensor {
    Tensor::from_values(vec![batch, zdim], latent_values(rng, batch * zdim)).expect("latent batch")
}

/// Forward pass at the current parameters, values only: protein embeddings
/// and the generator's soft molecules.
fn generator_forward_values(
    params: &ModelParams,
    xp: &Tensor,
    z: &Tensor,
) -> Result<(Tensor, Vec<SoftMolecule>), TrainError> {
    let mut tape = Tape::new();
    let enc = params.encoder.stage(&mut tape, false);
    let gen = params.generator.stage(&mut tape, false);
    let xp_id = tape.constant(xp.clone());
    let z_id = tape.constant(z.clone());
    let x = encode_protein_batch(&mut tape, &enc, xp_id)?;
    let fakes = generate_batch(&mut tape, &gen, x, z_id)?;
    let softs = fakes.iter().map(|f| soft_values(&tape, f)).collect();
    Ok((tape.value(x).clone(), softs))
}

struct PhaseOutcome {
    loss: f64,
    energy_real: f64,
    energy_fake: f64,
    energy_l2: f64,
}

fn apply_group_update(
    params: &mut ModelParams,
    opt: &mut [AdamState],
    group: ParamGroup,
    grads: Vec<Tensor>,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let mut tensors = params.group_tensors_mut(group);
    adam_step(
        &mut opt[group as usize],
        &mut tensors,
        &grads,
        lr,
        config.adam_beta1,
        config.adam_beta2,
    )
}

fn critic_phase(
    params: &mut ModelParams,
    opt: &mut [AdamState],
    config: &TrainConfig,
    trainset: &[PairRecord],
    batch_idx: &[usize],
    z_rng: &mut ChaCha12Rng,
    eps_rng: &mut ChaCha12Rng,
    lr: f64,
) -> Result<f64, TrainError> {
    let xp = protein_batch(trainset, batch_idx);
    let z = latent_batch(z_rng, batch_idx.len(), config.zdim);
    let (_, fakes) = generator_forward_values(params, &xp, &z)?;
    let real: Vec<SoftMolecule> =
        batch_idx.iter().map(|&i| trainset[i].ligand.to_soft()).collect();
    let eps: Vec<f64> = (0..batch_idx.len()).map(|_| eps_rng.random::<f64>()).collect();

    let mut tape = Tape::new();
    let cv = params.critic.stage(&mut tape, true);
    let variant = config.layer_variant;
    let loss = critic_loss(
        &mut tape,
        |t, mv| critic_score(t, &cv, mv, variant),
        &real,
        &fakes,
        &eps,
        config.lambda_gp,
    )?;
    let value = tape.value(loss).scalar_value();
    let grads = tape.backward(loss)?;
    let grad_list: Vec<Tensor> =
        cv.param_ids().iter().map(|&id| tape.grad_or_zeros(&grads, id)).collect();
    apply_group_update(params, opt, ParamGroup::Critic, grad_list, lr, config)?;
    Ok(value)
}

fn energy_phase(
    params: &mut ModelParams,
    opt: &mut [AdamState],
    config: &TrainConfig,
    real: &[&Molecule],
    x_values: &Tensor,
    fakes: &[SoftMolecule],
    lr: f64,
) -> Result<PhaseOutcome, TrainError> {
    let mut tape = Tape::new();
    let ev = params.energy.stage(&mut tape, true);
    let variant = config.layer_variant;
    // gradients into the embedding are cut here: x enters as a constant
    let x_all = tape.constant(x_values.clone());
    let mut x_ids = Vec::with_capacity(real.len());
    for k in 0..real.len() {
        let row = tape.slice(x_all, 0, k, 1)?;
        x_ids.push(tape.reshape(row, vec![config.xdim])?);
    }
    let real_vars: Vec<MolVars> = real.iter().map(|m| stage_molecule(&mut tape, m)).collect();
    let fake_vars: Vec<MolVars> = fakes.iter().map(|s| stage_soft(&mut tape, s, false)).collect();
    let out = energy_loss(
        &mut tape,
        |t, x, mv| energy_score(t, &ev, x, mv, variant),
        &x_ids,
        &real_vars,
        &fake_vars,
        config.alpha_l2,
    )?;
    let value = tape.value(out.loss).scalar_value();
    let grads = tape.backward(out.loss)?;
    let grad_list: Vec<Tensor> =
        ev.param_ids().iter().map(|&id| tape.grad_or_zeros(&grads, id)).collect();
    apply_group_update(params, opt, ParamGroup::Energy, grad_list, lr, config)?;
    Ok(PhaseOutcome {
        loss: value,
        energy_real: out.mean_real,
        energy_fake: out.mean_fake,
        energy_l2: out.mean_l2,
    })
}

fn reward_phase(
    params: &mut ModelParams,
    opt: &mut [AdamState],
    config: &TrainConfig,
    real: &[&Molecule],
    fake_mols: &[Molecule],
    lr: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let rv = params.reward.stage(&mut tape, true);
    let variant = config.layer_variant;
    let real_pairs: Vec<(MolVars, Vec<f64>)> = real
        .iter()
        .map(|m| {
            let mv = stage_molecule(&mut tape, m);
            (mv, property_targets_lenient(m).as_array().to_vec())
        })
        .collect();
    let fake_pairs: Vec<(MolVars, Vec<f64>)> = fake_mols
        .iter()
        .map(|m| {
            let mv = stage_molecule(&mut tape, m);
            (mv, property_targets_lenient(m).as_array().to_vec())
        })
        .collect();
    let loss = reward_loss(
        &mut tape,
        |t, mv| reward_predict(t, &rv, mv, variant),
        &real_pairs,
        &fake_pairs,
        config.reward_coeff,
    )?;
    let value = tape.value(loss).scalar_value();
    let grads = tape.backward(loss)?;
    let grad_list: Vec<Tensor> =
        rv.param_ids().iter().map(|&id| tape.grad_or_zeros(&grads, id)).collect();
    apply_group_update(params, opt, ParamGroup::Reward, grad_list, lr, config)?;
    Ok(value)
}

fn generator_phase(
    params: &mut ModelParams,
    opt: &mut [AdamState],
    config: &TrainConfig,
    trainset: &[PairRecord],
    batch_idx: &[usize],
    xp: &Tensor,
    z: &Tensor,
    st_rng: &mut ChaCha12Rng,
    lr: f64,
) -> Result<f64, TrainError> {
    let real: Vec<Molecule> = batch_idx.iter().map(|&i| trainset[i].ligand.clone()).collect();
    let mut tape = Tape::new();
    let enc = params.encoder.stage(&mut tape, true);
    let gen = params.generator.stage(&mut tape, true);
    let critic = params.critic.stage(&mut tape, false);
    let energy = params.energy.stage(&mut tape, false);
    let reward = params.reward.stage(&mut tape, false);
    let cfg = GeneratorLossCfg {
        weights: config.loss_weights(),
        literal_energy_term: config.literal_energy_term,
        st_temperature: config.st_temperature,
        reward_coeff: config.reward_coeff,
    };
    let out = generator_loss(
        &mut tape,
        &enc,
        &gen,
        &critic,
        &energy,
        &reward,
        config.layer_variant,
        &GenBatch { xp, z, real: &real, frozen_fakes: None },
        &cfg,
        st_rng,
    )?;
    let value = tape.value(out.loss).scalar_value();
    let grads = tape.backward(out.loss)?;
    let gen_grads: Vec<Tensor> =
        gen.param_ids().iter().map(|&id| tape.grad_or_zeros(&grads, id)).collect();
    apply_group_update(params, opt, ParamGroup::Generator, gen_grads, lr, config)?;
    if !enc.mlp.is_empty() {
        let enc_grads: Vec<Tensor> =
            enc.param_ids().iter().map(|&id| tape.grad_or_zeros(&grads, id)).collect();
        apply_group_update(params, opt, ParamGroup::Encoder, enc_grads, lr, config)?;
    }
    Ok(value)
}

/// Per-epoch test-set evaluation: Fréchet distance between real ligand
/// features and freshly sampled fakes, plus the sampled validity fraction.
pub fn evaluate_fd(
    params: &ModelParams,
    config: &TrainConfig,
    testset: &[PairRecord],
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let k = testset.len().min(config.fd_eval_max);
    if k < 2 {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = derive_rng(config.master_seed, &format!("fd-eval/{epoch}"));
    let mut real_rows = Vec::with_capacity(k);
    for rec in &testset[..k] {
        real_rows.push(raw_feature_vector(&rec.ligand));
    }
    let mut fake_rows = Vec::with_capacity(k);
    let mut valid = 0usize;
    let mut at = 0;
    while at < k {
        let hi = (at + config.batch_size).min(k);
        let idx: Vec<usize> = (at..hi).collect();
        let xp = protein_batch(testset, &idx);
        let z = latent_batch(&mut rng, idx.len(), config.zdim);
        let (_, softs) = generator_forward_values(params, &xp, &z)?;
        for soft in &softs {
            let mol = discretize(soft, None, &mut rng);
            if mol.validity_report().is_valid() {
                valid += 1;
            }
            fake_rows.push(raw_feature_vector(&mol));
        }
        at = hi;
    }
    let valid_fraction = valid as f64 / k as f64;

    let (real_points, fake_points) = if config.fd_per_batch_points {
        let group = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.chunks_exact(config.batch_size).map(|chunk| chunk.concat()).collect()
        };
        (group(&real_rows), group(&fake_rows))
    } else {
        (real_rows, fake_rows)
    };
    if real_points.len() < 2 || fake_points.len() < 2 {
        return Ok((f64::NAN, valid_fraction));
    }
    let real_cloud = FeatureCloud::fit(&real_points)
        .map_err(|e| TrainError::Dataset(format!("fd real cloud: {e}")))?;
    let fake_cloud = FeatureCloud::fit(&fake_points)
        .map_err(|e| TrainError::Dataset(format!("fd fake cloud: {e}")))?;
    let fd = frechet_distance(&real_cloud, &fake_cloud)
        .map_err(|e| TrainError::Dataset(format!("fd: {e}")))?;
    Ok((fd, valid_fraction))
}

fn all_group_hashes(params: &ModelParams) -> [[u8; 32]; 5] {
    let mut out = [[0u8; 32]; 5];
    for (k, g) in ModelParams::all_groups().into_iter().enumerate() {
        out[k] = params.group_hash(g);
    }
    out
}

/// Checks the targeted-update contract: groups other than `allowed` must
/// be bitwise unchanged across the phase.
fn count_phase_violations(
    before: &[[u8; 32]; 5],
    after: &[[u8; 32]; 5],
    allowed: &[ParamGroup],
) -> u64 {
    let mut violations = 0;
    for (k, g) in ModelParams::all_groups().into_iter().enumerate() {
        if before[k] != after[k] && !allowed.contains(&g) {
            violations += 1;
        }
    }
    violations
}

/// Runs the full alternating schedule: per outer iteration, `critic_steps`
/// critic updates on fresh minibatches, then one shared fresh minibatch
/// driving the energy, reward, and joint generator+encoder updates. One
/// epoch tiles the guidance batches over a shuffled pass of the training
/// set. Fully deterministic in (config, seed).
pub fn train(
    config: &TrainConfig,
    trainset: &[PairRecord],
    testset: &[PairRecord],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if trainset.is_empty() {
        return Err(TrainError::Dataset("empty training set".into()));
    }
    for (name, set) in [("train", trainset), ("test", testset)] {
        if let Some(rec) = set.first() {
            if rec.ligand.n() != config.n_atoms {
                return Err(TrainError::Dataset(format!(
                    "{name} set has {} atom slots, config expects {}",
                    rec.ligand.n(),
                    config.n_atoms
                )));
            }
        }
    }

    let dims = config.net_dims();
    let mut params = ModelParams::init(&dims, config.master_seed);
    let mut opt: Vec<AdamState> = ModelParams::all_groups()
        .iter()
        .map(|&g| AdamState::for_tensors(&params.group_tensors(g)))
        .collect();

    let mut critic_stream = BatchStream::new(
        trainset.len(),
        derive_rng(config.master_seed, "batches/critic"),
    );
    let mut main_rng = derive_rng(config.master_seed, "batches/main");
    let mut z_rng = derive_rng(config.master_seed, "latents");
    let mut eps_rng = derive_rng(config.master_seed, "gp-eps");
    let mut st_rng = derive_rng(config.master_seed, "st-sampling");

    let mut metrics: Vec<MetricRecord> = Vec::with_capacity(config.epochs);
    let mut audit = config.audit_updates.then(UpdateAudit::default);
    let mut diverged = false;

    let write_cp = |params: &ModelParams, opt: &[AdamState], epoch: u64| -> Result<Checkpoint, TrainError> {
        let cp = Checkpoint {
            config_hash: config.config_hash(),
            epoch,
            dims: dims.clone(),
            params: params.clone(),
            opt: opt.to_vec(),
        };
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch_{epoch}.bin")), &cp)?;
        }
        Ok(cp)
    };

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(epoch, config);

        let mut main_order: Vec<usize> = (0..trainset.len()).collect();
        main_order.shuffle(&mut main_rng);
        let outer_iters = trainset.len().div_ceil(config.batch_size);

        let (mut sum_d, mut sum_g, mut sum_e, mut sum_r) = (0.0, 0.0, 0.0, 0.0);
        let (mut sum_er, mut sum_ef, mut sum_el2) = (0.0, 0.0, 0.0);
        let (mut count_d, mut count_g, mut count_e, mut count_r) = (0u64, 0u64, 0u64, 0u64);

        for outer in 0..outer_iters {
            if let Some(a) = audit.as_mut() {
                a.outer_iterations += 1;
            }
            // m critic steps, each on a fresh minibatch and fresh z
            for _ in 0..config.critic_steps {
                let batch = critic_stream.next_batch(config.batch_size.min(trainset.len()));
                let before = audit.as_ref().map(|_| all_group_hashes(&params));
                match critic_phase(&mut params, &mut opt, config, trainset, &batch, &mut z_rng, &mut eps_rng, lr) {
                    Ok(v) => {
                        sum_d += v;
                        count_d += 1;
                    }
                    Err(TrainError::NonFiniteGradient { .. }) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                if let (Some(a), Some(before)) = (audit.as_mut(), before) {
                    a.critic_updates += 1;
                    a.phase_violations +=
                        count_phase_violations(&before, &all_group_hashes(&params), &[ParamGroup::Critic]);
                }
            }

            // one shared fresh batch for the guidance phases
            let lo = outer * config.batch_size;
            let hi = (lo + config.batch_size).min(main_order.len());
            let shared: Vec<usize> = main_order[lo..hi].to_vec();
            let guidance = |stream: &mut BatchStream, shared: &[usize], flag: bool| -> Vec<usize> {
                if flag {
                    stream.next_batch(shared.len())
                } else {
                    shared.to_vec()
                }
            };

            let e_batch = guidance(&mut critic_stream, &shared, config.separate_guidance_batches);
            let xp = protein_batch(trainset, &e_batch);
            let z = latent_batch(&mut z_rng, e_batch.len(), config.zdim);
            let (x_values, fakes) = generator_forward_values(&params, &xp, &z)?;
            let real_mols: Vec<&Molecule> = e_batch.iter().map(|&i| &trainset[i].ligand).collect();

            if config.train_energy {
                let before = audit.as_ref().map(|_| all_group_hashes(&params));
                match energy_phase(&mut params, &mut opt, config, &real_mols, &x_values, &fakes, lr) {
                    Ok(out) => {
                        sum_e += out.loss;
                        sum_er += out.energy_real;
                        sum_ef += out.energy_fake;
                        sum_el2 += out.energy_l2;
                        count_e += 1;
                    }
                    Err(TrainError::NonFiniteGradient { .. }) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                if let (Some(a), Some(before)) = (audit.as_mut(), before) {
                    a.energy_updates += 1;
                    a.phase_violations +=
                        count_phase_violations(&before, &all_group_hashes(&params), &[ParamGroup::Energy]);
                }
            }

            if config.train_reward {
                let fake_mols: Vec<Molecule> =
                    fakes.iter().map(|s| discretize(s, config.st_temperature, &mut st_rng)).collect();
                let before = audit.as_ref().map(|_| all_group_hashes(&params));
                match reward_phase(&mut params, &mut opt, config, &real_mols, &fake_mols, lr) {
                    Ok(v) => {
                        sum_r += v;
                        count_r += 1;
                    }
                    Err(TrainError::NonFiniteGradient { .. }) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                if let (Some(a), Some(before)) = (audit.as_mut(), before) {
                    a.reward_updates += 1;
                    a.phase_violations +=
                        count_phase_violations(&before, &all_group_hashes(&params), &[ParamGroup::Reward]);
                }
            }

            {
                let before = audit.as_ref().map(|_| all_group_hashes(&params));
                match generator_phase(&mut params, &mut opt, config, trainset, &e_batch, &xp, &z, &mut st_rng, lr) {
                    Ok(v) => {
                        sum_g += v;
                        count_g += 1;
                    }
                    Err(TrainError::NonFiniteGradient { .. }) => {
                        diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                if let (Some(a), Some(before)) = (audit.as_mut(), before) {
                    a.generator_updates += 1;
                    a.phase_violations += count_phase_violations(
                        &before,
                        &all_group_hashes(&params),
                        &[ParamGroup::Generator, ParamGroup::Encoder],
                    );
                }
            }
        }

        let (fd, valid_fraction) = evaluate_fd(&params, config, testset, epoch)?;
        let mean = |sum: f64, n: u64| if n > 0 { sum / n as f64 } else { 0.0 };
        metrics.push(MetricRecord {
            epoch,
            loss_d: mean(sum_d, count_d),
            loss_g: mean(sum_g, count_g),
            loss_e: mean(sum_e, count_e),
            loss_r: mean(sum_r, count_r),
            energy_real: mean(sum_er, count_e),
            energy_fake: mean(sum_ef, count_e),
            energy_l2: mean(sum_el2, count_e),
            fd,
            valid_fraction,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });

        if divergence_check(&metrics) {
            diverged = true;
            break;
        }
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            write_cp(&params, &opt, (epoch + 1) as u64)?;
        }
    }

    let final_epoch = metrics.len() as u64;
    let checkpoint = write_cp(&params, &opt, final_epoch)?;
    Ok(TrainOutput { checkpoint, metrics, diverged, audit })
}

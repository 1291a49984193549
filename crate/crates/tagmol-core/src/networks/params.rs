use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{DiffError, Tape, Tensor, TensorId};
use crate::molgraph::{ATOM_TYPE_COUNT, BOND_TYPE_COUNT};

/// Which graph layer the critic, energy, and reward trunks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerVariant {
    Gcn,
    Gat,
}

/// All width/depth hyperparameters needed to build parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub n_atoms: usize,
    pub xdim: usize,
    pub zdim: usize,
    pub encoder_hidden: usize,
    pub gen_hidden: [usize; 3],
    /// Graph layer feature width F'.
    pub graph_dim: usize,
    pub graph_layers: usize,
    pub property_count: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            n_atoms: 32,
            xdim: 16,
            zdim: 32,
            encoder_hidden: 64,
            gen_hidden: [128, 256, 512],
            graph_dim: 64,
            graph_layers: 2,
            property_count: 3,
        }
    }
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_values(vec![rows, cols], values).expect("glorot shape")
}

/// One dense layer: `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    fn init(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Self {
        LinearParams { w: glorot(rng, fan_in, fan_out), b: Tensor::zeros(vec![fan_out]) }
    }

    fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<LinearVars, DiffError> {
        Ok(LinearVars { w: src.stage(tape, &self.w)?, b: src.stage(tape, &self.b)? })
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: TensorId,
    pub b: TensorId,
}

/// Where staged parameter tensors come from: cloned fresh onto the tape,
/// or sliced out of one flat vector already on the tape (used to run
/// finite-difference checks over a whole parameter group).
pub enum StageSource {
    Fresh { trainable: bool },
    Vector { vec: TensorId, offset: usize },
}

impl StageSource {
    fn stage(&mut self, tape: &mut Tape, t: &Tensor) -> Result<TensorId, DiffError> {
        match self {
            StageSource::Fresh { trainable: true } => Ok(tape.leaf(t.clone().with_grad())),
            StageSource::Fresh { trainable: false } => Ok(tape.constant(t.clone())),
            StageSource::Vector { vec, offset } => {
                let flat = tape.slice(*vec, 0, *offset, t.numel())?;
                *offset += t.numel();
                tape.reshape(flat, t.shape.clone())
            }
        }
    }
}

/// Protein encoder τ: 21 -> hidden -> xdim. Empty when xdim = 0, which
/// turns the whole pipeline unconditional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub mlp: Vec<LinearParams>,
    pub xdim: usize,
}

impl EncoderParams {
    pub fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        let mlp = if dims.xdim == 0 {
            Vec::new()
        } else {
            vec![
                LinearParams::init(rng, crate::molgraph::PROTEIN_FEATURE_DIM, dims.encoder_hidden),
                LinearParams::init(rng, dims.encoder_hidden, dims.xdim),
            ]
        };
        EncoderParams { mlp, xdim: dims.xdim }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    pub fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<EncoderVars, DiffError> {
        Ok(EncoderVars {
            mlp: self.mlp.iter().map(|l| l.stage_with(tape, src)).collect::<Result<_, _>>()?,
            xdim: self.xdim,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub mlp: Vec<LinearVars>,
    pub xdim: usize,
}

impl EncoderVars {
    /// Staged tensor ids in the same order as the group's tensor list.
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.mlp.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Ligand generator φ: fused (xdim + zdim) MLP with an atom head and a
/// bond head over the fixed slot grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub mlp: Vec<LinearParams>,
    pub atom_head: LinearParams,
    pub bond_head: LinearParams,
    pub n_atoms: usize,
}

impl GeneratorParams {
    pub fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        let [g0, g1, g2] = dims.gen_hidden;
        let fused = dims.xdim + dims.zdim;
        let n = dims.n_atoms;
        GeneratorParams {
            mlp: vec![
                LinearParams::init(rng, fused, g0),
                LinearParams::init(rng, g0, g1),
                LinearParams::init(rng, g1, g2),
            ],
            atom_head: LinearParams::init(rng, g2, n * ATOM_TYPE_COUNT),
            bond_head: LinearParams::init(rng, g2, n * n * BOND_TYPE_COUNT),
            n_atoms: n,
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    pub fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<GeneratorVars, DiffError> {
        Ok(GeneratorVars {
            mlp: self.mlp.iter().map(|l| l.stage_with(tape, src)).collect::<Result<_, _>>()?,
            atom_head: self.atom_head.stage_with(tape, src)?,
            bond_head: self.bond_head.stage_with(tape, src)?,
            n_atoms: self.n_atoms,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub mlp: Vec<LinearVars>,
    pub atom_head: LinearVars,
    pub bond_head: LinearVars,
    pub n_atoms: usize,
}

impl GeneratorVars {
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids: Vec<TensorId> = self.mlp.iter().flat_map(|l| [l.w, l.b]).collect();
        ids.extend([self.atom_head.w, self.atom_head.b, self.bond_head.w, self.bond_head.b]);
        ids
    }
}

/// One relational graph layer: a per-relation projection W_r and attention
/// vector a_r for every bond type except None, plus a self-connection
/// weight used only by the GCN variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLayerParams {
    pub self_w: Tensor,
    pub rel_w: Vec<Tensor>,
    pub rel_a: Vec<Tensor>,
}

pub const RELATION_COUNT: usize = BOND_TYPE_COUNT - 1;

impl GraphLayerParams {
    pub fn init(rng: &mut ChaCha12Rng, f_in: usize, f_out: usize) -> Self {
        GraphLayerParams {
            self_w: glorot(rng, f_in, f_out),
            rel_w: (0..RELATION_COUNT).map(|_| glorot(rng, f_in, f_out)).collect(),
            rel_a: (0..RELATION_COUNT)
                .map(|_| {
                    // Attention starts near-uniform: large initial scores
                    // concentrate mass on non-edges and blow up the
                    // interpolant gradients the critic penalty probes.
                    let t = glorot(rng, 2 * f_out, 1);
                    let values = t.values.iter().map(|v| v * 0.1).collect();
                    Tensor::from_values(vec![2 * f_out], values).expect("attention vector")
                })
                .collect(),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> GraphLayerVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<GraphLayerVars, DiffError> {
        Ok(GraphLayerVars {
            self_w: src.stage(tape, &self.self_w)?,
            rel_w: self.rel_w.iter().map(|t| src.stage(tape, t)).collect::<Result<_, _>>()?,
            rel_a: self.rel_a.iter().map(|t| src.stage(tape, t)).collect::<Result<_, _>>()?,
        })
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.self_w"), &self.self_w));
        for (r, t) in self.rel_w.iter().enumerate() {
            out.push((format!("{prefix}.rel_w{r}"), t));
        }
        for (r, t) in self.rel_a.iter().enumerate() {
            out.push((format!("{prefix}.rel_a{r}"), t));
        }
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.self_w);
        for t in &mut self.rel_w {
            out.push(t);
        }
        for t in &mut self.rel_a {
            out.push(t);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphLayerVars {
    pub self_w: TensorId,
    pub rel_w: Vec<TensorId>,
    pub rel_a: Vec<TensorId>,
}

impl GraphLayerVars {
    fn push_ids(&self, out: &mut Vec<TensorId>) {
        out.push(self.self_w);
        out.extend(&self.rel_w);
        out.extend(&self.rel_a);
    }
}

/// Stack of graph layers shared by critic, energy, and reward networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTrunkParams {
    pub layers: Vec<GraphLayerParams>,
}

impl GraphTrunkParams {
    fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.graph_layers);
        let mut f_in = ATOM_TYPE_COUNT;
        for _ in 0..dims.graph_layers {
            layers.push(GraphLayerParams::init(rng, f_in, dims.graph_dim));
            f_in = dims.graph_dim;
        }
        GraphTrunkParams { layers }
    }

    fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<GraphTrunkVars, DiffError> {
        Ok(GraphTrunkVars {
            layers: self.layers.iter().map(|l| l.stage_with(tape, src)).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GraphTrunkVars {
    pub layers: Vec<GraphLayerVars>,
}

/// Wasserstein critic ψ: graph trunk plus an unbounded scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub trunk: GraphTrunkParams,
    pub head: LinearParams,
}

impl CriticParams {
    pub fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        CriticParams {
            trunk: GraphTrunkParams::init(dims, rng),
            head: LinearParams::init(rng, 2 * dims.graph_dim, 1),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> CriticVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    pub fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<CriticVars, DiffError> {
        Ok(CriticVars {
            trunk: self.trunk.stage_with(tape, src)?,
            head: self.head.stage_with(tape, src)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CriticVars {
    pub trunk: GraphTrunkVars,
    pub head: LinearVars,
}

impl CriticVars {
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for l in &self.trunk.layers {
            l.push_ids(&mut ids);
        }
        ids.extend([self.head.w, self.head.b]);
        ids
    }
}

/// Energy network θ: graph trunk, then the aggregated graph feature is
/// fused with the protein embedding and mapped to a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub trunk: GraphTrunkParams,
    pub fusion: Vec<LinearParams>,
    pub xdim: usize,
}

impl EnergyParams {
    pub fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        EnergyParams {
            trunk: GraphTrunkParams::init(dims, rng),
            fusion: vec![
                LinearParams::init(rng, 2 * dims.graph_dim + dims.xdim, dims.graph_dim),
                LinearParams::init(rng, dims.graph_dim, 1),
            ],
            xdim: dims.xdim,
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> EnergyVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    pub fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<EnergyVars, DiffError> {
        Ok(EnergyVars {
            trunk: self.trunk.stage_with(tape, src)?,
            fusion: self.fusion.iter().map(|l| l.stage_with(tape, src)).collect::<Result<_, _>>()?,
            xdim: self.xdim,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnergyVars {
    pub trunk: GraphTrunkVars,
    pub fusion: Vec<LinearVars>,
    pub xdim: usize,
}

impl EnergyVars {
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for l in &self.trunk.layers {
            l.push_ids(&mut ids);
        }
        for l in &self.fusion {
            ids.extend([l.w, l.b]);
        }
        ids
    }
}

/// Reward network ω: critic architecture with a sigmoid property head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub trunk: GraphTrunkParams,
    pub head: LinearParams,
}

impl RewardParams {
    pub fn init(dims: &NetDims, rng: &mut ChaCha12Rng) -> Self {
        RewardParams {
            trunk: GraphTrunkParams::init(dims, rng),
            head: LinearParams::init(rng, 2 * dims.graph_dim, dims.property_count),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> RewardVars {
        self.stage_with(tape, &mut StageSource::Fresh { trainable }).expect("fresh staging")
    }

    pub fn stage_with(&self, tape: &mut Tape, src: &mut StageSource) -> Result<RewardVars, DiffError> {
        Ok(RewardVars {
            trunk: self.trunk.stage_with(tape, src)?,
            head: self.head.stage_with(tape, src)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RewardVars {
    pub trunk: GraphTrunkVars,
    pub head: LinearVars,
}

impl RewardVars {
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for l in &self.trunk.layers {
            l.push_ids(&mut ids);
        }
        ids.extend([self.head.w, self.head.b]);
        ids
    }
}

/// The five parameter groups of the model, in update order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub generator: GeneratorParams,
    pub critic: CriticParams,
    pub energy: EnergyParams,
    pub reward: RewardParams,
}

/// Names of the parameter groups, aligned with [`ParamGroup`] order.
pub const GROUP_NAMES: [&str; 5] = ["encoder", "generator", "critic", "energy", "reward"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder = 0,
    Generator = 1,
    Critic = 2,
    Energy = 3,
    Reward = 4,
}

impl ModelParams {
    /// Deterministic initialization: each group draws from its own stream
    /// derived from the master seed.
    pub fn init(dims: &NetDims, master_seed: u64) -> Self {
        let stream = |tag: u64| ChaCha12Rng::seed_from_u64(master_seed ^ tag);
        ModelParams {
            encoder: EncoderParams::init(dims, &mut stream(0x656e63)),
            generator: GeneratorParams::init(dims, &mut stream(0x67656e)),
            critic: CriticParams::init(dims, &mut stream(0x637269)),
            energy: EnergyParams::init(dims, &mut stream(0x656e65)),
            reward: RewardParams::init(dims, &mut stream(0x726577)),
        }
    }

    /// Named read views of one group's tensors, in stable declaration order.
    pub fn group_tensors(&self, g: ParamGroup) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match g {
            ParamGroup::Encoder => {
                for (i, l) in self.encoder.mlp.iter().enumerate() {
                    l.push_tensors(&format!("enc.mlp{i}"), &mut out);
                }
            }
            ParamGroup::Generator => {
                for (i, l) in self.generator.mlp.iter().enumerate() {
                    l.push_tensors(&format!("gen.mlp{i}"), &mut out);
                }
                self.generator.atom_head.push_tensors("gen.atom_head", &mut out);
                self.generator.bond_head.push_tensors("gen.bond_head", &mut out);
            }
            ParamGroup::Critic => {
                for (i, l) in self.critic.trunk.layers.iter().enumerate() {
                    l.push_tensors(&format!("critic.layer{i}"), &mut out);
                }
                self.critic.head.push_tensors("critic.head", &mut out);
            }
            ParamGroup::Energy => {
                for (i, l) in self.energy.trunk.layers.iter().enumerate() {
                    l.push_tensors(&format!("energy.layer{i}"), &mut out);
                }
                for (i, l) in self.energy.fusion.iter().enumerate() {
                    l.push_tensors(&format!("energy.fusion{i}"), &mut out);
                }
            }
            ParamGroup::Reward => {
                for (i, l) in self.reward.trunk.layers.iter().enumerate() {
                    l.push_tensors(&format!("reward.layer{i}"), &mut out);
                }
                self.reward.head.push_tensors("reward.head", &mut out);
            }
        }
        out
    }

    /// Mutable views in the same order as [`ModelParams::group_tensors`].
    pub fn group_tensors_mut(&mut self, g: ParamGroup) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match g {
            ParamGroup::Encoder => {
                for l in &mut self.encoder.mlp {
                    l.push_tensors_mut(&mut out);
                }
            }
            ParamGroup::Generator => {
                for l in &mut self.generator.mlp {
                    l.push_tensors_mut(&mut out);
                }
                self.generator.atom_head.push_tensors_mut(&mut out);
                self.generator.bond_head.push_tensors_mut(&mut out);
            }
            ParamGroup::Critic => {
                for l in &mut self.critic.trunk.layers {
                    l.push_tensors_mut(&mut out);
                }
                self.critic.head.push_tensors_mut(&mut out);
            }
            ParamGroup::Energy => {
                for l in &mut self.energy.trunk.layers {
                    l.push_tensors_mut(&mut out);
                }
                for l in &mut self.energy.fusion {
                    l.push_tensors_mut(&mut out);
                }
            }
            ParamGroup::Reward => {
                for l in &mut self.reward.trunk.layers {
                    l.push_tensors_mut(&mut out);
                }
                self.reward.head.push_tensors_mut(&mut out);
            }
        }
        out
    }

    /// All of a group's values as one flat vector (staging-order).
    pub fn flatten_group(&self, g: ParamGroup) -> Tensor {
        let mut values = Vec::new();
        for (_, t) in self.group_tensors(g) {
            values.extend_from_slice(&t.values);
        }
        let len = values.len();
        Tensor::from_values(vec![len], values).expect("flat group")
    }

    /// SHA-256 over a group's tensor bit patterns; used by the update
    /// isolation audit.
    pub fn group_hash(&self, g: ParamGroup) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.group_tensors(g) {
            hasher.update(name.as_bytes());
            for &v in &t.values {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn all_groups() -> [ParamGroup; 5] {
        [
            ParamGroup::Encoder,
            ParamGroup::Generator,
            ParamGroup::Critic,
            ParamGroup::Energy,
            ParamGroup::Reward,
        ]
    }
}

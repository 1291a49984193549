use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::diffcore::{DiffError, Tape, Tensor, TensorId};
use crate::molgraph::{Molecule, SoftMolecule, ATOM_TYPE_COUNT, BOND_TYPE_COUNT, NONE_BOND};

use super::params::{
    EncoderVars, GeneratorVars, GraphLayerVars, GraphTrunkVars, LayerVariant, LinearVars,
    RELATION_COUNT,
};
use super::{CriticVars, EnergyVars, RewardVars};

/// LeakyReLU slope used by every nonlinearity in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Uniform mass mixed into each off-diagonal bond fiber of the generator
/// output. The attention normalization divides by a node's total
/// neighbor mass, so soft molecules must stay bounded away from zero mass
/// on every node or WGAN-GP interpolant gradients become unbounded as the
/// generator's softmax sharpens.
pub const BOND_PROB_FLOOR_MIX: f64 = 1e-3;

/// A molecule staged on the tape: `[n, A]` atom rows and `[n, n, B]` bond
/// fibers. Rows/fibers may be hard one-hots or soft probabilities.
#[derive(Debug, Clone, Copy)]
pub struct MolVars {
    pub n: usize,
    pub atoms: TensorId,
    pub bonds: TensorId,
}

/// Stages a hard molecule as constants.
pub fn stage_molecule(tape: &mut Tape, m: &Molecule) -> MolVars {
    let atoms = tape.constant(m.atom_tensor());
    let bonds = tape.constant(m.bond_tensor());
    MolVars { n: m.n(), atoms, bonds }
}

/// Stages a soft molecule; with `requires_grad` the atom and bond tensors
/// become gradient targets (the WGAN-GP interpolate needs this).
pub fn stage_soft(tape: &mut Tape, s: &SoftMolecule, requires_grad: bool) -> MolVars {
    let mut atoms = s.atom_probs.clone();
    let mut bonds = s.bond_probs.clone();
    atoms.requires_grad = requires_grad;
    bonds.requires_grad = requires_grad;
    MolVars { n: s.n, atoms: tape.leaf(atoms), bonds: tape.leaf(bonds) }
}

/// Reads a staged molecule's current values back out of the tape.
pub fn soft_values(tape: &Tape, mol: &MolVars) -> SoftMolecule {
    SoftMolecule {
        n: mol.n,
        atom_probs: tape.value(mol.atoms).clone(),
        bond_probs: tape.value(mol.bonds).clone(),
    }
}

/// `x W + b` for a `[m, in]` batch.
fn linear(tape: &mut Tape, x: TensorId, l: &LinearVars) -> Result<TensorId, DiffError> {
    let m = tape.shape(x)[0];
    let xw = tape.matmul(x, l.w)?;
    let out = tape.shape(l.b)[0];
    let b_row = tape.reshape(l.b, vec![1, out])?;
    let b_rows = tape.expand(b_row, 0, m)?;
    tape.add(xw, b_rows)
}

fn mlp_leaky(tape: &mut Tape, mut h: TensorId, layers: &[LinearVars]) -> Result<TensorId, DiffError> {
    for l in layers {
        let lin = linear(tape, h, l)?;
        h = tape.leaky_relu(lin, LEAKY_SLOPE)?;
    }
    Ok(h)
}

/// Protein encoder on a `[batch, 21]` feature matrix -> `[batch, xdim]`.
/// With xdim = 0 the embedding is the empty vector for every protein.
pub fn encode_protein_batch(
    tape: &mut Tape,
    enc: &EncoderVars,
    xp: TensorId,
) -> Result<TensorId, DiffError> {
    let batch = tape.shape(xp)[0];
    if enc.xdim == 0 {
        return Ok(tape.zeros_const(vec![batch, 0]));
    }
    let hidden = linear(tape, xp, &enc.mlp[0])?;
    let act = tape.leaky_relu(hidden, LEAKY_SLOPE)?;
    linear(tape, act, &enc.mlp[1])
}

/// Single-protein embedding: `[21]` -> `[xdim]`.
pub fn encode_protein(
    tape: &mut Tape,
    enc: &EncoderVars,
    xp: TensorId,
) -> Result<TensorId, DiffError> {
    let dim = tape.shape(xp).first().copied().unwrap_or(0);
    let row = tape.reshape(xp, vec![1, dim])?;
    let emb = encode_protein_batch(tape, enc, row)?;
    tape.reshape(emb, vec![enc.xdim])
}

/// Constant masks for the generator's bond output: an off-diagonal
/// indicator, a one-hot None diagonal, and the uniform off-diagonal
/// mixture that keeps fibers away from the attention singular set.
fn diagonal_masks(n: usize) -> (Tensor, Tensor, Tensor) {
    let mut off = Tensor::ones(vec![n, n, BOND_TYPE_COUNT]);
    let mut diag = Tensor::zeros(vec![n, n, BOND_TYPE_COUNT]);
    for i in 0..n {
        for t in 0..BOND_TYPE_COUNT {
            off.values[(i * n + i) * BOND_TYPE_COUNT + t] = 0.0;
        }
        diag.values[(i * n + i) * BOND_TYPE_COUNT + NONE_BOND as usize] = 1.0;
    }
    let mut mix = off.clone();
    for v in &mut mix.values {
        *v *= BOND_PROB_FLOOR_MIX / BOND_TYPE_COUNT as f64;
    }
    (off, diag, mix)
}

/// Generator forward for a batch: protein embeddings `[m, xdim]` and
/// latents `[m, zdim]` -> one soft molecule per row. Atom rows are
/// softmaxed; the bond logit tensor is symmetrized as (T + Tᵀ)/2 before the
/// per-fiber softmax and the diagonal is forced to one-hot None after it.
pub fn generate_batch(
    tape: &mut Tape,
    gen: &GeneratorVars,
    x: TensorId,
    z: TensorId,
) -> Result<Vec<MolVars>, DiffError> {
    let batch = tape.shape(x)[0];
    let n = gen.n_atoms;
    let fused = tape.concat(1, &[x, z])?;
    let h = mlp_leaky(tape, fused, &gen.mlp)?;
    let atoms_flat = linear(tape, h, &gen.atom_head)?;
    let bonds_flat = linear(tape, h, &gen.bond_head)?;
    let (off_mask, diag_add, uniform_mix) = diagonal_masks(n);
    let off_id = tape.constant(off_mask);
    let diag_id = tape.constant(diag_add);
    let mix_id = tape.constant(uniform_mix);

    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let arow = tape.slice(atoms_flat, 0, i, 1)?;
        let alogits = tape.reshape(arow, vec![n, ATOM_TYPE_COUNT])?;
        let atoms = tape.softmax(alogits, 1)?;

        let brow = tape.slice(bonds_flat, 0, i, 1)?;
        let blogits = tape.reshape(brow, vec![n, n, BOND_TYPE_COUNT])?;
        let bt = tape.permute(blogits, &[1, 0, 2])?;
        let bsum = tape.add(blogits, bt)?;
        let bsym = tape.scale(bsum, 0.5)?;
        let bprobs = tape.softmax(bsym, 2)?;
        let bdamped = tape.scale(bprobs, 1.0 - BOND_PROB_FLOOR_MIX)?;
        let boff = tape.mul(bdamped, off_id)?;
        let bfloored = tape.add(boff, mix_id)?;
        let bonds = tape.add(bfloored, diag_id)?;

        out.push(MolVars { n, atoms, bonds });
    }
    Ok(out)
}

/// Single-sample generator forward.
pub fn generate(
    tape: &mut Tape,
    gen: &GeneratorVars,
    x: TensorId,
    z: TensorId,
) -> Result<MolVars, DiffError> {
    let xd = tape.shape(x).first().copied().unwrap_or(0);
    let zd = tape.shape(z)[0];
    let xr = tape.reshape(x, vec![1, xd])?;
    let zr = tape.reshape(z, vec![1, zd])?;
    Ok(generate_batch(tape, gen, xr, zr)?.remove(0))
}

fn pick_category(row: &[f64], temperature: Option<f64>, rng: &mut ChaCha12Rng) -> usize {
    match temperature {
        None => {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        }
        Some(t) => {
            let weights: Vec<f64> = row.iter().map(|&p| p.max(0.0).powf(1.0 / t)).collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return 0;
            }
            let mut r = rng.random_range(0.0..total);
            for (k, &w) in weights.iter().enumerate() {
                if r < w {
                    return k;
                }
                r -= w;
            }
            weights.len() - 1
        }
    }
}

/// A committed discretization: the hard molecule plus the additive shift
/// that turns the soft tensors into its one-hot form. Replaying a frozen
/// decision at perturbed parameters keeps the loss smooth, which is what
/// gradient checks of the straight-through surrogate probe.
#[derive(Debug, Clone)]
pub struct StDecision {
    pub mol: Molecule,
    pub delta_atoms: Tensor,
    pub delta_bonds: Tensor,
}

/// Discretizes soft probabilities into a hard molecule: argmax by default,
/// tempered categorical sampling when a temperature is given; upper
/// triangle mirrored, diagonal None.
pub fn discretize(
    soft: &SoftMolecule,
    temperature: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> Molecule {
    let n = soft.n;
    let mut mol = Molecule::empty(n);
    for i in 0..n {
        let row = &soft.atom_probs.values[i * ATOM_TYPE_COUNT..(i + 1) * ATOM_TYPE_COUNT];
        mol.set_atom(i, pick_category(row, temperature, rng) as u8);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let fiber = &soft.bond_probs.values
                [(i * n + j) * BOND_TYPE_COUNT..(i * n + j + 1) * BOND_TYPE_COUNT];
            let t = pick_category(fiber, temperature, rng) as u8;
            if t != NONE_BOND {
                mol.set_bond(i, j, t);
            }
        }
    }
    mol
}

/// Commits a discretization for the soft molecule's current values.
pub fn straight_through_decide(
    tape: &Tape,
    soft: &MolVars,
    temperature: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> StDecision {
    let values = soft_values(tape, soft);
    let mol = discretize(&values, temperature, rng);
    decision_for(soft, &values.atom_probs.values, &values.bond_probs.values, mol)
}

/// Builds the decision record for a chosen hard molecule against the soft
/// molecule's current values.
pub fn decide_as(tape: &Tape, soft: &MolVars, mol: Molecule) -> StDecision {
    decision_for(soft, tape.values(soft.atoms), tape.values(soft.bonds), mol)
}

fn decision_for(soft: &MolVars, atom_vals: &[f64], bond_vals: &[f64], mol: Molecule) -> StDecision {
    let _ = soft;
    let hard_atoms = mol.atom_tensor();
    let hard_bonds = mol.bond_tensor();
    let delta_atoms = Tensor {
        shape: hard_atoms.shape.clone(),
        values: hard_atoms.values.iter().zip(atom_vals).map(|(&h, &s)| h - s).collect(),
        requires_grad: false,
    };
    let delta_bonds = Tensor {
        shape: hard_bonds.shape.clone(),
        values: hard_bonds.values.iter().zip(bond_vals).map(|(&h, &s)| h - s).collect(),
        requires_grad: false,
    };
    StDecision { mol, delta_atoms, delta_bonds }
}

/// Applies a committed discretization with the straight-through estimator:
/// forward value is `soft + delta` (the hard one-hot when replayed at the
/// deciding point), backward is identity into the soft probabilities.
pub fn straight_through_replay(
    tape: &mut Tape,
    soft: &MolVars,
    decision: &StDecision,
) -> Result<MolVars, DiffError> {
    let da = tape.constant(decision.delta_atoms.clone());
    let db = tape.constant(decision.delta_bonds.clone());
    let st_atoms = tape.add(soft.atoms, da)?;
    let st_bonds = tape.add(soft.bonds, db)?;
    Ok(MolVars { n: soft.n, atoms: st_atoms, bonds: st_bonds })
}

/// Decide-and-replay in one step: discretizes the soft molecule's current
/// values and returns both the hard molecule and its straight-through
/// tensors.
pub fn straight_through_sample(
    tape: &mut Tape,
    soft: &MolVars,
    temperature: Option<f64>,
    rng: &mut ChaCha12Rng,
) -> Result<(Molecule, MolVars), DiffError> {
    let decision = straight_through_decide(tape, soft, temperature, rng);
    let hard = straight_through_replay(tape, soft, &decision)?;
    Ok((decision.mol, hard))
}

/// Per-relation projected features U_r = H W_r.
fn relation_features(
    tape: &mut Tape,
    layer: &GraphLayerVars,
    h: TensorId,
) -> Result<Vec<TensorId>, DiffError> {
    layer.rel_w.iter().map(|&w| tape.matmul(h, w)).collect()
}

/// Bond-type probabilities laid out as one `[n, R*n]` block row per node
/// (relation r occupies columns r*n..(r+1)*n).
fn relation_probs(tape: &mut Tape, bonds: TensorId, n: usize) -> Result<TensorId, DiffError> {
    let mut blocks = Vec::with_capacity(RELATION_COUNT);
    for r in 0..RELATION_COUNT {
        let fiber = tape.slice(bonds, 2, r + 1, 1)?;
        blocks.push(tape.reshape(fiber, vec![n, n])?);
    }
    tape.concat(1, &blocks)
}

/// Normalizes non-negative edge weights per node, adding 1 to the
/// denominator of nodes whose weights sum to exactly zero (isolated nodes)
/// so they come out with all-zero coefficients instead of NaN.
fn normalize_per_node(tape: &mut Tape, w: TensorId) -> Result<TensorId, DiffError> {
    let cols = tape.shape(w)[1];
    let rowsum = tape.sum_axis(w, 1)?;
    let guard_vals: Vec<f64> =
        tape.values(rowsum).iter().map(|&s| if s == 0.0 { 1.0 } else { 0.0 }).collect();
    let n = tape.shape(rowsum)[0];
    let guard = tape.constant(Tensor::from_values(vec![n, 1], guard_vals)?);
    let den = tape.add(rowsum, guard)?;
    let den_e = tape.expand(den, 1, cols)?;
    tape.div(w, den_e)
}

/// Joint single-head attention over all relations and neighbors of each
/// node: coefficients are exp of a LeakyReLU-scored pair feature, weighted
/// by the bond-type probability, normalized so each node's coefficients
/// sum to 1. Returns the `[n, R*n]` coefficient matrix and the per-relation
/// projected features.
pub fn rgat_attention(
    tape: &mut Tape,
    layer: &GraphLayerVars,
    h: TensorId,
    bonds: TensorId,
) -> Result<(TensorId, Vec<TensorId>), DiffError> {
    let n = tape.shape(h)[0];
    let feats = relation_features(tape, layer, h)?;
    let f_out = tape.shape(feats[0])[1];
    let mut logit_blocks = Vec::with_capacity(RELATION_COUNT);
    for (r, &u) in feats.iter().enumerate() {
        let a = tape.reshape(layer.rel_a[r], vec![2 * f_out, 1])?;
        let a_src = tape.slice(a, 0, 0, f_out)?;
        let a_dst = tape.slice(a, 0, f_out, f_out)?;
        let p = tape.matmul(u, a_src)?;
        let q = tape.matmul(u, a_dst)?;
        let p_cols = tape.expand(p, 1, n)?;
        let q_row = tape.transpose(q)?;
        let q_rows = tape.expand(q_row, 0, n)?;
        let pair = tape.add(p_cols, q_rows)?;
        logit_blocks.push(tape.leaky_relu(pair, LEAKY_SLOPE)?);
    }
    let logits = tape.concat(1, &logit_blocks)?;
    let probs = relation_probs(tape, bonds, n)?;
    let scores = tape.softmax(logits, 1)?;
    let weighted = tape.mul(probs, scores)?;
    let alpha = normalize_per_node(tape, weighted)?;
    Ok((alpha, feats))
}

fn relation_messages(
    tape: &mut Tape,
    alpha: TensorId,
    feats: &[TensorId],
    n: usize,
) -> Result<TensorId, DiffError> {
    let mut total: Option<TensorId> = None;
    for (r, &u) in feats.iter().enumerate() {
        let a_r = tape.slice(alpha, 1, r * n, n)?;
        let msg = tape.matmul(a_r, u)?;
        total = Some(match total {
            Some(t) => tape.add(t, msg)?,
            None => msg,
        });
    }
    Ok(total.expect("at least one relation"))
}

/// Relational graph attention layer. Isolated nodes (no neighbor mass in
/// any relation) output the zero vector.
pub fn rgat_layer(
    tape: &mut Tape,
    layer: &GraphLayerVars,
    h: TensorId,
    bonds: TensorId,
) -> Result<TensorId, DiffError> {
    let n = tape.shape(h)[0];
    let (alpha, feats) = rgat_attention(tape, layer, h, bonds)?;
    let agg = relation_messages(tape, alpha, &feats, n)?;
    tape.leaky_relu(agg, LEAKY_SLOPE)
}

/// Relational graph convolution: a learned self-connection plus uniform
/// neighbor averaging (the attention layer with all scores forced equal).
pub fn rgcn_layer(
    tape: &mut Tape,
    layer: &GraphLayerVars,
    h: TensorId,
    bonds: TensorId,
) -> Result<TensorId, DiffError> {
    let n = tape.shape(h)[0];
    let feats = relation_features(tape, layer, h)?;
    let probs = relation_probs(tape, bonds, n)?;
    let alpha = normalize_per_node(tape, probs)?;
    let agg = relation_messages(tape, alpha, &feats, n)?;
    let self_term = tape.matmul(h, layer.self_w)?;
    let combined = tape.add(self_term, agg)?;
    tape.leaky_relu(combined, LEAKY_SLOPE)
}

/// Graph readout: mean over nodes concatenated with the feature-wise max
/// over nodes, `[n, F']` -> `[2F']`.
pub fn aggregate_graph(tape: &mut Tape, h: TensorId) -> Result<TensorId, DiffError> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(DiffError::InvalidArg {
            op: "aggregate_graph",
            msg: format!("need a non-empty [n, F'] matrix, got {:?}", shape),
        });
    }
    let mean = tape.mean_axis(h, 0)?;
    let max = tape.max_axis(h, 0)?;
    let cat = tape.concat(1, &[mean, max])?;
    tape.reshape(cat, vec![2 * shape[1]])
}

/// Shared trunk of the three graph networks: L relational layers over the
/// atom features, then mean‖max aggregation.
pub fn graph_trunk(
    tape: &mut Tape,
    trunk: &GraphTrunkVars,
    mol: &MolVars,
    variant: LayerVariant,
) -> Result<TensorId, DiffError> {
    let mut h = mol.atoms;
    for layer in &trunk.layers {
        h = match variant {
            LayerVariant::Gat => rgat_layer(tape, layer, h, mol.bonds)?,
            LayerVariant::Gcn => rgcn_layer(tape, layer, h, mol.bonds)?,
        };
    }
    aggregate_graph(tape, h)
}

/// Wasserstein critic score D(y): unbounded scalar.
pub fn critic_score(
    tape: &mut Tape,
    critic: &CriticVars,
    mol: &MolVars,
    variant: LayerVariant,
) -> Result<TensorId, DiffError> {
    let g = graph_trunk(tape, &critic.trunk, mol, variant)?;
    let dim = tape.shape(g)[0];
    let row = tape.reshape(g, vec![1, dim])?;
    let out = linear(tape, row, &critic.head)?;
    tape.reshape(out, vec![])
}

/// Binding-energy score E(x, y): graph feature fused with the protein
/// embedding, mapped through a LeakyReLU MLP to an unbounded scalar.
pub fn energy_score(
    tape: &mut Tape,
    energy: &EnergyVars,
    x: TensorId,
    mol: &MolVars,
    variant: LayerVariant,
) -> Result<TensorId, DiffError> {
    let g = graph_trunk(tape, &energy.trunk, mol, variant)?;
    let fused = tape.concat(0, &[g, x])?;
    let dim = tape.shape(fused)[0];
    let mut h = tape.reshape(fused, vec![1, dim])?;
    let last = energy.fusion.len() - 1;
    for (i, l) in energy.fusion.iter().enumerate() {
        h = linear(tape, h, l)?;
        if i < last {
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    tape.reshape(h, vec![])
}

/// Predicted property vector R(y) in [0, 1]^P.
pub fn reward_predict(
    tape: &mut Tape,
    reward: &RewardVars,
    mol: &MolVars,
    variant: LayerVariant,
) -> Result<TensorId, DiffError> {
    let g = graph_trunk(tape, &reward.trunk, mol, variant)?;
    let dim = tape.shape(g)[0];
    let row = tape.reshape(g, vec![1, dim])?;
    let out = linear(tape, row, &reward.head)?;
    let squashed = tape.sigmoid(out)?;
    let p = tape.shape(squashed)[1];
    tape.reshape(squashed, vec![p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, DEFAULT_FD_STEP};
    use crate::networks::params::{
        CriticParams, EncoderParams, EnergyParams, GeneratorParams, GraphLayerParams, NetDims,
        RewardParams, StageSource,
    };
    use rand::{Rng, SeedableRng};

    fn tiny_dims() -> NetDims {
        NetDims {
            n_atoms: 3,
            xdim: 3,
            zdim: 3,
            encoder_hidden: 4,
            gen_hidden: [5, 6, 6],
            graph_dim: 4,
            graph_layers: 2,
            property_count: 3,
        }
    }

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            LEAKY_SLOPE * x
        }
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        // w is [in, out]; returns x^T w
        let (rows, cols) = (w.shape[0], w.shape[1]);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += x[i] * w.values[i * cols + j];
            }
        }
        out
    }

    // ── encoder ─────────────────────────────────────────────────────

    #[test]
    fn encoder_with_xdim_zero_returns_empty_vector() {
        let dims = NetDims { xdim: 0, ..tiny_dims() };
        let enc = EncoderParams::init(&dims, &mut rng(0));
        let mut tape = Tape::new();
        let vars = enc.stage(&mut tape, false);
        let xp = tape.constant(Tensor::ones(vec![21]));
        let emb = encode_protein(&mut tape, &vars, xp).unwrap();
        assert_eq!(tape.shape(emb), &[0usize] as &[usize]);
    }

    #[test]
    fn encoder_with_zero_weights_returns_zeros() {
        let dims = tiny_dims();
        let mut enc = EncoderParams::init(&dims, &mut rng(0));
        for l in &mut enc.mlp {
            l.w = Tensor::zeros(l.w.shape.clone());
            l.b = Tensor::zeros(l.b.shape.clone());
        }
        let mut tape = Tape::new();
        let vars = enc.stage(&mut tape, false);
        let xp = tape.constant(Tensor::ones(vec![21]));
        let emb = encode_protein(&mut tape, &vars, xp).unwrap();
        assert_eq!(tape.values(emb), vec![0.0; dims.xdim]);
    }

    #[test]
    fn encoder_matches_matrix_arithmetic_oracle() {
        let dims = tiny_dims();
        let enc = EncoderParams::init(&dims, &mut rng(3));
        let mut r = rng(4);
        let xp_vals: Vec<f64> = (0..21).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let vars = enc.stage(&mut tape, false);
        let xp = tape.constant(Tensor::from_values(vec![21], xp_vals.clone()).unwrap());
        let emb = encode_protein(&mut tape, &vars, xp).unwrap();

        let mut hidden = matvec(&enc.mlp[0].w, &xp_vals);
        for (h, b) in hidden.iter_mut().zip(&enc.mlp[0].b.values) {
            *h = leaky(*h + b);
        }
        let mut expect = matvec(&enc.mlp[1].w, &hidden);
        for (e, b) in expect.iter_mut().zip(&enc.mlp[1].b.values) {
            *e += b;
        }
        for (got, want) in tape.values(emb).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    // ── generator ───────────────────────────────────────────────────

    fn zeroed_generator(dims: &NetDims) -> GeneratorParams {
        let mut gen = GeneratorParams::init(dims, &mut rng(0));
        for l in gen.mlp.iter_mut().chain([&mut gen.atom_head, &mut gen.bond_head]) {
            l.w = Tensor::zeros(l.w.shape.clone());
            l.b = Tensor::zeros(l.b.shape.clone());
        }
        gen
    }

    #[test]
    fn zero_weight_generator_is_uniform_off_diagonal() {
        let dims = tiny_dims();
        let gen = zeroed_generator(&dims);
        let mut tape = Tape::new();
        let vars = gen.stage(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![dims.xdim]));
        let z = tape.constant(Tensor::zeros(vec![dims.zdim]));
        let mol = generate(&mut tape, &vars, x, z).unwrap();
        let soft = soft_values(&tape, &mol);
        soft.check(1e-9).unwrap();
        for v in &soft.atom_probs.values {
            assert!((v - 1.0 / ATOM_TYPE_COUNT as f64).abs() < 1e-12);
        }
        let n = dims.n_atoms;
        for i in 0..n {
            for j in 0..n {
                let fiber =
                    &soft.bond_probs.values[(i * n + j) * BOND_TYPE_COUNT..(i * n + j + 1) * BOND_TYPE_COUNT];
                if i == j {
                    assert_eq!(fiber[NONE_BOND as usize], 1.0);
                } else {
                    for v in fiber {
                        assert!((v - 1.0 / BOND_TYPE_COUNT as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn generator_output_is_exactly_symmetric_and_z_sensitive() {
        let dims = tiny_dims();
        let gen = GeneratorParams::init(&dims, &mut rng(5));
        let mut tape = Tape::new();
        let vars = gen.stage(&mut tape, false);
        let mut r = rng(6);
        let x_vals: Vec<f64> = (0..dims.xdim).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = tape.constant(Tensor::from_values(vec![dims.xdim], x_vals).unwrap());
        let z1v: Vec<f64> = (0..dims.zdim).map(|_| r.random_range(-1.0..1.0)).collect();
        let z2v: Vec<f64> = (0..dims.zdim).map(|_| r.random_range(-1.0..1.0)).collect();
        let z1 = tape.constant(Tensor::from_values(vec![dims.zdim], z1v).unwrap());
        let z2 = tape.constant(Tensor::from_values(vec![dims.zdim], z2v).unwrap());
        let m1 = generate(&mut tape, &vars, x, z1).unwrap();
        let m2 = generate(&mut tape, &vars, x, z2).unwrap();

        let s1 = soft_values(&tape, &m1);
        s1.check(1e-9).unwrap();
        let n = dims.n_atoms;
        let b = BOND_TYPE_COUNT;
        for i in 0..n {
            for j in 0..n {
                for t in 0..b {
                    assert_eq!(
                        s1.bond_probs.values[(i * n + j) * b + t],
                        s1.bond_probs.values[(j * n + i) * b + t]
                    );
                }
            }
        }
        let s2 = soft_values(&tape, &m2);
        assert_ne!(s1.atom_probs.values, s2.atom_probs.values);
    }

    // ── straight-through ────────────────────────────────────────────

    #[test]
    fn straight_through_argmax_picks_the_mode() {
        let dims = tiny_dims();
        let gen = zeroed_generator(&dims);
        let mut tape = Tape::new();
        let vars = gen.stage(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![dims.xdim]));
        let z = tape.constant(Tensor::zeros(vec![dims.zdim]));
        let soft = generate(&mut tape, &vars, x, z).unwrap();
        // nudge atom row 0 towards type 2 by hand
        let biased = {
            let mut s = soft_values(&tape, &soft);
            s.atom_probs.values[0..ATOM_TYPE_COUNT].copy_from_slice(&[
                0.02, 0.02, 0.88, 0.02, 0.02, 0.02, 0.02,
            ]);
            s
        };
        let staged = stage_soft(&mut tape, &biased, false);
        let (mol, hard) = straight_through_sample(&mut tape, &staged, None, &mut rng(1)).unwrap();
        assert_eq!(mol.atom_type(0), 2);
        let report = crate::molgraph::validate_molecule(
            tape.value(hard.atoms),
            tape.value(hard.bonds),
        )
        .unwrap();
        // structural invariants hold; only empty-atom bonding may appear
        assert!(report
            .violations
            .iter()
            .all(|v| matches!(v, crate::molgraph::Violation::EmptyAtomBonded { .. })));
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        // logits -> softmax rows -> (ST | identity) -> weighted sum
        let n = 3;
        let mut r = rng(12);
        let logits: Vec<f64> = (0..n * ATOM_TYPE_COUNT).map(|_| r.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..n * ATOM_TYPE_COUNT).map(|_| r.random_range(-1.0..1.0)).collect();

        let grad_for = |through_st: bool| {
            let mut tape = Tape::new();
            let l = tape.leaf(
                Tensor::from_values(vec![n, ATOM_TYPE_COUNT], logits.clone()).unwrap().with_grad(),
            );
            let soft_atoms = tape.softmax(l, 1).unwrap();
            let bonds = tape.constant(Molecule::empty(n).bond_tensor());
            let picked = if through_st {
                let mv = MolVars { n, atoms: soft_atoms, bonds };
                let (_, hard) = straight_through_sample(&mut tape, &mv, None, &mut rng(1)).unwrap();
                hard.atoms
            } else {
                soft_atoms
            };
            let w = tape
                .constant(Tensor::from_values(vec![n, ATOM_TYPE_COUNT], weights.clone()).unwrap());
            let prod = tape.mul(picked, w).unwrap();
            let root = tape.sum_all(prod).unwrap();
            let grads = tape.backward(root).unwrap();
            tape.grad_or_zeros(&grads, l).values
        };

        let g_st = grad_for(true);
        let g_soft = grad_for(false);
        assert!(g_st.iter().any(|&g| g != 0.0));
        assert_eq!(g_st, g_soft);

        // and the soft surrogate path itself is finite-difference correct
        let w2 = weights.clone();
        let err = finite_diff_check(
            move |t, l| {
                let sm = t.softmax(l, 1)?;
                let w = t.constant(Tensor::from_values(vec![n, ATOM_TYPE_COUNT], w2.clone())?);
                let prod = t.mul(sm, w)?;
                t.sum_all(prod)
            },
            &Tensor::from_values(vec![n, ATOM_TYPE_COUNT], logits).unwrap(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    // ── graph layers ────────────────────────────────────────────────

    /// Eq-by-eq reference: iterate relations and neighbor sets explicitly.
    fn brute_rgat(layer: &GraphLayerParams, h: &[Vec<f64>], mol: &Molecule) -> Vec<Vec<f64>> {
        let n = mol.n();
        let f_out = layer.rel_w[0].shape[1];
        let mut out = vec![vec![0.0; f_out]; n];
        for i in 0..n {
            // (relation, neighbor, unnormalized weight)
            let mut edges: Vec<(usize, usize, f64)> = Vec::new();
            for r in 0..RELATION_COUNT {
                for j in 0..n {
                    if j != i && mol.bond_type(i, j) as usize == r + 1 {
                        let wi = matvec(&layer.rel_w[r], &h[i]);
                        let wj = matvec(&layer.rel_w[r], &h[j]);
                        let a = &layer.rel_a[r].values;
                        let mut score = 0.0;
                        for k in 0..f_out {
                            score += a[k] * wi[k] + a[f_out + k] * wj[k];
                        }
                        edges.push((r, j, leaky(score).exp()));
                    }
                }
            }
            let total: f64 = edges.iter().map(|e| e.2).sum();
            if edges.is_empty() {
                continue; // isolated node stays zero
            }
            let mut agg = vec![0.0; f_out];
            for (r, j, e) in edges {
                let alpha = e / total;
                let wj = matvec(&layer.rel_w[r], &h[j]);
                for k in 0..f_out {
                    agg[k] += alpha * wj[k];
                }
            }
            for k in 0..f_out {
                out[i][k] = leaky(agg[k]);
            }
        }
        out
    }

    fn brute_rgcn(layer: &GraphLayerParams, h: &[Vec<f64>], mol: &Molecule) -> Vec<Vec<f64>> {
        let n = mol.n();
        let f_out = layer.rel_w[0].shape[1];
        let mut out = vec![vec![0.0; f_out]; n];
        for i in 0..n {
            let mut agg = matvec(&layer.self_w, &h[i]);
            let degree = (0..n).filter(|&j| j != i && mol.bond_type(i, j) != NONE_BOND).count();
            if degree > 0 {
                for r in 0..RELATION_COUNT {
                    for j in 0..n {
                        if j != i && mol.bond_type(i, j) as usize == r + 1 {
                            let wj = matvec(&layer.rel_w[r], &h[j]);
                            for k in 0..f_out {
                                agg[k] += wj[k] / degree as f64;
                            }
                        }
                    }
                }
            }
            for k in 0..f_out {
                out[i][k] = leaky(agg[k]);
            }
        }
        out
    }

    fn toy_molecule() -> Molecule {
        let mut m = Molecule::empty(3);
        m.set_atom(0, 0);
        m.set_atom(1, 1);
        m.set_atom(2, 2);
        m.set_bond(0, 1, 1);
        m.set_bond(1, 2, 2);
        m
    }

    fn one_hot_rows(m: &Molecule) -> Vec<Vec<f64>> {
        let t = m.atom_tensor();
        (0..m.n())
            .map(|i| t.values[i * ATOM_TYPE_COUNT..(i + 1) * ATOM_TYPE_COUNT].to_vec())
            .collect()
    }

    #[test]
    fn attention_on_single_edge_is_one() {
        let mut m = Molecule::empty(2);
        m.set_atom(0, 0);
        m.set_atom(1, 1);
        m.set_bond(0, 1, 1);
        let layer = GraphLayerParams::init(&mut rng(7), ATOM_TYPE_COUNT, 4);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let (alpha, _) = rgat_attention(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        let a = tape.values(alpha);
        // node 0's only edge: relation 0 (single), neighbor 1 -> column 1
        assert_eq!(a[1], 1.0);
        let row0_sum: f64 = a[..RELATION_COUNT * 2].iter().sum();
        assert!((row0_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_splits_evenly_between_identical_neighbors() {
        let mut m = Molecule::empty(3);
        m.set_atom(0, 0);
        m.set_atom(1, 2);
        m.set_atom(2, 2);
        m.set_bond(0, 1, 1);
        m.set_bond(0, 2, 1);
        let layer = GraphLayerParams::init(&mut rng(8), ATOM_TYPE_COUNT, 4);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let (alpha, _) = rgat_attention(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        let a = tape.values(alpha);
        assert_eq!(a[1], 0.5);
        assert_eq!(a[2], 0.5);
    }

    #[test]
    fn rgat_layer_matches_brute_force_oracle() {
        let m = toy_molecule();
        let layer = GraphLayerParams::init(&mut rng(9), ATOM_TYPE_COUNT, 5);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let out = rgat_layer(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        let expect = brute_rgat(&layer, &one_hot_rows(&m), &m);
        for i in 0..3 {
            for k in 0..5 {
                assert!((tape.values(out)[i * 5 + k] - expect[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rgcn_layer_matches_brute_force_oracle_and_handles_isolated_nodes() {
        let mut m = toy_molecule();
        m.set_atom(2, 2);
        m.set_bond(1, 2, 0); // leave node 2 isolated but non-empty
        let layer = GraphLayerParams::init(&mut rng(10), ATOM_TYPE_COUNT, 5);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let out = rgcn_layer(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        let expect = brute_rgcn(&layer, &one_hot_rows(&m), &m);
        for i in 0..3 {
            for k in 0..5 {
                assert!((tape.values(out)[i * 5 + k] - expect[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_outputs_zero_vector_in_rgat() {
        let mut m = Molecule::empty(3);
        m.set_atom(0, 0);
        m.set_atom(1, 1);
        m.set_atom(2, 2);
        m.set_bond(0, 1, 1);
        let layer = GraphLayerParams::init(&mut rng(11), ATOM_TYPE_COUNT, 4);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let out = rgat_layer(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        assert_eq!(&tape.values(out)[2 * 4..3 * 4], &[0.0; 4]);
    }

    #[test]
    fn uniform_attention_reduces_gat_to_gcn() {
        let m = toy_molecule();
        let mut layer = GraphLayerParams::init(&mut rng(13), ATOM_TYPE_COUNT, 5);
        for a in &mut layer.rel_a {
            *a = Tensor::zeros(a.shape.clone());
        }
        layer.self_w = Tensor::zeros(layer.self_w.shape.clone());
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let gat = rgat_layer(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        let gcn = rgcn_layer(&mut tape, &vars, mol.atoms, mol.bonds).unwrap();
        for (a, b) in tape.values(gat).iter().zip(tape.values(gcn)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    // ── aggregation ─────────────────────────────────────────────────

    #[test]
    fn aggregation_of_identical_rows_duplicates_the_row() {
        let mut tape = Tape::new();
        let v = [0.3, -0.7, 2.0];
        let h = tape.constant(
            Tensor::from_values(vec![2, 3], [v, v].concat()).unwrap(),
        );
        let g = aggregate_graph(&mut tape, h).unwrap();
        assert_eq!(tape.values(g), [v, v].concat());
    }

    #[test]
    fn aggregation_of_basis_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_values(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = aggregate_graph(&mut tape, h).unwrap();
        assert_eq!(tape.values(g), vec![0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn aggregation_matches_naive_loop() {
        let mut r = rng(14);
        let vals: Vec<f64> = (0..4 * 5).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_values(vec![4, 5], vals.clone()).unwrap());
        let g = aggregate_graph(&mut tape, h).unwrap();
        for k in 0..5 {
            let col: Vec<f64> = (0..4).map(|i| vals[i * 5 + k]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((tape.values(g)[k] - mean).abs() < 1e-12);
            assert!((tape.values(g)[5 + k] - max).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_rejects_empty_graphs() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(vec![0, 4]));
        assert!(aggregate_graph(&mut tape, h).is_err());
    }

    // ── scoring networks ────────────────────────────────────────────

    #[test]
    fn zero_critic_scores_zero_and_zero_reward_predicts_half() {
        let dims = tiny_dims();
        let mut critic = CriticParams::init(&dims, &mut rng(15));
        for t in critic.trunk.layers.iter_mut() {
            t.self_w = Tensor::zeros(t.self_w.shape.clone());
            for w in t.rel_w.iter_mut().chain(t.rel_a.iter_mut()) {
                *w = Tensor::zeros(w.shape.clone());
            }
        }
        critic.head.w = Tensor::zeros(critic.head.w.shape.clone());
        critic.head.b = Tensor::zeros(critic.head.b.shape.clone());
        let mut reward = RewardParams::init(&dims, &mut rng(16));
        for t in reward.trunk.layers.iter_mut() {
            t.self_w = Tensor::zeros(t.self_w.shape.clone());
            for w in t.rel_w.iter_mut().chain(t.rel_a.iter_mut()) {
                *w = Tensor::zeros(w.shape.clone());
            }
        }
        reward.head.w = Tensor::zeros(reward.head.w.shape.clone());
        reward.head.b = Tensor::zeros(reward.head.b.shape.clone());

        let m = toy_molecule();
        let mut tape = Tape::new();
        let cv = critic.stage(&mut tape, false);
        let rv = reward.stage(&mut tape, false);
        let mol = stage_molecule(&mut tape, &m);
        let d = critic_score(&mut tape, &cv, &mol, LayerVariant::Gat).unwrap();
        assert_eq!(tape.value(d).scalar_value(), 0.0);
        let p = reward_predict(&mut tape, &rv, &mol, LayerVariant::Gat).unwrap();
        assert_eq!(tape.values(p), vec![0.5; 3]);
    }

    #[test]
    fn scores_are_permutation_invariant() {
        use rand::seq::SliceRandom;
        let dims = tiny_dims();
        let critic = CriticParams::init(&dims, &mut rng(17));
        let energy = EnergyParams::init(&dims, &mut rng(18));
        let reward = RewardParams::init(&dims, &mut rng(19));
        let m = toy_molecule();
        let mut r = rng(20);
        let x_vals: Vec<f64> = (0..dims.xdim).map(|_| r.random_range(-1.0..1.0)).collect();

        let score = |mol: &Molecule| -> (f64, f64, Vec<f64>) {
            let mut tape = Tape::new();
            let cv = critic.stage(&mut tape, false);
            let ev = energy.stage(&mut tape, false);
            let rv = reward.stage(&mut tape, false);
            let mv = stage_molecule(&mut tape, mol);
            let x = tape.constant(Tensor::from_values(vec![dims.xdim], x_vals.clone()).unwrap());
            let d = critic_score(&mut tape, &cv, &mv, LayerVariant::Gat).unwrap();
            let e = energy_score(&mut tape, &ev, x, &mv, LayerVariant::Gat).unwrap();
            let p = reward_predict(&mut tape, &rv, &mv, LayerVariant::Gat).unwrap();
            (tape.value(d).scalar_value(), tape.value(e).scalar_value(), tape.values(p).to_vec())
        };

        let (d0, e0, p0) = score(&m);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..m.n()).collect();
            perm.shuffle(&mut r);
            let (d, e, p) = score(&m.permuted(&perm));
            assert!((d - d0).abs() < 1e-12);
            assert!((e - e0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&p0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn critic_matches_layer_by_layer_oracle() {
        let dims = tiny_dims();
        let critic = CriticParams::init(&dims, &mut rng(21));
        let m = toy_molecule();

        let mut tape = Tape::new();
        let cv = critic.stage(&mut tape, false);
        let mv = stage_molecule(&mut tape, &m);
        let d = critic_score(&mut tape, &cv, &mv, LayerVariant::Gat).unwrap();

        let h1 = brute_rgat(&critic.trunk.layers[0], &one_hot_rows(&m), &m);
        let h2 = brute_rgat(&critic.trunk.layers[1], &h1, &m);
        let f = dims.graph_dim;
        let mut g = vec![0.0; 2 * f];
        for k in 0..f {
            let col: Vec<f64> = h2.iter().map(|row| row[k]).collect();
            g[k] = col.iter().sum::<f64>() / col.len() as f64;
            g[f + k] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut expect = critic.head.b.values[0];
        for k in 0..2 * f {
            expect += g[k] * critic.head.w.values[k];
        }
        assert!((tape.value(d).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn energy_and_reward_match_hand_composed_oracles() {
        let dims = tiny_dims();
        let energy = EnergyParams::init(&dims, &mut rng(40));
        let reward = RewardParams::init(&dims, &mut rng(41));
        let m = toy_molecule();
        let mut r = rng(42);
        let x_vals: Vec<f64> = (0..dims.xdim).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let ev = energy.stage(&mut tape, false);
        let rv = reward.stage(&mut tape, false);
        let mv = stage_molecule(&mut tape, &m);
        let x = tape.constant(Tensor::from_values(vec![dims.xdim], x_vals.clone()).unwrap());
        let e = energy_score(&mut tape, &ev, x, &mv, LayerVariant::Gat).unwrap();
        let p = reward_predict(&mut tape, &rv, &mv, LayerVariant::Gat).unwrap();

        let aggregate_by_hand = |trunk: &crate::networks::GraphTrunkParams| -> Vec<f64> {
            let h1 = brute_rgat(&trunk.layers[0], &one_hot_rows(&m), &m);
            let h2 = brute_rgat(&trunk.layers[1], &h1, &m);
            let f = dims.graph_dim;
            let mut g = vec![0.0; 2 * f];
            for k in 0..f {
                let col: Vec<f64> = h2.iter().map(|row| row[k]).collect();
                g[k] = col.iter().sum::<f64>() / col.len() as f64;
                g[f + k] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            g
        };

        // energy: trunk -> concat embedding -> leaky MLP -> scalar
        let mut fused = aggregate_by_hand(&energy.trunk);
        fused.extend_from_slice(&x_vals);
        let mut hidden = matvec(&energy.fusion[0].w, &fused);
        for (h, b) in hidden.iter_mut().zip(&energy.fusion[0].b.values) {
            *h = leaky(*h + b);
        }
        let mut expect_e = energy.fusion[1].b.values[0];
        for (hv, wv) in hidden.iter().zip(&energy.fusion[1].w.values) {
            expect_e += hv * wv;
        }
        assert!((tape.value(e).scalar_value() - expect_e).abs() < 1e-12);

        // reward: trunk -> linear head -> sigmoid
        let g = aggregate_by_hand(&reward.trunk);
        let props = dims.property_count;
        for c in 0..props {
            let mut logit = reward.head.b.values[c];
            for (k, gv) in g.iter().enumerate() {
                logit += gv * reward.head.w.values[k * props + c];
            }
            let expect = 0.5 * ((0.5 * logit).tanh() + 1.0);
            assert!((tape.values(p)[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_with_xdim_zero_ignores_protein() {
        let dims = NetDims { xdim: 0, ..tiny_dims() };
        let energy = EnergyParams::init(&dims, &mut rng(22));
        let m = toy_molecule();
        let mut tape = Tape::new();
        let ev = energy.stage(&mut tape, false);
        let mv = stage_molecule(&mut tape, &m);
        let x = tape.zeros_const(vec![0]);
        let e = energy_score(&mut tape, &ev, x, &mv, LayerVariant::Gat).unwrap();
        assert!(tape.value(e).scalar_value().is_finite());
    }

    // ── end-to-end differentiability per parameter group ───────────

    fn fd_check_against_group<F>(flat: &Tensor, f: F) -> f64
    where
        F: Fn(&mut Tape, TensorId) -> Result<TensorId, DiffError>,
    {
        finite_diff_check(f, flat, DEFAULT_FD_STEP).unwrap()
    }

    #[test]
    fn every_network_is_differentiable_end_to_end() {
        let dims = tiny_dims();
        let enc = EncoderParams::init(&dims, &mut rng(30));
        let gen = GeneratorParams::init(&dims, &mut rng(31));
        let critic = CriticParams::init(&dims, &mut rng(32));
        let energy = EnergyParams::init(&dims, &mut rng(33));
        let reward = RewardParams::init(&dims, &mut rng(34));
        let m = toy_molecule();
        let mut r = rng(35);
        let xp_vals: Vec<f64> = (0..21).map(|_| r.random_range(0.0..0.1)).collect();
        let x_vals: Vec<f64> = (0..dims.xdim).map(|_| r.random_range(-1.0..1.0)).collect();
        let z_vals: Vec<f64> = (0..dims.zdim).map(|_| r.random_range(-1.0..1.0)).collect();

        let flatten = |ts: Vec<(String, &Tensor)>| {
            let mut vals = Vec::new();
            for (_, t) in ts {
                vals.extend_from_slice(&t.values);
            }
            let len = vals.len();
            Tensor::from_values(vec![len], vals).unwrap()
        };

        // encoder
        let enc_flat = flatten(
            enc.mlp.iter().enumerate().flat_map(|(i, l)| {
                vec![(format!("m{i}w"), &l.w), (format!("m{i}b"), &l.b)]
            }).collect(),
        );
        let enc_c = enc.clone();
        let xp_c = xp_vals.clone();
        let err = fd_check_against_group(&enc_flat, move |t, vid| {
            let vars = enc_c.stage_with(t, &mut StageSource::Vector { vec: vid, offset: 0 })?;
            let xp = t.constant(Tensor::from_values(vec![21], xp_c.clone())?);
            let emb = encode_protein(t, &vars, xp)?;
            let sq = t.square(emb)?;
            t.sum_all(sq)
        });
        assert!(err < 1e-4, "encoder err={err}");

        // generator
        let gen_flat = flatten(
            gen.mlp
                .iter()
                .chain([&gen.atom_head, &gen.bond_head])
                .enumerate()
                .flat_map(|(i, l)| vec![(format!("g{i}w"), &l.w), (format!("g{i}b"), &l.b)])
                .collect(),
        );
        let gen_c = gen.clone();
        let (xc, zc) = (x_vals.clone(), z_vals.clone());
        let err = fd_check_against_group(&gen_flat, move |t, vid| {
            let vars = gen_c.stage_with(t, &mut StageSource::Vector { vec: vid, offset: 0 })?;
            let x = t.constant(Tensor::from_values(vec![xc.len()], xc.clone())?);
            let z = t.constant(Tensor::from_values(vec![zc.len()], zc.clone())?);
            let mol = generate(t, &vars, x, z)?;
            let sa = t.sum_all(mol.atoms)?;
            let sbsq = t.square(mol.bonds)?;
            let sb = t.sum_all(sbsq)?;
            t.add(sa, sb)
        });
        assert!(err < 1e-4, "generator err={err}");

        // critic / energy / reward against the toy molecule
        let flat_group = |p: &crate::networks::ModelParams, g| p.flatten_group(g);
        let model = crate::networks::ModelParams {
            encoder: enc,
            generator: gen,
            critic: critic.clone(),
            energy: energy.clone(),
            reward: reward.clone(),
        };

        let critic_c = critic.clone();
        let m_c = m.clone();
        let err = fd_check_against_group(
            &flat_group(&model, crate::networks::ParamGroup::Critic),
            move |t, vid| {
                let vars =
                    critic_c.stage_with(t, &mut StageSource::Vector { vec: vid, offset: 0 })?;
                let mv = stage_molecule(t, &m_c);
                critic_score(t, &vars, &mv, LayerVariant::Gat)
            },
        );
        assert!(err < 1e-4, "critic err={err}");

        let energy_c = energy.clone();
        let m_c = m.clone();
        let x_c = x_vals.clone();
        let err = fd_check_against_group(
            &flat_group(&model, crate::networks::ParamGroup::Energy),
            move |t, vid| {
                let vars =
                    energy_c.stage_with(t, &mut StageSource::Vector { vec: vid, offset: 0 })?;
                let mv = stage_molecule(t, &m_c);
                let x = t.constant(Tensor::from_values(vec![x_c.len()], x_c.clone())?);
                energy_score(t, &vars, x, &mv, LayerVariant::Gat)
            },
        );
        assert!(err < 1e-4, "energy err={err}");

        let reward_c = reward.clone();
        let m_c = m.clone();
        let err = fd_check_against_group(
            &flat_group(&model, crate::networks::ParamGroup::Reward),
            move |t, vid| {
                let vars =
                    reward_c.stage_with(t, &mut StageSource::Vector { vec: vid, offset: 0 })?;
                let mv = stage_molecule(t, &m_c);
                let p = reward_predict(t, &vars, &mv, LayerVariant::Gat)?;
                let sq = t.square(p)?;
                t.sum_all(sq)
            },
        );
        assert!(err < 1e-4, "reward err={err}");
    }
}

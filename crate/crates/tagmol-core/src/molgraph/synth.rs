use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::molecule::Molecule;
use super::records::{PairRecord, ProteinRecord};
use super::vocab::{ATOM_VOCAB, NONE_BOND, PROTEIN_FEATURE_DIM};

/// Ramp-weighted amino-acid composition summary in [0, 1]. The synthetic
/// generator ties ligand composition to this statistic, which is what makes
/// protein conditioning learnable.
pub fn protein_summary_stat(p: &ProteinRecord) -> f64 {
    p.features[..PROTEIN_FEATURE_DIM - 1]
        .iter()
        .enumerate()
        .map(|(i, &x)| x * (i as f64 / 19.0))
        .sum()
}

const FAMILY_COUNT: usize = 4;

/// Per-family sampling weights over the six element types [C, N, O, F, S, Cl];
/// heteroatom content rises with the family index.
const FAMILY_ATOM_WEIGHTS: [[f64; 6]; FAMILY_COUNT] = [
    [0.92, 0.02, 0.02, 0.02, 0.01, 0.01],
    [0.65, 0.30, 0.02, 0.01, 0.01, 0.01],
    [0.50, 0.05, 0.40, 0.02, 0.02, 0.01],
    [0.30, 0.25, 0.25, 0.08, 0.07, 0.05],
];

const FAMILY_DOUBLE_RATE: [f64; FAMILY_COUNT] = [0.0, 0.10, 0.25, 0.40];
const FAMILY_TRIPLE_RATE: [f64; FAMILY_COUNT] = [0.0, 0.0, 0.02, 0.08];
const FAMILY_RING_RATE: [f64; FAMILY_COUNT] = [0.10, 0.20, 0.20, 0.30];

fn sample_weighted(rng: &mut ChaCha12Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (k, &w) in weights.iter().enumerate() {
        if r < w {
            return k;
        }
        r -= w;
    }
    weights.len() - 1
}

fn sample_protein(rng: &mut ChaCha12Rng, family: usize, id: String) -> ProteinRecord {
    // Exponential draws scaled by a family-specific concentration profile,
    // normalized to a composition vector. ~83% of the mass lands in the
    // family's 5-residue block, so the summary statistic separates families.
    let mut comp = [0.0f64; 20];
    for (i, c) in comp.iter_mut().enumerate() {
        let block = i / 5;
        let conc = if block == family { 8.0 } else { 0.5 };
        let e = -(1.0 - rng.random::<f64>()).ln();
        *c = conc * e;
    }
    let total: f64 = comp.iter().sum();
    let mut features: Vec<f64> = comp.iter().map(|&c| c / total).collect();
    let len = rng.random_range(80..=800) as f64;
    features.push(len / 1000.0);
    ProteinRecord::new(id, features).expect("synthetic protein is well-formed")
}

fn sample_ligand(rng: &mut ChaCha12Rng, family: usize, n_slots: usize) -> Molecule {
    // Every slot carries a heavy atom. Empty slots are isolated graph
    // nodes, and the attention normalization is singular where a node's
    // neighbor mass vanishes; WGAN-GP interpolants land arbitrarily close
    // to that point when one endpoint has an isolated node, which blows up
    // the penalty. Full molecules keep both interpolation endpoints away
    // from the singular set.
    let heavy = n_slots;

    // Phase 1: random spanning tree over typeless nodes, tracking each
    // node's weighted bond load. Loads are capped so phase 2 can always
    // find an element that affords them (sulfur covers up to 6).
    let mut m = Molecule::empty(n_slots);
    let mut load = vec![0u32; heavy];
    for k in 1..heavy {
        let candidates: Vec<usize> = (0..k).filter(|&j| load[j] <= 3).collect();
        let j = match candidates.is_empty() {
            false => candidates[rng.random_range(0..candidates.len())],
            true => (0..k).min_by_key(|&j| load[j]).unwrap(),
        };
        let mut bond = 1u8;
        if load[j] <= 1 && rng.random::<f64>() < FAMILY_TRIPLE_RATE[family] {
            bond = 3;
        } else if load[j] <= 2 && rng.random::<f64>() < FAMILY_DOUBLE_RATE[family] {
            bond = 2;
        }
        m.set_bond(k, j, bond);
        load[k] += bond as u32;
        load[j] += bond as u32;
    }

    // Occasionally close one ring between unbonded atoms with spare load.
    if heavy >= 3 && rng.random::<f64>() < FAMILY_RING_RATE[family] {
        let open: Vec<usize> = (0..heavy).filter(|&i| load[i] <= 3).collect();
        if open.len() >= 2 {
            let a = open[rng.random_range(0..open.len())];
            let partners: Vec<usize> = open
                .iter()
                .copied()
                .filter(|&b| b != a && m.bond_type(a, b) == NONE_BOND)
                .collect();
            if !partners.is_empty() {
                let b = partners[rng.random_range(0..partners.len())];
                m.set_bond(a, b, 1);
                load[a] += 1;
                load[b] += 1;
            }
        }
    }

    // Phase 2: element types drawn from the family distribution restricted
    // to elements whose maximum valency covers the node's load.
    for i in 0..heavy {
        let weights: Vec<f64> = FAMILY_ATOM_WEIGHTS[family]
            .iter()
            .enumerate()
            .map(|(t, &w)| if ATOM_VOCAB.max_valency[t] >= load[i] { w } else { 0.0 })
            .collect();
        debug_assert!(weights.iter().sum::<f64>() > 0.0, "load {} unassignable", load[i]);
        m.set_atom(i, sample_weighted(rng, &weights) as u8);
    }
    m
}

/// Deterministically generates `count` protein-ligand pairs with `n_slots`
/// atom slots per ligand. Every ligand is valid, fully connected, and
/// within valency limits; its composition depends on the protein family.
pub fn synthesize_dataset(seed: u64, count: usize, n_slots: usize) -> Vec<PairRecord> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7467_6d6f_6c5f_7379);
    let mut records = Vec::with_capacity(count);
    for idx in 0..count {
        let family = rng.random_range(0..FAMILY_COUNT);
        let id = format!("syn{seed:08x}-{idx:05}");
        let protein = sample_protein(&mut rng, family, id);
        let ligand = sample_ligand(&mut rng, family, n_slots);
        debug_assert!(ligand.validity_report().is_valid());
        records.push(PairRecord { protein, ligand });
    }
    records
}

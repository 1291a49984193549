use serde::{Deserialize, Serialize};

use super::molecule::Molecule;
use super::vocab::{ATOM_VOCAB, BOND_VOCAB, NONE_BOND};
use super::MolError;

/// Number of scalar properties the oracle produces.
pub const PROPERTY_COUNT: usize = 3;

/// Deterministic stand-in for an external cheminformatics property
/// evaluator; every component lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyVector {
    /// Fraction of heavy atoms whose summed bond-valency weight stays
    /// within the element's maximum valency.
    pub valency_validity: f64,
    /// Largest connected component over heavy atoms, relative to the heavy
    /// atom count; 1.0 for molecules with at most one heavy atom.
    pub connectivity: f64,
    /// Non-carbon fraction of the heavy atoms; 0.0 with no heavy atoms.
    pub heteroatom_ratio: f64,
}

impl PropertyVector {
    pub fn as_array(&self) -> [f64; PROPERTY_COUNT] {
        [self.valency_validity, self.connectivity, self.heteroatom_ratio]
    }
}

fn valency_fraction(m: &Molecule) -> f64 {
    let heavy: Vec<usize> = (0..m.n()).filter(|&i| !m.is_empty_slot(i)).collect();
    if heavy.is_empty() {
        return 1.0;
    }
    let ok = heavy
        .iter()
        .filter(|&&i| {
            let load: f64 = (0..m.n())
                .filter(|&j| j != i)
                .map(|j| BOND_VOCAB.valency_weight[m.bond_type(i, j) as usize])
                .sum();
            load <= ATOM_VOCAB.max_valency[m.atom_type(i) as usize] as f64
        })
        .count();
    ok as f64 / heavy.len() as f64
}

fn connectivity_fraction(m: &Molecule) -> f64 {
    let heavy: Vec<usize> = (0..m.n()).filter(|&i| !m.is_empty_slot(i)).collect();
    if heavy.len() <= 1 {
        return 1.0;
    }
    // BFS over heavy atoms through non-None bonds.
    let mut component = vec![usize::MAX; m.n()];
    let mut largest = 0usize;
    let mut label = 0usize;
    for &start in &heavy {
        if component[start] != usize::MAX {
            continue;
        }
        let mut queue = vec![start];
        component[start] = label;
        let mut size = 0usize;
        while let Some(i) = queue.pop() {
            size += 1;
            for &j in &heavy {
                if component[j] == usize::MAX && m.bond_type(i, j) != NONE_BOND {
                    component[j] = label;
                    queue.push(j);
                }
            }
        }
        largest = largest.max(size);
        label += 1;
    }
    largest as f64 / heavy.len() as f64
}

fn heteroatom_fraction(m: &Molecule) -> f64 {
    let heavy: Vec<u8> =
        (0..m.n()).filter(|&i| !m.is_empty_slot(i)).map(|i| m.atom_type(i)).collect();
    if heavy.is_empty() {
        return 0.0;
    }
    let hetero = heavy.iter().filter(|&&t| t != 0).count();
    hetero as f64 / heavy.len() as f64
}

/// Property oracle for valid molecules; rejects molecules whose validity
/// report is non-empty.
pub fn property_oracle(m: &Molecule) -> Result<PropertyVector, MolError> {
    let report = m.validity_report();
    if !report.is_valid() {
        return Err(MolError::Invalid(report));
    }
    Ok(PropertyVector {
        valency_validity: valency_fraction(m),
        connectivity: connectivity_fraction(m),
        heteroatom_ratio: heteroatom_fraction(m),
    })
}

/// Reward-training targets that never fail: structurally invalid molecules
/// get a zero validity component while connectivity and heteroatom ratio
/// are still computed from the graph as written.
pub fn property_targets_lenient(m: &Molecule) -> PropertyVector {
    let structurally_valid = m.validity_report().is_valid();
    PropertyVector {
        valency_validity: if structurally_valid { valency_fraction(m) } else { 0.0 },
        connectivity: connectivity_fraction(m),
        heteroatom_ratio: heteroatom_fraction(m),
    }
}

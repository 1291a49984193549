use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::{ATOM_TYPE_COUNT, BOND_TYPE_COUNT, EMPTY_ATOM, NONE_BOND};
use super::MolError;
use crate::diffcore::Tensor;

/// A hard molecular graph over the fixed vocabularies: one atom type per
/// slot, one bond type per unordered slot pair. Stored as type indices;
/// the one-hot tensor views are derived. Symmetry and a None diagonal are
/// enforced at construction, the remaining invariants (Empty atoms carry
/// no bonds) are checked by [`Molecule::validity_report`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Molecule {
    n: usize,
    atom_types: Vec<u8>,
    /// n*n row-major bond type matrix.
    bond_types: Vec<u8>,
}

impl Molecule {
    /// All slots Empty, all bonds None.
    pub fn empty(n: usize) -> Self {
        Molecule { n, atom_types: vec![EMPTY_ATOM; n], bond_types: vec![NONE_BOND; n * n] }
    }

    pub fn new(atom_types: Vec<u8>, bond_types: Vec<u8>) -> Result<Self, MolError> {
        let n = atom_types.len();
        if bond_types.len() != n * n {
            return Err(MolError::Shape(format!(
                "{} atoms need {} bond entries, got {}",
                n,
                n * n,
                bond_types.len()
            )));
        }
        if let Some(t) = atom_types.iter().find(|&&t| t as usize >= ATOM_TYPE_COUNT) {
            return Err(MolError::Shape(format!("atom type {} out of range", t)));
        }
        if let Some(t) = bond_types.iter().find(|&&t| t as usize >= BOND_TYPE_COUNT) {
            return Err(MolError::Shape(format!("bond type {} out of range", t)));
        }
        let m = Molecule { n, atom_types, bond_types };
        for i in 0..n {
            if m.bond_type(i, i) != NONE_BOND {
                return Err(MolError::Shape(format!("diagonal bond at {} must be none", i)));
            }
            for j in 0..i {
                if m.bond_type(i, j) != m.bond_type(j, i) {
                    return Err(MolError::Shape(format!("asymmetric bond at ({}, {})", j, i)));
                }
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn atom_type(&self, i: usize) -> u8 {
        self.atom_types[i]
    }

    pub fn atom_types(&self) -> &[u8] {
        &self.atom_types
    }

    pub fn bond_type(&self, i: usize, j: usize) -> u8 {
        self.bond_types[i * self.n + j]
    }

    pub fn set_atom(&mut self, i: usize, t: u8) {
        debug_assert!((t as usize) < ATOM_TYPE_COUNT);
        self.atom_types[i] = t;
    }

    /// Sets both orientations of an off-diagonal bond.
    pub fn set_bond(&mut self, i: usize, j: usize, t: u8) {
        debug_assert!(i != j && (t as usize) < BOND_TYPE_COUNT);
        self.bond_types[i * self.n + j] = t;
        self.bond_types[j * self.n + i] = t;
    }

    pub fn is_empty_slot(&self, i: usize) -> bool {
        self.atom_types[i] == EMPTY_ATOM
    }

    /// Number of non-None bonds incident to slot `i`.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.bond_type(i, j) != NONE_BOND).count()
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atom_types.iter().filter(|&&t| t != EMPTY_ATOM).count()
    }

    /// One-hot [n, A] view.
    pub fn atom_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.n, ATOM_TYPE_COUNT]);
        for (i, &a) in self.atom_types.iter().enumerate() {
            t.values[i * ATOM_TYPE_COUNT + a as usize] = 1.0;
        }
        t
    }

    /// One-hot [n, n, B] view.
    pub fn bond_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.n, self.n, BOND_TYPE_COUNT]);
        for i in 0..self.n {
            for j in 0..self.n {
                let b = self.bond_type(i, j) as usize;
                t.values[(i * self.n + j) * BOND_TYPE_COUNT + b] = 1.0;
            }
        }
        t
    }

    /// Lifts to the continuous representation (exact one-hot probabilities).
    pub fn to_soft(&self) -> SoftMolecule {
        SoftMolecule { n: self.n, atom_probs: self.atom_tensor(), bond_probs: self.bond_tensor() }
    }

    /// Checks the invariants not guaranteed by construction.
    pub fn validity_report(&self) -> ValidityReport {
        let mut violations = Vec::new();
        for i in 0..self.n {
            if self.is_empty_slot(i) {
                for j in 0..self.n {
                    if j != i && self.bond_type(i, j) != NONE_BOND {
                        violations.push(Violation::EmptyAtomBonded { i, j });
                    }
                }
            }
        }
        ValidityReport { violations }
    }

    /// Relabels atoms by `perm` (new index `k` takes old slot `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        debug_assert_eq!(perm.len(), self.n);
        let mut out = Molecule::empty(self.n);
        for k in 0..self.n {
            out.atom_types[k] = self.atom_types[perm[k]];
        }
        for k in 0..self.n {
            for l in 0..self.n {
                out.bond_types[k * self.n + l] = self.bond_type(perm[k], perm[l]);
            }
        }
        out
    }
}

/// The generator's continuous relaxation: row-stochastic atom matrix and
/// fiber-stochastic symmetric bond tensor with a one-hot None diagonal.
#[derive(Debug, Clone)]
pub struct SoftMolecule {
    pub n: usize,
    /// [n, A], rows sum to 1.
    pub atom_probs: Tensor,
    /// [n, n, B], fibers sum to 1, symmetric in the first two axes.
    pub bond_probs: Tensor,
}

impl SoftMolecule {
    /// Elementwise interpolation `eps * a + (1 - eps) * b`; preserves all
    /// SoftMolecule invariants because they are convex.
    pub fn interpolate(a: &SoftMolecule, b: &SoftMolecule, eps: f64) -> SoftMolecule {
        debug_assert_eq!(a.n, b.n);
        let lerp = |x: &Tensor, y: &Tensor| Tensor {
            shape: x.shape.clone(),
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(&u, &v)| eps * u + (1.0 - eps) * v)
                .collect(),
            requires_grad: false,
        };
        SoftMolecule {
            n: a.n,
            atom_probs: lerp(&a.atom_probs, &b.atom_probs),
            bond_probs: lerp(&a.bond_probs, &b.bond_probs),
        }
    }

    /// Checks row/fiber normalization, symmetry, and the None diagonal.
    pub fn check(&self, tol: f64) -> Result<(), MolError> {
        let n = self.n;
        if self.atom_probs.shape != [n, ATOM_TYPE_COUNT]
            || self.bond_probs.shape != [n, n, BOND_TYPE_COUNT]
        {
            return Err(MolError::Shape(format!(
                "soft molecule shapes {:?} / {:?} for n={}",
                self.atom_probs.shape, self.bond_probs.shape, n
            )));
        }
        for i in 0..n {
            let row = &self.atom_probs.values[i * ATOM_TYPE_COUNT..(i + 1) * ATOM_TYPE_COUNT];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(MolError::Shape(format!("atom row {} sums to {}", i, s)));
            }
        }
        let b = BOND_TYPE_COUNT;
        for i in 0..n {
            for j in 0..n {
                let fiber = &self.bond_probs.values[(i * n + j) * b..(i * n + j + 1) * b];
                let s: f64 = fiber.iter().sum();
                if (s - 1.0).abs() > tol {
                    return Err(MolError::Shape(format!("bond fiber ({}, {}) sums to {}", i, j, s)));
                }
                for t in 0..b {
                    let mirrored = self.bond_probs.values[(j * n + i) * b + t];
                    if fiber[t] != mirrored {
                        return Err(MolError::Shape(format!("asymmetric fiber ({}, {})", i, j)));
                    }
                }
            }
            let diag = &self.bond_probs.values[(i * n + i) * b..(i * n + i + 1) * b];
            if diag[NONE_BOND as usize] != 1.0 {
                return Err(MolError::Shape(format!("diagonal fiber {} is not one-hot none", i)));
            }
        }
        Ok(())
    }
}

/// One entry per violated molecule invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    AtomRowNotOneHot { i: usize },
    BondFiberNotOneHot { i: usize, j: usize },
    AsymmetricBond { i: usize, j: usize },
    DiagonalNotNone { i: usize },
    EmptyAtomBonded { i: usize, j: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AtomRowNotOneHot { i } => write!(f, "atom row {} is not one-hot", i),
            Violation::BondFiberNotOneHot { i, j } => {
                write!(f, "bond fiber ({}, {}) is not one-hot", i, j)
            }
            Violation::AsymmetricBond { i, j } => write!(f, "asymmetric bond at ({}, {})", i, j),
            Violation::DiagonalNotNone { i } => write!(f, "diagonal bond {} is not none", i),
            Violation::EmptyAtomBonded { i, j } => {
                write!(f, "empty atom {} has a bond to {}", i, j)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Validates a raw one-hot atom/bond tensor pair against all molecule
/// invariants. Shape problems are errors; semantic problems are reported.
pub fn validate_molecule(atoms: &Tensor, bonds: &Tensor) -> Result<ValidityReport, MolError> {
    if atoms.shape.len() != 2 || atoms.shape[1] != ATOM_TYPE_COUNT {
        return Err(MolError::Shape(format!("atom tensor shape {:?}", atoms.shape)));
    }
    let n = atoms.shape[0];
    if bonds.shape != [n, n, BOND_TYPE_COUNT] {
        return Err(MolError::Shape(format!(
            "bond tensor shape {:?}, expected [{}, {}, {}]",
            bonds.shape, n, n, BOND_TYPE_COUNT
        )));
    }
    let mut violations = Vec::new();
    let one_hot_slot = |v: &[f64]| -> Option<usize> {
        let mut hot = None;
        for (k, &x) in v.iter().enumerate() {
            if x == 1.0 {
                if hot.is_some() {
                    return None;
                }
                hot = Some(k);
            } else if x != 0.0 {
                return None;
            }
        }
        hot
    };
    let a = ATOM_TYPE_COUNT;
    let b = BOND_TYPE_COUNT;
    let mut atom_hot = vec![None; n];
    for i in 0..n {
        atom_hot[i] = one_hot_slot(&atoms.values[i * a..(i + 1) * a]);
        if atom_hot[i].is_none() {
            violations.push(Violation::AtomRowNotOneHot { i });
        }
    }
    let mut fiber_hot = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            let f = &bonds.values[(i * n + j) * b..(i * n + j + 1) * b];
            fiber_hot[i * n + j] = one_hot_slot(f);
            if fiber_hot[i * n + j].is_none() {
                violations.push(Violation::BondFiberNotOneHot { i, j });
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let fwd = &bonds.values[(i * n + j) * b..(i * n + j + 1) * b];
            let rev = &bonds.values[(j * n + i) * b..(j * n + i + 1) * b];
            if fwd != rev {
                violations.push(Violation::AsymmetricBond { i, j });
            }
        }
    }
    for i in 0..n {
        if fiber_hot[i * n + i] != Some(NONE_BOND as usize) {
            violations.push(Violation::DiagonalNotNone { i });
        }
    }
    for i in 0..n {
        if atom_hot[i] == Some(EMPTY_ATOM as usize) {
            for j in 0..n {
                if j != i {
                    match fiber_hot[i * n + j] {
                        Some(t) if t != NONE_BOND as usize => {
                            violations.push(Violation::EmptyAtomBonded { i, j })
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(ValidityReport { violations })
}

/// Shrinks a molecule to at most `target_n` slots by repeatedly dropping
/// the atom with the fewest non-None bonds (lowest index on ties), then
/// pads with Empty slots to exactly `target_n`.
pub fn trim_ligand(raw: &Molecule, target_n: usize) -> Molecule {
    let mut keep: Vec<usize> = (0..raw.n()).collect();
    while keep.len() > target_n {
        let degree_of = |&i: &usize| {
            keep.iter().filter(|&&j| j != i && raw.bond_type(i, j) != NONE_BOND).count()
        };
        let victim_pos = keep
            .iter()
            .enumerate()
            .min_by_key(|(_, i)| (degree_of(i), **i))
            .map(|(pos, _)| pos)
            .expect("non-empty keep set");
        keep.remove(victim_pos);
    }
    let mut out = Molecule::empty(target_n);
    for (k, &i) in keep.iter().enumerate() {
        out.set_atom(k, raw.atom_type(i));
    }
    for (k, &i) in keep.iter().enumerate() {
        for (l, &j) in keep.iter().enumerate().skip(k + 1) {
            out.set_bond(k, l, raw.bond_type(i, j));
        }
    }
    out
}

/// Heavy-atom vocabulary: six organic elements plus an explicit Empty slot
/// so every molecule occupies a fixed number of one-hot rows.
pub struct AtomVocab {
    pub symbols: [&'static str; ATOM_TYPE_COUNT],
    pub max_valency: [u32; ATOM_TYPE_COUNT],
    pub atomic_mass: [f64; ATOM_TYPE_COUNT],
}

/// Bond vocabulary; index 0 is the explicit "no bond" type.
pub struct BondVocab {
    pub names: [&'static str; BOND_TYPE_COUNT],
    pub valency_weight: [f64; BOND_TYPE_COUNT],
}

pub const ATOM_TYPE_COUNT: usize = 7;
pub const BOND_TYPE_COUNT: usize = 5;
/// Index of the Empty atom type (always last).
pub const EMPTY_ATOM: u8 = 6;
/// Index of the None bond type (always first).
pub const NONE_BOND: u8 = 0;
/// 20 amino-acid composition fractions plus normalized sequence length.
pub const PROTEIN_FEATURE_DIM: usize = 21;

pub const ATOM_VOCAB: AtomVocab = AtomVocab {
    symbols: ["C", "N", "O", "F", "S", "Cl", "*"],
    max_valency: [4, 3, 2, 1, 6, 1, 0],
    atomic_mass: [12.011, 14.007, 15.999, 18.998, 32.06, 35.45, 0.0],
};

pub const BOND_VOCAB: BondVocab = BondVocab {
    names: ["none", "single", "double", "triple", "aromatic"],
    valency_weight: [0.0, 1.0, 2.0, 3.0, 1.5],
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_last_with_zero_valency() {
        assert_eq!(EMPTY_ATOM as usize, ATOM_TYPE_COUNT - 1);
        assert_eq!(ATOM_VOCAB.max_valency[EMPTY_ATOM as usize], 0);
        assert_eq!(ATOM_VOCAB.atomic_mass[EMPTY_ATOM as usize], 0.0);
    }

    #[test]
    fn none_bond_is_index_zero_with_zero_weight() {
        assert_eq!(NONE_BOND, 0);
        assert_eq!(BOND_VOCAB.valency_weight[NONE_BOND as usize], 0.0);
        assert_eq!(BOND_VOCAB.valency_weight[4], 1.5);
    }
}

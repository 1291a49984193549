//! Molecular-graph data model: fixed-slot atom/bond tensors, validity and
//! property oracles, the JSONL pair-record format, ligand trimming, and the
//! synthetic protein-ligand dataset generator.

mod molecule;
mod oracle;
mod records;
mod synth;
mod vocab;

pub use molecule::{
    trim_ligand, validate_molecule, Molecule, SoftMolecule, ValidityReport, Violation,
};
pub use oracle::{property_oracle, property_targets_lenient, PropertyVector, PROPERTY_COUNT};
pub use records::{
    load_dataset, parse_pair_record, serialize_pair_record, write_dataset, PairRecord,
    ProteinRecord,
};
pub use synth::{protein_summary_stat, synthesize_dataset};
pub use vocab::{
    AtomVocab, BondVocab, ATOM_TYPE_COUNT, ATOM_VOCAB, BOND_TYPE_COUNT, BOND_VOCAB, EMPTY_ATOM,
    NONE_BOND, PROTEIN_FEATURE_DIM,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MolError {
    #[error("molecule shape mismatch: {0}")]
    Shape(String),
    #[error("invalid molecule: {0}")]
    Invalid(ValidityReport),
    #[error("record parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

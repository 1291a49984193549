//! Evaluation: Fréchet distance between generated and real molecule
//! feature clouds, binding-energy separation tables, and the protein
//! embedding-dimension ablation.

mod features;
mod frechet;
mod reports;

pub use features::{feature_dim, mol_feature_vector, raw_feature_vector, FeatureCloud};
pub use frechet::{frechet_distance, psd_sqrt, COV_REGULARIZATION};
pub use reports::{
    binding_energy_report, write_energy_report_csv, write_energy_report_jsonl, xdim_ablation,
    AblationRun, EnergyReportRow, ENERGY_REPORT_CSV_HEADER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),
}

//! Energy-guided conditional molecular graph generation.
//!
//! Five coupled networks (protein encoder, ligand generator, Wasserstein
//! critic, binding-energy network, property-reward network) trained with a
//! WGAN-GP objective, a single-contrastive-sample energy loss, and a
//! property-regression reward loss, evaluated with Fréchet distance and
//! binding-energy separation curves. Everything runs on a self-contained
//! f64 tape-autodiff core; no GPU or external ML framework involved.

pub mod diffcore;
pub mod molgraph;
pub mod networks;
pub mod losses;
pub mod training;
pub mod evalmetrics;

use nalgebra::{DMatrix, DVector};

use super::EvalError;
use crate::molgraph::{Molecule, ATOM_TYPE_COUNT, BOND_TYPE_COUNT};

/// Feature dimension of [`mol_feature_vector`] for `n` atom slots.
pub fn feature_dim(n: usize) -> usize {
    n * ATOM_TYPE_COUNT + n * (n - 1) / 2 * BOND_TYPE_COUNT
}

/// Flattened atom one-hots followed by the strict-upper-triangle bond
/// fibers in row-major (i < j) order. Not permutation-canonical: the score
/// compares raw generator output order against raw dataset order.
pub fn mol_feature_vector(m: &Molecule) -> Result<Vec<f64>, EvalError> {
    let report = m.validity_report();
    if !report.is_valid() {
        return Err(EvalError::InvalidMolecule(report.to_string()));
    }
    Ok(raw_feature_vector(m))
}

/// Feature layout shared with [`mol_feature_vector`] but without the
/// validity gate; generated molecules enter the score whether or not they
/// are chemically sensible.
pub fn raw_feature_vector(m: &Molecule) -> Vec<f64> {
    let n = m.n();
    let mut out = Vec::with_capacity(feature_dim(n));
    out.extend_from_slice(&m.atom_tensor().values);
    let bonds = m.bond_tensor();
    for i in 0..n {
        for j in (i + 1)..n {
            let base = (i * n + j) * BOND_TYPE_COUNT;
            out.extend_from_slice(&bonds.values[base..base + BOND_TYPE_COUNT]);
        }
    }
    out
}

/// Sample mean and covariance of a set of feature vectors (rows).
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub count: usize,
    pub dim: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureCloud {
    /// Fits mean and the unbiased (n-1) covariance. Needs at least two
    /// samples of equal dimension.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        if rows.len() < 2 {
            return Err(EvalError::Contract(format!(
                "need at least 2 samples to fit a feature cloud, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EvalError::Contract("inconsistent feature dimensions".into()));
        }
        let count = rows.len();
        let mut mean = DVector::zeros(dim);
        for r in rows {
            for (k, &v) in r.iter().enumerate() {
                mean[k] += v;
            }
        }
        mean /= count as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for r in rows {
            let d = DVector::from_iterator(dim, r.iter().copied()) - &mean;
            // rank-one update; only the upper triangle, mirrored below
            for i in 0..dim {
                let di = d[i];
                if di == 0.0 {
                    continue;
                }
                for j in i..dim {
                    cov[(i, j)] += di * d[j];
                }
            }
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                cov[(j, i)] = cov[(i, j)];
            }
        }
        cov /= (count - 1) as f64;
        Ok(FeatureCloud { count, dim, mean, cov })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{EMPTY_ATOM, NONE_BOND};

    #[test]
    fn all_empty_molecule_hits_the_expected_one_hot_slots() {
        let m = Molecule::empty(4);
        let f = mol_feature_vector(&m).unwrap();
        assert_eq!(f.len(), feature_dim(4));
        for i in 0..4 {
            for t in 0..ATOM_TYPE_COUNT {
                let expect = if t == EMPTY_ATOM as usize { 1.0 } else { 0.0 };
                assert_eq!(f[i * ATOM_TYPE_COUNT + t], expect);
            }
        }
        let bond_block = &f[4 * ATOM_TYPE_COUNT..];
        for (k, &v) in bond_block.iter().enumerate() {
            let expect = if k % BOND_TYPE_COUNT == NONE_BOND as usize { 1.0 } else { 0.0 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn default_scale_feature_length() {
        assert_eq!(feature_dim(32), 32 * 7 + 496 * 5);
        assert_eq!(feature_dim(32), 2704);
    }

    #[test]
    fn permuting_atoms_changes_the_vector() {
        let mut m = Molecule::empty(3);
        m.set_atom(0, 0);
        m.set_atom(1, 2);
        m.set_bond(0, 1, 1);
        let perm = [2usize, 1, 0];
        let a = mol_feature_vector(&m).unwrap();
        let b = mol_feature_vector(&m.permuted(&perm)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn cloud_statistics_match_hand_computation() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 4.0]];
        let c = FeatureCloud::fit(&rows).unwrap();
        assert_eq!(c.mean.as_slice(), &[2.0, 2.0]);
        // unbiased: [[2, 4], [4, 8]]
        assert_eq!(c.cov[(0, 0)], 2.0);
        assert_eq!(c.cov[(0, 1)], 4.0);
        assert_eq!(c.cov[(1, 1)], 8.0);
    }

    #[test]
    fn single_sample_cloud_is_rejected() {
        assert!(FeatureCloud::fit(&[vec![1.0]]).is_err());
    }
}

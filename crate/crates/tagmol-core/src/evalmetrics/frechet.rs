use nalgebra::DMatrix;

use super::features::FeatureCloud;
use super::EvalError;

/// Ridge added to each covariance before the cross term; sample
/// covariances of one-hot features are low-rank and the matrix square
/// root is fragile without it.
pub const COV_REGULARIZATION: f64 = 1e-6;

/// Symmetric PSD square root by eigendecomposition, with negative
/// eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= root;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussians fitted to two feature clouds:
/// `‖μ_r - μ_f‖² + Tr(Σ_r + Σ_f - 2 (Σ_r Σ_f)^{1/2})`, with the cross term
/// computed in the symmetric form `(Σ_r^{1/2} Σ_f Σ_r^{1/2})^{1/2}`, both
/// covariances regularized by `COV_REGULARIZATION · I`, and the result
/// clamped to be non-negative.
pub fn frechet_distance(real: &FeatureCloud, fake: &FeatureCloud) -> Result<f64, EvalError> {
    if real.dim != fake.dim {
        return Err(EvalError::Contract(format!(
            "feature dimensions differ: {} vs {}",
            real.dim, fake.dim
        )));
    }
    let d = real.dim;
    let mut cov_r = real.cov.clone();
    let mut cov_f = fake.cov.clone();
    for i in 0..d {
        cov_r[(i, i)] += COV_REGULARIZATION;
        cov_f[(i, i)] += COV_REGULARIZATION;
    }
    let mean_term = (&real.mean - &fake.mean).norm_squared();
    let sqrt_r = psd_sqrt(&cov_r);
    let inner = &sqrt_r * &cov_f * &sqrt_r;
    let cross = psd_sqrt(&inner);
    let fd = mean_term + cov_r.trace() + cov_f.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

use super::tape::{Tape, TensorId};
use super::tensor::Tensor;
use super::DiffError;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central finite
/// differences. Returns the maximum over coordinates of
/// `|g_analytic - g_fd| / max(1, |g_fd|)`.
///
/// `f` must rebuild the same computation on whatever tape it is handed;
/// it is called once for the analytic pass and twice per coordinate for
/// the difference quotients.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, DiffError>,
{
    if h <= 0.0 {
        return Err(DiffError::InvalidArg { op: "finite_diff_check", msg: "step must be > 0".into() });
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let root = f(&mut tape, xid)?;
    if !tape.value(root).is_scalar() {
        return Err(DiffError::NonScalarRoot(tape.value(root).shape.to_vec()));
    }
    let grads = tape.backward(root)?;
    let analytic = tape.grad_or_zeros(&grads, xid);

    let eval = |values: &[f64], coord: usize| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::from_values(x.shape.clone(), values.to_vec())?);
        let r = f(&mut t, id)?;
        let v = t.value(r).scalar_value();
        if !v.is_finite() {
            return Err(DiffError::NonFiniteProbe { coord });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = x.values.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe, i)?;
        probe[i] = orig - h;
        let fm = eval(&probe, i)?;
        probe[i] = orig;
        let g_fd = (fp - fm) / (2.0 * h);
        let err = (analytic.values[i] - g_fd).abs() / g_fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

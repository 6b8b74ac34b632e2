use rand::seq::index::sample;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive guard in the relative-error denominator. Keeps coordinates whose
/// true derivative is zero from amplifying central-difference roundoff.
pub const RELATIVE_ERROR_GUARD: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central
/// differences at `point`.
///
/// `f` builds the function on a fresh tape from the input leaf and returns a
/// scalar node. When `max_coords` is set, only that many uniformly sampled
/// coordinates are probed. Returns the maximum over probed coordinates of
/// `|analytic − central| / (|analytic| + |central| + guard)`.
pub fn finite_difference_check<'m, F, R>(
    f: F,
    point: &Tensor,
    probe: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Tape<'m>, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(probe > 0.0) {
        return Err(Error::invalid(format!("probe must be positive, got {probe}")));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = f(&mut tape, v)?;
        let t = tape.value(out);
        if !t.is_scalar() {
            return Err(Error::NonScalar(t.shape().to_vec()));
        }
        Ok(t.item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone(), true);
        let out = f(&mut tape, v)?;
        tape.backward(out)?.get(v)
    };

    let n = point.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => sample(rng, n, m).into_vec(),
        _ => (0..n).collect(),
    };

    let mut worst = 0.0f64;
    let mut probe_point = point.clone();
    for i in coords {
        let orig = probe_point.data()[i];
        probe_point.data_mut()[i] = orig + probe;
        let up = eval(&probe_point)?;
        probe_point.data_mut()[i] = orig - probe;
        let down = eval(&probe_point)?;
        probe_point.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * probe);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + RELATIVE_ERROR_GUARD);
        worst = worst.max(rel);
    }
    Ok(worst)
}

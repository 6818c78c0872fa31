use super::{GradSlice, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar-valued composite against
/// central finite differences, coordinate by coordinate, and returns the
/// worst relative error.
///
/// `build` reconstructs the loss from a fresh leaf each call; it must be a
/// pure function of the tensor it is handed.
pub fn grad_check<F>(build: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    grad_check_at(build, theta, eps, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates. Useful when the
/// composite is expensive and the tensor is large.
pub fn grad_check_at<F>(build: F, theta: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument {
            what: "finite-difference step",
            detail: format!("eps {eps} outside [1e-6, 1e-3]"),
        });
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let loss = build(&mut tape, leaf)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "grad_check objective" });
        }
        Ok(v)
    };

    // Reverse-mode gradient once.
    let mut tape = Tape::new();
    let leaf = tape.leaf(theta.clone());
    let loss = build(&mut tape, leaf)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite { context: "grad_check objective" });
    }
    let grads = tape.backward(loss)?;
    let g_ad = grads.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; theta.numel()]);

    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let step = eps * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let ad = g_ad[i];
        let denom = ad.abs().max(fd.abs());
        let err = if denom < 1e-10 { 0.0 } else { (ad - fd).abs() / denom.max(1e-8) };
        worst = worst.max(err);
    }
    Ok(worst)
}

//! Central finite-difference gradient check against the tape.

use super::{NumericsError, Scalar, Tape, Tensor, Var};

/// Scale below which a gradient entry counts as zero; central differences
/// carry roundoff of roughly `eps / h` there.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    /// Largest `|g_ad - g_fd| / (|g_ad| + |g_fd| + GRAD_CHECK_FLOOR)` over checked entries.
    pub max_rel_err: f64,
    /// Largest absolute difference, useful when both gradients are near zero.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` with extrapolated central differences of step `h`.
///
/// `f` must build its graph on the supplied tape from the supplied leaves.
/// At most `max_entries` coordinates per input are perturbed (evenly spaced).
pub fn grad_check<T, F>(inputs: &[Tensor<T>], f: F, h: f64, max_entries: usize) -> Result<GradCheckReport, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(*v);
        let n = inputs[i].len();
        let stride = if max_entries == 0 || n <= max_entries {
            1
        } else {
            n.div_ceil(max_entries)
        };
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            let mut central = |step: f64| -> Result<f64, NumericsError> {
                work[i].data_mut()[j] = orig + T::lit(step);
                let up = eval(&work)?;
                work[i].data_mut()[j] = orig - T::lit(step);
                let down = eval(&work)?;
                work[i].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * step))
            };
            // Richardson extrapolation cancels the h^2 term of the central difference.
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            let fd = (4.0 * fine - coarse) / 3.0;
            let ad = g.data()[j].as_f64();
            let abs = (ad - fd).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(abs / (ad.abs() + fd.abs() + GRAD_CHECK_FLOOR));
            report.checked += 1;
        }
    }
    Ok(report)
}

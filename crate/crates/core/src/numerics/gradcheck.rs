use super::{NumericsError, Tape, Tensor, Var};

/// Gradient magnitudes below this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_err: f64,
    /// `(input, coordinate)` where `max_rel_err` was observed.
    pub worst: Option<(usize, usize)>,
    /// First `(input, coordinate)` whose perturbed evaluation was not finite.
    pub non_finite: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `f` receives a fresh tape and one `requires_grad` leaf per entry of
/// `point`, and must return a single-element output. Every coordinate is
/// perturbed by `±eps`.
pub fn grad_check<E, F>(mut f: F, point: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: None,
        coordinates: 0,
        tol,
        passed: true,
    };
    if !base.is_finite() {
        report.non_finite = Some((0, 0));
        report.passed = false;
        return Ok(report);
    }

    let mut eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut work: Vec<Tensor> = point.to_vec();
    for (i, x) in point.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for c in 0..x.len() {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            report.coordinates += 1;
            if !(plus.is_finite() && minus.is_finite()) {
                report.non_finite.get_or_insert((i, c));
                report.passed = false;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((i, c));
            }
        }
    }
    report.passed &= report.max_rel_err <= tol;
    Ok(report)
}

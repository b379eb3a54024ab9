//! Finite-difference coverage of every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport, NumericsError, Tape, Tensor, Var};

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

/// One differentiable operation under test: its name, the shapes and value
/// range of its inputs, and a body producing a (non-scalar) output.
pub struct OpCase {
    pub name: &'static str,
    inputs: &'static [(&'static [usize], (f64, f64))],
    body: OpFn,
}

const ANY: (f64, f64) = (-2.0, 2.0);
const POS: (f64, f64) = (0.5, 2.0);

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", inputs: &[(&[3, 4], ANY), (&[4, 2], ANY)], body: |t, v| t.matmul(v[0], v[1]) },
        OpCase { name: "matmul_t", inputs: &[(&[3, 4], ANY), (&[2, 4], ANY)], body: |t, v| t.matmul_t(v[0], v[1]) },
        OpCase { name: "transpose", inputs: &[(&[2, 3], ANY)], body: |t, v| t.transpose(v[0]) },
        OpCase { name: "add", inputs: &[(&[2, 3], ANY), (&[2, 3], ANY)], body: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: &[(&[2, 3], ANY), (&[2, 3], ANY)], body: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: &[(&[2, 3], ANY), (&[2, 3], ANY)], body: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "div", inputs: &[(&[2, 3], ANY), (&[2, 3], POS)], body: |t, v| t.div(v[0], v[1]) },
        OpCase { name: "minimum", inputs: &[(&[2, 3], ANY), (&[2, 3], ANY)], body: |t, v| t.minimum(v[0], v[1]) },
        OpCase { name: "maximum", inputs: &[(&[2, 3], ANY), (&[2, 3], ANY)], body: |t, v| t.maximum(v[0], v[1]) },
        OpCase { name: "add_row", inputs: &[(&[3, 4], ANY), (&[4], ANY)], body: |t, v| t.add_row(v[0], v[1]) },
        OpCase { name: "affine", inputs: &[(&[2, 3], ANY)], body: |t, v| Ok(t.affine(v[0], -1.7, 0.3)) },
        OpCase { name: "relu", inputs: &[(&[3, 3], ANY)], body: |t, v| Ok(t.relu(v[0])) },
        OpCase { name: "sigmoid", inputs: &[(&[3, 3], ANY)], body: |t, v| Ok(t.sigmoid(v[0])) },
        OpCase { name: "exp", inputs: &[(&[3, 3], ANY)], body: |t, v| Ok(t.exp(v[0])) },
        OpCase { name: "ln", inputs: &[(&[3, 3], POS)], body: |t, v| Ok(t.ln(v[0])) },
        OpCase { name: "softplus", inputs: &[(&[3, 3], ANY)], body: |t, v| Ok(t.softplus(v[0])) },
        OpCase { name: "abs", inputs: &[(&[3, 3], ANY)], body: |t, v| Ok(t.abs(v[0])) },
        OpCase { name: "powf", inputs: &[(&[3, 3], POS)], body: |t, v| Ok(t.powf(v[0], 2.5)) },
        OpCase { name: "softmax_rows", inputs: &[(&[3, 4], ANY)], body: |t, v| t.softmax(v[0], 1) },
        OpCase { name: "softmax_cols", inputs: &[(&[3, 4], ANY)], body: |t, v| t.softmax(v[0], 0) },
        OpCase {
            name: "scaled_dot_attention",
            inputs: &[(&[3, 4], ANY), (&[5, 4], ANY), (&[5, 2], ANY)],
            body: |t, v| t.scaled_dot_attention(v[0], v[1], v[2]),
        },
        OpCase { name: "rowmax", inputs: &[(&[4, 3], ANY)], body: |t, v| t.rowmax(v[0]) },
        OpCase { name: "gather_rows", inputs: &[(&[4, 3], ANY)], body: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]) },
        OpCase { name: "concat_rows", inputs: &[(&[2, 3], ANY), (&[1, 3], ANY)], body: |t, v| t.concat_rows(&[v[0], v[1]]) },
        OpCase { name: "slice_rows", inputs: &[(&[4, 3], ANY)], body: |t, v| t.slice_rows(v[0], 1, 2) },
        OpCase { name: "concat_cols", inputs: &[(&[2, 3], ANY), (&[2, 1], ANY)], body: |t, v| t.concat_cols(&[v[0], v[1]]) },
        OpCase { name: "slice_cols", inputs: &[(&[3, 4], ANY)], body: |t, v| t.slice_cols(v[0], 1, 2) },
        OpCase { name: "sum", inputs: &[(&[2, 3], ANY)], body: |t, v| Ok(t.sum(v[0])) },
        OpCase { name: "mean_rows", inputs: &[(&[3, 4], ANY)], body: |t, v| t.mean_rows(v[0]) },
        OpCase {
            name: "layer_norm",
            inputs: &[(&[3, 5], ANY), (&[5], ANY), (&[5], ANY)],
            body: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase { name: "reshape", inputs: &[(&[2, 3], ANY)], body: |t, v| t.reshape(v[0], &[3, 2]) },
    ]
}

impl OpCase {
    /// Checks this case at `points` random inputs; the output is reduced to
    /// a scalar through a fixed random weighting so every output element
    /// carries a distinct upstream gradient.
    pub fn check(&self, seed: u64, points: usize, eps: f64, tol: f64) -> Result<GradCheckReport, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..points {
            let inputs: Vec<Tensor> = self
                .inputs
                .iter()
                .map(|(shape, (lo, hi))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(*lo..*hi)).collect();
                    Tensor::new(shape.to_vec(), data).expect("shape product")
                })
                .collect();
            let mut probe = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
            let probe_out = (self.body)(&mut probe, &vs)?;
            let out_shape = probe.shape(probe_out).to_vec();
            let n: usize = out_shape.iter().product();
            let weights = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let body = self.body;
            let report = grad_check(
                |t: &mut Tape, v: &[Var]| {
                    let y = body(t, v)?;
                    let w = t.constant(weights.clone());
                    let p = t.mul(y, w)?;
                    Ok::<_, NumericsError>(t.sum(p))
                },
                &inputs,
                eps,
                tol,
            )?;
            let replace = worst.as_ref().is_none_or(|w| report.max_rel_err > w.max_rel_err || !report.passed);
            let failed = !report.passed;
            if replace {
                worst = Some(report);
            }
            if failed {
                break;
            }
        }
        Ok(worst.expect("at least one point"))
    }
}

/// Runs every case and returns `(name, worst report)` pairs.
pub fn run_suite(seed: u64, points: usize, eps: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>, NumericsError> {
    cases()
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((c.name, c.check(seed.wrapping_add(i as u64), points, eps, tol)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_ten_points() {
        for (name, report) in run_suite(7, 10, 1e-5, 1e-4).unwrap() {
            assert!(report.passed, "{name}: {report:?}");
        }
    }
}

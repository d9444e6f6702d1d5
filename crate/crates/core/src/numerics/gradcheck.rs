//! Central finite-difference verification of tape gradients.

use super::{evaluate_with_gradients, Result, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-6, 1e-3]`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter;
    /// `None` checks every entry.
    pub samples_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, tolerance: 1e-5, samples_per_param: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(tolerance: f64, msg: String) -> Self {
        GradCheckReport {
            entries: Vec::new(),
            max_rel_error: f64::INFINITY,
            tolerance,
            passed: false,
            failure: Some(msg),
        }
    }

    /// Worst entry for each parameter index.
    pub fn max_by_param(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(p, _)| *p == e.param) {
                Some((_, m)) => *m = m.max(e.rel_error),
                None => out.push((e.param, e.rel_error)),
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `rng` picks entries when `samples_per_param` is set.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions, rng: &mut Rng) -> GradCheckReport
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.step) {
        return GradCheckReport::failed(opts.tolerance, format!("step {} outside [1e-6, 1e-3]", opts.step));
    }
    let (_, analytic) = match evaluate_with_gradients(params, &f) {
        Ok(r) => r,
        Err(e) => return GradCheckReport::failed(opts.tolerance, e.to_string()),
    };
    let eval_at = |pi: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut data = params[pi].to_vec();
        data[idx] += delta;
        let mut shifted = params.to_vec();
        shifted[pi] = Tensor::new(params[pi].shape().to_vec(), data)?;
        let tape = Tape::new();
        let vars: Vec<Var> = shifted.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&tape, &vars)?;
        tape.value(root).item()
    };

    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let indices: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < p.numel() => {
                let mut all: Vec<usize> = (0..p.numel()).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..p.numel()).collect(),
        };
        for idx in indices {
            let plus = eval_at(pi, idx, opts.step);
            let minus = eval_at(pi, idx, -opts.step);
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    return GradCheckReport::failed(opts.tolerance, e.to_string());
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[idx];
            entries.push(GradCheckEntry {
                param: pi,
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    GradCheckReport {
        passed: max_rel_error <= opts.tolerance,
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_polynomial_passes() {
        let mut rng = Rng::seed_from(3);
        let w = Tensor::from_fn(&[16], |_| rng.uniform_range(-1.0, 1.0)).unwrap();
        let report = grad_check(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                let cube = tape.mul(sq, p[0])?;
                tape.sum(cube)
            },
            &[w],
            &GradCheckOptions { tolerance: 1e-6, ..Default::default() },
            &mut rng,
        );
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert_eq!(report.entries.len(), 16);
    }

    #[test]
    fn dead_branch_is_exactly_zero() {
        let mut rng = Rng::seed_from(0);
        let w = Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap();
        let unused = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |tape, p| {
                let e = tape.exp(p[0])?;
                tape.sum(e)
            },
            &[w, unused],
            &GradCheckOptions::default(),
            &mut rng,
        );
        assert!(report.passed);
        for e in report.entries.iter().filter(|e| e.param == 1) {
            assert_eq!(e.analytic, 0.0);
            assert_eq!(e.numeric, 0.0);
        }
    }

    #[test]
    fn relative_error_has_floor() {
        assert!(relative_error(1.0, 1.1) > 0.09);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_step_fails_report() {
        let mut rng = Rng::seed_from(0);
        let w = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let report =
            grad_check(|tape, p| tape.sum(p[0]), &[w], &GradCheckOptions { step: 0.1, ..Default::default() }, &mut rng);
        assert!(!report.passed);
        assert!(report.failure.is_some());
    }
}

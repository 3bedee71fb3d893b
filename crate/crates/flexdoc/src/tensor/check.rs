//! Finite-difference gradient verification.

use indexmap::IndexMap;
use rand::Rng;

use super::Tensor;

/// One probed parameter entry.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<ProbeRecord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grad_check: {} probes, max rel error {:.3e}, mean rel error {:.3e} (tol {:.1e}) -> {}",
            self.probes,
            self.max_rel_error,
            self.mean_rel_error,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "\n  worst: {}[{}] analytic {:.6e} vs numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Gradients below this magnitude are compared on an absolute scale; pure
/// relative error on near-zero finite differences only measures roundoff.
const REL_FLOOR: f64 = 1e-3;

/// Compares analytic gradients against central finite differences on
/// randomly probed parameter entries.
///
/// `value_fn` evaluates the scalar function; `grad_fn` runs the autodiff
/// path once and returns a gradient tensor per parameter name (parameters
/// the loss does not reach may be absent and are treated as zero).
pub fn grad_check<V, G>(
    params: &IndexMap<String, Tensor>,
    value_fn: V,
    grad_fn: G,
    probes: usize,
    eps: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    V: Fn(&IndexMap<String, Tensor>) -> f64,
    G: Fn(&IndexMap<String, Tensor>) -> IndexMap<String, Tensor>,
{
    let analytic = grad_fn(params);
    let total: usize = params.values().map(Tensor::numel).sum();
    assert!(total > 0, "grad_check: no parameters");

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst: Option<ProbeRecord> = None;
    let mut scratch = params.clone();

    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let (name, index) = {
            let mut found = None;
            for (name, tensor) in params.iter() {
                if flat < tensor.numel() {
                    found = Some((name.clone(), flat));
                    break;
                }
                flat -= tensor.numel();
            }
            found.expect("flat index within total")
        };

        let base = params[&name].data()[index];
        scratch[&name].data_mut()[index] = base + eps;
        let plus = value_fn(&scratch);
        scratch[&name].data_mut()[index] = base - eps;
        let minus = value_fn(&scratch);
        scratch[&name].data_mut()[index] = base;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(&name).map_or(0.0, |g| g.data()[index]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = Some(ProbeRecord {
                param: name,
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }

    GradCheckReport {
        probes,
        eps,
        tol,
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / probes.max(1) as f64,
        worst,
    }
}

//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, KinkSignature, Var};
use super::ops::weighted_sum;
use super::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so entries that are
    /// both ~0 compare absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled), or all.
    pub max_coords: Option<usize>,
    /// Times the step is divided by 10 when a perturbation crosses a
    /// ReLU or max-pool branch point.
    pub refinements: usize,
    /// Central differences carry rounding noise of roughly `ε·|f|/h`.
    /// Differences below this many units of it are not held to the
    /// relative tolerance, which otherwise fails on gradients that are
    /// zero (a bias feeding batch norm) or tiny next to the loss. The
    /// observed second difference raises this floor per coordinate.
    pub noise_ulps: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: None,
            refinements: 2,
            noise_ulps: 100.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Coordinates where every step size still crossed a branch point.
    pub kink_skipped: usize,
    /// Inputs whose analytic gradient was non-finite or missing.
    pub failures: Vec<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error < self.tolerance && self.checked > 0
    }
}

/// Evaluates `f` on fresh leaves for `inputs` and returns the reverse-mode
/// gradient of `Σ f(inputs)·R` for a fixed random projection `R`.
pub fn analytic_gradients<F>(f: &F, inputs: &[(String, Tensor4)], seed: u64) -> Result<Vec<Option<Tensor4>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = projection(g.value(out), seed);
    let loss = weighted_sum(&mut g, out, &proj)?;
    let mut grads = g.backward(loss, None)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

/// Full check: reverse-mode gradients against central differences.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor4)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs, cfg.seed)?;
    compare_gradients(&f, inputs, &analytic, cfg)
}

/// Compares supplied gradients with central differences of the same
/// projected objective [`analytic_gradients`] differentiates.
pub fn compare_gradients<F>(
    f: &F,
    inputs: &[(String, Tensor4)],
    analytic: &[Option<Tensor4>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor4> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (base, base_sig, proj) = evaluate(f, &values, None, cfg.seed)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        kink_skipped: 0,
        failures: Vec::new(),
        tolerance: cfg.tolerance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for (k, (name, _)) in inputs.iter().enumerate() {
        let len = values[k].len();
        let grad = match analytic.get(k).and_then(|g| g.as_ref()) {
            Some(g) if g.is_finite() => g.clone(),
            Some(_) => {
                report.failures.push(format!("{name}: non-finite gradient"));
                continue;
            }
            // an input the output ignores has gradient zero
            None => Tensor4::zeros(values[k].shape()),
        };
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < len => {
                let mut c = index::sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let original = values[k].data()[i];
            let mut step = cfg.step;
            let mut numeric = None;
            for _ in 0..=cfg.refinements {
                values[k].data_mut()[i] = original + step;
                let (plus, sig_p, _) = evaluate(f, &values, Some(&proj), cfg.seed)?;
                values[k].data_mut()[i] = original - step;
                let (minus, sig_m, _) = evaluate(f, &values, Some(&proj), cfg.seed)?;
                values[k].data_mut()[i] = original;
                if sig_p == base_sig && sig_m == base_sig {
                    // the second difference is rounding noise plus an h² term
                    // of the same order as central-difference truncation
                    let wobble = (plus + minus - 2.0 * base).abs() / (2.0 * step);
                    numeric = Some(((plus - minus) / (2.0 * step), step, wobble));
                    break;
                }
                step /= 10.0;
            }
            let Some((numeric, step, wobble)) = numeric else {
                report.kink_skipped += 1;
                continue;
            };
            let a = grad.data()[i];
            let noise = (cfg.noise_ulps * f64::EPSILON * base.abs().max(1.0) / step).max(wobble);
            let floor = cfg.floor.max(noise / cfg.tolerance);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

fn projection(out: &Tensor4, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::uniform(out.shape(), -1.0, 1.0, &mut rng)
}

fn evaluate<F>(
    f: &F,
    values: &[Tensor4],
    proj: Option<&Tensor4>,
    seed: u64,
) -> Result<(f64, Option<KinkSignature>, Tensor4)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = match proj {
        Some(p) => p.clone(),
        None => projection(g.value(out), seed),
    };
    let loss = weighted_sum(&mut g, out, &proj)?;
    Ok((g.value(loss).data()[0], g.kink_signature(), proj))
}

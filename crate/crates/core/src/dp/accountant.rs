//! Rényi-DP accounting for the sampled Gaussian mechanism.
//!
//! A single mechanism invocation samples each record independently with
//! probability `q` and perturbs the (sensitivity-1) sum with Gaussian noise
//! of std `sigma`. Its order-`alpha` Rényi loss is the larger of the two
//! divergences between `N(0, sigma^2)` and the subsampled mixture
//! `(1-q) N(0, sigma^2) + q N(1, sigma^2)`, evaluated in both directions.
//!
//! Integer orders use the exact binomial expansion of the mixture moment;
//! non-integer orders and the reverse direction are evaluated by adaptive
//! quadrature in log space.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::topology::TopologyKind;

/// Absolute quadrature tolerance on the scaled divergence integral.
const QUAD_TOL: f64 = 1e-12;
const QUAD_PANELS: usize = 64;
const QUAD_MAX_DEPTH: usize = 48;
const SCAN_POINTS: usize = 4096;

/// Orders used by the accountant: {1.25, 1.5, 1.75, 2..=64, 128, 256}.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![1.25, 1.5, 1.75];
    grid.extend((2..=64).map(f64::from));
    grid.push(128.0);
    grid.push(256.0);
    grid
}

fn validate_mechanism(q: f64, sigma: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Accounting(format!(
            "sampling rate {q} outside (0, 1]"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Accounting(format!(
            "noise multiplier {sigma} must be positive"
        )));
    }
    Ok(())
}

/// ln of the mixture/pure likelihood ratio
/// `r(x) = (1-q) + q * exp((2x - 1) / (2 sigma^2))`.
fn ln_mix_ratio(x: f64, q: f64, sigma: f64) -> f64 {
    let u = (2.0 * x - 1.0) / (2.0 * sigma * sigma);
    if q >= 1.0 {
        return u;
    }
    let a = (1.0 - q).ln();
    let b = q.ln() + u;
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn log_binomial(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// ln E_{x ~ N(0, s^2)}[r(x)^alpha] for integer alpha, by the binomial sum
/// `sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 s^2))`.
fn log_moment_integer(alpha: u64, q: f64, sigma: f64) -> f64 {
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        if q >= 1.0 && k < alpha {
            continue; // (1-q)^(alpha-k) vanishes
        }
        let mut t =
            log_binomial(alpha, k) + (k * (k.saturating_sub(1))) as f64 / (2.0 * sigma * sigma);
        if q < 1.0 {
            t += (alpha - k) as f64 * (1.0 - q).ln();
        }
        t += k as f64 * q.ln();
        terms.push(t);
    }
    log_sum_exp(&terms)
}

struct Simpson<'a> {
    f: &'a dyn Fn(f64) -> f64,
    max_depth: usize,
}

impl Simpson<'_> {
    #[allow(clippy::too_many_arguments)]
    fn refine(
        &self,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64> {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = (self.f)(lm);
        let frm = (self.f)(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            return Err(Error::QuadratureDiverged {
                tol,
                depth: self.max_depth,
            });
        }
        // Keep the per-child tolerance above f64 rounding noise, otherwise
        // the refinement can never terminate.
        let child_tol = (0.5 * tol).max(2.0 * f64::EPSILON);
        let l = self.refine(a, fa, m, fm, lm, flm, left, child_tol, depth - 1)?;
        let r = self.refine(m, fm, b, fb, rm, frm, right, child_tol, depth - 1)?;
        Ok(l + r)
    }

    fn integrate(&self, a: f64, b: f64, tol: f64) -> Result<f64> {
        let fa = (self.f)(a);
        let fb = (self.f)(b);
        let m = 0.5 * (a + b);
        let fm = (self.f)(m);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        self.refine(a, fa, b, fb, m, fm, whole, tol, self.max_depth)
    }
}

/// ln E_{x ~ N(0, s^2)}[r(x)^power] by adaptive Simpson quadrature of the
/// log-space integrand. `power` is `alpha` for the mixture-vs-pure direction
/// and `1 - alpha` for the reverse.
fn log_moment_quadrature(q: f64, sigma: f64, power: f64) -> Result<f64> {
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let h = move |x: f64| -> f64 {
        log_norm - x * x / (2.0 * sigma * sigma) + power * ln_mix_ratio(x, q, sigma)
    };

    // The integrand peaks inside [-(|power|+1), |power|+1]; the Gaussian
    // factor kills everything beyond ~16 sigma of the peak.
    let reach = power.abs() + 1.0 + 16.0 * sigma;
    let (lo, hi) = (-reach, reach);

    let mut scale = f64::NEG_INFINITY;
    for i in 0..=SCAN_POINTS {
        let x = lo + (hi - lo) * i as f64 / SCAN_POINTS as f64;
        scale = scale.max(h(x));
    }

    let f = move |x: f64| (h(x) - scale).exp();
    let simpson = Simpson {
        f: &f,
        max_depth: QUAD_MAX_DEPTH,
    };
    let panel_tol = QUAD_TOL / QUAD_PANELS as f64;
    let mut total = 0.0;
    for p in 0..QUAD_PANELS {
        let a = lo + (hi - lo) * p as f64 / QUAD_PANELS as f64;
        let b = lo + (hi - lo) * (p + 1) as f64 / QUAD_PANELS as f64;
        total += simpson.integrate(a, b, panel_tol)?;
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite("sgm divergence integral"));
    }
    Ok(scale + total.ln())
}

fn is_integer_order(alpha: f64) -> bool {
    alpha.fract() == 0.0 && alpha <= u64::MAX as f64
}

/// One-step Rényi loss `eps(alpha)` of the sampled Gaussian mechanism: the
/// max over both divergence directions. For `q = 1` this reduces to the
/// Gaussian value `alpha / (2 sigma^2)`.
pub fn rdp_sgm_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    validate_mechanism(q, sigma)?;
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Accounting(format!("order {alpha} must exceed 1")));
    }
    let eps_mix_vs_pure = if is_integer_order(alpha) {
        log_moment_integer(alpha as u64, q, sigma) / (alpha - 1.0)
    } else {
        log_moment_quadrature(q, sigma, alpha)? / (alpha - 1.0)
    };
    let eps_pure_vs_mix = log_moment_quadrature(q, sigma, 1.0 - alpha)? / (alpha - 1.0);
    Ok(eps_mix_vs_pure.max(eps_pure_vs_mix).max(0.0))
}

/// Per-order RDP of one mechanism step, composed over a step count.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpLedger {
    alpha_grid: Vec<f64>,
    eps_per_step: Vec<f64>,
    steps: u64,
}

/// The tightest (epsilon, delta) conversion over the order grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_alpha: f64,
}

impl RdpLedger {
    /// Ledger of a single sampled-Gaussian step over `alpha_grid`.
    pub fn sgm_step(q: f64, sigma: f64, alpha_grid: &[f64]) -> Result<Self> {
        if alpha_grid.is_empty() {
            return Err(Error::Accounting("alpha grid is empty".into()));
        }
        let eps_per_step = alpha_grid
            .iter()
            .map(|&alpha| rdp_sgm_step(q, sigma, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha_grid: alpha_grid.to_vec(),
            eps_per_step,
            steps: 1,
        })
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn eps_per_step(&self) -> &[f64] {
        &self.eps_per_step
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// RDP composes additively order-wise: the same ledger over `steps` steps.
    pub fn compose(&self, steps: u64) -> Self {
        Self {
            alpha_grid: self.alpha_grid.clone(),
            eps_per_step: self.eps_per_step.clone(),
            steps,
        }
    }

    /// Total eps(alpha) after composition.
    pub fn total_eps(&self) -> Vec<f64> {
        self.eps_per_step
            .iter()
            .map(|e| e * self.steps as f64)
            .collect()
    }

    /// Convert to (epsilon, delta)-DP:
    /// `epsilon = min_alpha [steps * eps(alpha) + ln(1/delta) / (alpha - 1)]`.
    pub fn to_dp(&self, delta: f64) -> Result<PrivacySpend> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Accounting(format!("delta {delta} outside (0, 1)")));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Accounting("alpha grid is empty".into()));
        }
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = f64::INFINITY;
        let mut best_alpha = self.alpha_grid[0];
        for (&alpha, &eps) in self.alpha_grid.iter().zip(&self.eps_per_step) {
            let candidate = eps * self.steps as f64 + log_inv_delta / (alpha - 1.0);
            if candidate < best {
                best = candidate;
                best_alpha = alpha;
            }
        }
        Ok(PrivacySpend {
            epsilon: best,
            delta,
            optimal_alpha: best_alpha,
        })
    }
}

/// Per-round loss of the whole framework: shards are disjoint, so parallel
/// composition takes the maximum over agents.
pub fn framework_per_round_loss(agent_losses: &[f64]) -> Result<f64> {
    if agent_losses.is_empty() {
        return Err(Error::Accounting("no per-agent losses supplied".into()));
    }
    Ok(agent_losses
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Total budget after `n_acrs` asynchronous communication rounds:
/// `N eps / K` on a chain, `N eps / log2(K)` on a tree, `N eps` on a star.
pub fn topology_budget(
    n_acrs: u64,
    per_round_eps: f64,
    kind: TopologyKind,
    num_agents: usize,
) -> Result<f64> {
    let n = n_acrs as f64;
    match kind {
        TopologyKind::Chain => Ok(n * per_round_eps / num_agents as f64),
        TopologyKind::BinaryTree => {
            if num_agents < 2 {
                return Err(Error::Accounting(
                    "tree budget requires at least 2 agents".into(),
                ));
            }
            Ok(n * per_round_eps / (num_agents as f64).log2())
        }
        TopologyKind::Star => Ok(n * per_round_eps),
        TopologyKind::Custom => Err(Error::Accounting(
            "no closed-form budget for custom topologies".into(),
        )),
    }
}

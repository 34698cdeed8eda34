//! Primal-dual fast gradient method on the smoothed dual, with
//! `alpha`-weighted primal averaging.

use crate::error::{Error, Result};
use crate::model::{check_len, ProblemInstance, QuadraticUtility, Utility};
use crate::oracle::{
    check_prices, lipschitz_for_modulus, LipschitzMethod, SmoothedDualOracle, SmoothingConfig,
};
use crate::trace::{fingerprint, SolverTrace, StepType, TraceRow};

/// Step weights: `alpha_t = (t+1)/2`, `A_t = (t+1)(t+2)/4`, `tau_t = 2/(t+3)`.
pub mod weights {
    use num_rational::Ratio;

    pub fn alpha(t: u64) -> f64 {
        (t as f64 + 1.0) / 2.0
    }

    pub fn accumulated(t: u64) -> f64 {
        (t as f64 + 1.0) * (t as f64 + 2.0) / 4.0
    }

    pub fn tau(t: u64) -> f64 {
        2.0 / (t as f64 + 3.0)
    }

    pub fn alpha_exact(t: u64) -> Ratio<u128> {
        Ratio::new(t as u128 + 1, 2)
    }

    pub fn accumulated_exact(t: u64) -> Ratio<u128> {
        Ratio::new((t as u128 + 1) * (t as u128 + 2), 4)
    }

    pub fn tau_exact(t: u64) -> Ratio<u128> {
        Ratio::new(2, t as u128 + 3)
    }
}

/// One component of the dual update. Returns `(y, z, lambda_next)` and
/// advances the weighted gradient sum in place.
#[inline]
pub(crate) fn update_price(
    lambda: f64,
    lambda0: f64,
    grad: f64,
    grad_accum: &mut f64,
    t: u64,
    lipschitz: f64,
) -> (f64, f64, f64) {
    *grad_accum += weights::alpha(t) * grad;
    let y = (lambda - grad / lipschitz).max(0.0);
    let z = (lambda0 - *grad_accum / lipschitz).max(0.0);
    let tau = weights::tau(t);
    (y, z, tau * z + (1.0 - tau) * y)
}

#[derive(Debug, Clone)]
pub struct FgmState {
    /// Number of completed iterations.
    pub t: u64,
    pub lambda: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// `sum_k alpha_k (b - C x(lambda_k))`.
    pub grad_accum: Vec<f64>,
    /// `sum_k alpha_k x(lambda_k)`.
    pub primal_accum: Vec<f64>,
    /// `sum_k alpha_k`, i.e. `A_{t-1}`.
    pub weight_sum: f64,
    pub lipschitz: f64,
}

impl FgmState {
    pub fn new(lambda0: Vec<f64>, n: usize, lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        check_prices(&lambda0, lambda0.len())?;
        let m = lambda0.len();
        Ok(Self {
            t: 0,
            lambda: lambda0.clone(),
            y: lambda0.clone(),
            z: lambda0.clone(),
            lambda0,
            grad_accum: vec![0.0; m],
            primal_accum: vec![0.0; n],
            weight_sum: 0.0,
            lipschitz,
        })
    }

    /// Averaged primal point `x_hat = primal_accum / A`.
    pub fn x_hat(&self) -> Vec<f64> {
        if self.t == 0 {
            return vec![0.0; self.primal_accum.len()];
        }
        self.primal_accum
            .iter()
            .map(|p| p / self.weight_sum)
            .collect()
    }

    /// One iteration; returns `x(lambda_t)`.
    pub fn step<U: Utility>(&mut self, oracle: &SmoothedDualOracle<'_, U>) -> Result<Vec<f64>> {
        let inst = oracle.instance();
        check_len("price vector", self.lambda.len(), inst.m())?;
        let t = self.t;
        let x = oracle.primal_from_prices(&self.lambda)?;
        let load = inst.c.mat_vec(&x)?;
        let alpha = weights::alpha(t);
        for (acc, xi) in self.primal_accum.iter_mut().zip(&x) {
            *acc += alpha * xi;
        }
        for j in 0..self.lambda.len() {
            let grad = inst.b[j] - load[j];
            let (y, z, next) = update_price(
                self.lambda[j],
                self.lambda0[j],
                grad,
                &mut self.grad_accum[j],
                t,
                self.lipschitz,
            );
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    what: "dual iterate",
                    index: j,
                });
            }
            self.y[j] = y;
            self.z[j] = z;
            self.lambda[j] = next;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "best response",
                index: i,
            });
        }
        self.weight_sum += alpha;
        self.t += 1;
        Ok(x)
    }
}

/// When to stop iterating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Run exactly this many iterations (still capped by `max_iter`).
    Iterations(u64),
    /// Run the iteration count given by [`fgm_iterations_bound`].
    TheoreticalBound,
    /// Stop once `phi_mu(y) - U_mu(x_hat) <= eps/2` and
    /// `||(C x_hat - b)_+||_q <= eps / (4 R_q)`.
    Certificate,
}

#[derive(Debug, Clone)]
pub struct FgmOptions {
    pub lipschitz: LipschitzMethod,
    /// Use the utility's own strong concavity instead of additive smoothing.
    /// `None` turns it on whenever the utility is strongly concave.
    pub use_curvature: Option<bool>,
    pub stop: StopRule,
    pub max_iter: u64,
    /// Record a trace row every this many iterations (and at the end).
    pub trace_stride: u64,
}

impl Default for FgmOptions {
    fn default() -> Self {
        Self {
            lipschitz: LipschitzMethod::Spectral,
            use_curvature: None,
            stop: StopRule::Certificate,
            max_iter: 100_000,
            trace_stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FgmResult {
    pub lambda_final: Vec<f64>,
    pub y_final: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub trace: SolverTrace,
    pub iterations: u64,
    /// False only when the certificate rule ran out of iterations.
    pub converged: bool,
    pub lipschitz: f64,
    /// Prox coefficient actually used by the oracle.
    pub mu: f64,
    pub r_q: Option<f64>,
}

/// Everything [`fgm_solve`] derives before iterating.
#[derive(Debug, Clone)]
pub struct FgmSetup {
    pub cfg: SmoothingConfig,
    pub lipschitz: f64,
    pub r_q: Option<f64>,
    pub iterations: u64,
}

impl FgmSetup {
    pub fn new<U: Utility>(
        inst: &ProblemInstance<U>,
        cfg: &SmoothingConfig,
        lambda0: &[f64],
        opts: &FgmOptions,
    ) -> Result<Self> {
        check_prices(lambda0, inst.m())?;
        let curvature = inst.utility.strong_concavity();
        let use_curvature = opts.use_curvature.unwrap_or(curvature > 0.0) && curvature > 0.0;
        let mut cfg = cfg.clone();
        let modulus = if use_curvature {
            cfg.mu = 0.0;
            curvature
        } else {
            cfg.mu
        };
        let mut lipschitz = lipschitz_for_modulus(inst, opts.lipschitz, modulus)?;
        if lipschitz == 0.0 {
            // No incidences: the gradient is constant and any step works.
            lipschitz = 1.0;
        }
        let needs_r_q = !matches!(opts.stop, StopRule::Iterations(_));
        let r_q = if needs_r_q {
            let oracle = SmoothedDualOracle::new(inst, cfg.clone())?;
            Some(oracle.dual_radius()?.max(inst.q.of(lambda0)))
        } else {
            None
        };
        let iterations = match opts.stop {
            StopRule::Iterations(n) => n.min(opts.max_iter),
            StopRule::Certificate => opts.max_iter,
            StopRule::TheoreticalBound => {
                let norm_c = (lipschitz * modulus).sqrt();
                let mu_strong = if use_curvature { curvature } else { 0.0 };
                fgm_iterations_bound(
                    cfg.r_p,
                    r_q.unwrap_or(0.0),
                    norm_c,
                    mu_strong,
                    cfg.epsilon,
                )
                .min(opts.max_iter)
            }
        };
        Ok(Self {
            cfg,
            lipschitz,
            r_q,
            iterations,
        })
    }
}

/// Trace row for the state after `t` iterations. Evaluating the gap costs
/// one best response per vertex, charged to the oracle.
pub(crate) fn record_row<U: Utility>(
    oracle: &SmoothedDualOracle<'_, U>,
    t: u64,
    x_hat: &[f64],
    y: &[f64],
) -> Result<TraceRow> {
    let inst = oracle.instance();
    let utility = inst.utility_total(x_hat)?;
    let violation = inst.violation_norm(x_hat)?;
    let gap = oracle.dual_value(y)? - oracle.smoothed_utility(x_hat)?;
    Ok(TraceRow {
        iter: t,
        oracle_calls: oracle.calls(),
        utility,
        violation,
        gap: Some(gap),
        step_type: StepType::Fgm,
    })
}

pub(crate) fn certificate_holds(row: &TraceRow, eps: f64, r_q: f64) -> bool {
    let gap_ok = row.gap.is_some_and(|g| g <= eps / 2.0);
    let viol_ok = if r_q > 0.0 {
        row.violation <= eps / (4.0 * r_q)
    } else {
        row.violation == 0.0
    };
    gap_ok && viol_ok
}

pub(crate) fn base_trace(inst: &ProblemInstance, setup: &FgmSetup, opts: &FgmOptions) -> SolverTrace {
    let mut trace = SolverTrace::new(fingerprint(inst));
    trace.param("solver", "fgm");
    trace.param("epsilon", setup.cfg.epsilon);
    trace.param("mu", setup.cfg.mu);
    trace.param("lipschitz", setup.lipschitz);
    trace.param("lipschitz_method", format!("{:?}", opts.lipschitz));
    trace.param("r_p", setup.cfg.r_p);
    if let Some(r) = setup.r_q {
        trace.param("r_q", r);
    }
    trace.param("stop", format!("{:?}", opts.stop));
    trace.param("max_iter", setup.iterations);
    trace.param("trace_stride", opts.trace_stride);
    trace
}

pub fn fgm_solve(
    inst: &ProblemInstance<QuadraticUtility>,
    cfg: &SmoothingConfig,
    lambda0: &[f64],
    opts: &FgmOptions,
) -> Result<FgmResult> {
    let setup = FgmSetup::new(inst, cfg, lambda0, opts)?;
    let mut trace = base_trace(inst, &setup, opts);
    let (state, converged, oracle_mu) = run_fgm(inst, &setup, lambda0, opts, |row| trace.push(row))?;
    Ok(FgmResult {
        x_hat: state.x_hat(),
        lambda_final: state.lambda,
        y_final: state.y,
        trace,
        iterations: state.t,
        converged,
        lipschitz: setup.lipschitz,
        mu: oracle_mu,
        r_q: setup.r_q,
    })
}

/// Iteration loop shared by all callers; `on_row` sees every trace row.
pub fn run_fgm<U: Utility>(
    inst: &ProblemInstance<U>,
    setup: &FgmSetup,
    lambda0: &[f64],
    opts: &FgmOptions,
    mut on_row: impl FnMut(TraceRow),
) -> Result<(FgmState, bool, f64)> {
    let oracle = SmoothedDualOracle::new(inst, setup.cfg.clone())?;
    let mut state = FgmState::new(lambda0.to_vec(), inst.n(), setup.lipschitz)?;
    let stride = opts.trace_stride.max(1);
    let certificate = opts.stop == StopRule::Certificate;
    let mut converged = !certificate;
    while state.t < setup.iterations {
        state.step(&oracle)?;
        if state.t % stride == 0 || state.t == setup.iterations {
            let row = record_row(&oracle, state.t, &state.x_hat(), &state.y)?;
            on_row(row);
            if certificate && certificate_holds(&row, setup.cfg.epsilon, setup.r_q.unwrap_or(0.0)) {
                converged = true;
                break;
            }
        }
    }
    Ok((state, converged, setup.cfg.mu))
}

/// Iterations sufficient for an `eps`-solution: `floor(8 sqrt(13) R_q R_p ||C|| / eps)`,
/// or with strong concavity `mu_strong > 0` the smaller of that and
/// `floor(2 sqrt(26) sqrt(R_q R_p) ||C|| / sqrt(mu_strong eps))`.
pub fn fgm_iterations_bound(r_p: f64, r_q: f64, norm_c: f64, mu_strong: f64, eps: f64) -> u64 {
    let plain = (8.0 * 13f64.sqrt() * r_q * r_p * norm_c / eps).floor();
    let bound = if mu_strong > 0.0 {
        let strong = (2.0 * 26f64.sqrt() * (r_q * r_p).sqrt() * norm_c / (mu_strong * eps).sqrt()).floor();
        plain.min(strong)
    } else {
        plain
    };
    bound.max(0.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IncidenceMatrix, Norm};

    fn single(b: f64, a: f64, sigma: f64) -> ProblemInstance {
        let c = IncidenceMatrix::new(1, 1, [(0, 0)]).unwrap();
        ProblemInstance::new(c, vec![b], QuadraticUtility::new(vec![a], sigma).unwrap(), Norm::L2, Norm::L2)
            .unwrap()
    }

    fn cfg(n: usize, mu: f64) -> SmoothingConfig {
        SmoothingConfig {
            mu,
            x0: vec![0.0; n],
            epsilon: 0.1,
            r_p: 1.0,
            r_q: Some(1.0),
        }
    }

    #[test]
    fn first_weights() {
        assert_eq!(weights::alpha(0), 0.5);
        assert_eq!(weights::accumulated(0), 0.5);
        assert!((weights::tau(0) - 2.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn slack_constraints_keep_prices_at_zero() {
        let inst = single(1e9, 1.0, 0.5);
        let oracle = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        let mut s = FgmState::new(vec![0.0], 1, 2.0).unwrap();
        s.step(&oracle).unwrap();
        assert_eq!(s.y, vec![0.0]);
        assert_eq!(s.z, vec![0.0]);
        assert_eq!(s.lambda, vec![0.0]);
    }

    #[test]
    fn three_scripted_steps() {
        // u(x) = 4x - x^2 (sigma n = 2), b = 1, mu = 0, L = 1/2.
        // x(l) = (4 - l)/2 clipped at 0; grad = 1 - x.
        let inst = single(1.0, 4.0, 2.0);
        let oracle = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        let l = 0.5;
        let mut s = FgmState::new(vec![0.0], 1, l).unwrap();

        let (mut lam, mut acc, mut pacc) = (0.0f64, 0.0f64, 0.0f64);
        for t in 0..3u64 {
            let x = ((4.0 - lam) / 2.0f64).max(0.0);
            let g = 1.0 - x;
            let alpha = (t as f64 + 1.0) / 2.0;
            acc += alpha * g;
            pacc += alpha * x;
            let y = (lam - g / l).max(0.0);
            let z = (0.0 - acc / l).max(0.0);
            let tau = 2.0 / (t as f64 + 3.0);
            lam = tau * z + (1.0 - tau) * y;

            let xs = s.step(&oracle).unwrap();
            assert!((xs[0] - x).abs() < 1e-14);
            assert!((s.y[0] - y).abs() < 1e-14);
            assert!((s.z[0] - z).abs() < 1e-14);
            assert!((s.lambda[0] - lam).abs() < 1e-14);
        }
        // by hand: lambda_1 = 4/3, lambda_2 = 11/6, lambda_3 = 59/30
        assert!((s.lambda[0] - 59.0 / 30.0).abs() < 1e-12);
        assert!((s.x_hat()[0] - pacc / 3.0).abs() < 1e-14);
        assert_eq!(s.weight_sum, weights::accumulated(2));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FgmState::new(vec![-1.0], 1, 1.0).is_err());
        assert!(FgmState::new(vec![0.0], 1, 0.0).is_err());
        let inst = single(1.0, 1.0, 0.5);
        assert!(fgm_solve(&inst, &cfg(1, 0.1), &[0.0, 0.0], &FgmOptions::default()).is_err());
    }

    #[test]
    fn nonfinite_prices_are_reported() {
        // overloaded link with a vanishing step denominator
        let inst = single(0.0, 1.0, 0.5);
        let oracle = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        let mut s = FgmState::new(vec![0.0], 1, f64::MIN_POSITIVE / 4.0).unwrap();
        assert!(matches!(s.step(&oracle), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn bound_values() {
        assert_eq!(fgm_iterations_bound(1.0, 1.0, 1.0, 0.0, 1.0), 28);
        assert_eq!(fgm_iterations_bound(1.0, 1.0, 1.0, 1.0, 1.0), 10);
        let mut last = u64::MAX;
        for k in 1..50 {
            let n = fgm_iterations_bound(2.0, 3.0, 1.7, 0.0, k as f64 * 0.1);
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn zero_capacity_chokes_rates() {
        let inst = single(0.0, 2.0, 0.5);
        let opts = FgmOptions {
            stop: StopRule::Iterations(2000),
            ..FgmOptions::default()
        };
        let res = fgm_solve(&inst, &cfg(1, 0.0), &[0.0], &opts).unwrap();
        assert!(res.x_hat[0] < 1e-2, "x_hat = {}", res.x_hat[0]);
        // price must exceed a = 2 to choke the single vertex
        assert!(res.lambda_final[0] >= 2.0 - 1e-6);
    }
}

//! Dual smoothing: per-vertex best responses at given connection prices,
//! the smoothed dual function and its gradient, and Lipschitz constants
//! of that gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{check_len, Norm, ProblemInstance, Utility};

/// Bisection brackets never grow past this rate.
pub const BRACKET_LIMIT: f64 = (1u64 << 60) as f64;
/// Stop width of the bisection bracket.
pub const BISECTION_TOL: f64 = 1e-10;

/// Power-iteration settings used for every spectral Lipschitz estimate.
pub const SPECTRAL_TOL: f64 = 1e-8;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingConfig {
    /// Prox coefficient on `||x - x0||_2^2`.
    pub mu: f64,
    /// Prox center.
    pub x0: Vec<f64>,
    /// Target accuracy.
    pub epsilon: f64,
    /// Bound on `||x* - x0||_p`.
    pub r_p: f64,
    /// Bound on `||lambda*||_q`. `None` resolves to a Slater estimate.
    pub r_q: Option<f64>,
}

impl SmoothingConfig {
    /// Defaults for an instance: `x0 = 0`, `R_p` from the zero-price best
    /// response, `mu = eps / R_p^2`, `R_q` left to the Slater estimate.
    pub fn for_instance<U: Utility>(inst: &ProblemInstance<U>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        let x0 = vec![0.0; inst.n()];
        let r_p = default_primal_radius(inst, &x0)?;
        Ok(Self {
            mu: epsilon / (r_p * r_p),
            x0,
            epsilon,
            r_p,
            r_q: None,
        })
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_r_p(mut self, r_p: f64) -> Self {
        self.r_p = r_p;
        self
    }

    pub fn with_r_q(mut self, r_q: f64) -> Self {
        self.r_q = Some(r_q);
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        check_len("prox center", self.x0.len(), n)?;
        if let Some(i) = self.x0.iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeComponent {
                what: "prox center",
                index: i,
                value: self.x0[i],
            });
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidInput(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// `||x(0) - x0||_2` with `x(0)` the unsmoothed best response at zero
/// prices. Falls back to 1 when that response is the origin itself.
pub fn default_primal_radius<U: Utility>(inst: &ProblemInstance<U>, x0: &[f64]) -> Result<f64> {
    let mut sq = 0.0;
    for i in 0..inst.n() {
        let xi = response(&inst.utility, i, 0.0, 0.0, 0.0, ResponseMode::ClosedForm)?;
        sq += (xi - x0[i]).powi(2);
    }
    let r = sq.sqrt();
    Ok(if r > 0.0 { r } else { 1.0 })
}

/// How single-vertex best responses are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseMode {
    /// Use the utility's closed form when it offers one.
    #[default]
    ClosedForm,
    /// Always bisect on the derivative of the inner objective.
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LipschitzMethod {
    /// `nnz(C) / mu`.
    Nnz,
    /// `lambda_max(C^T C) / mu`.
    #[default]
    Spectral,
    /// `||C||_{p,q}^2 / mu`; only available for `p = q = 2`.
    OperatorNorm,
}

fn response<U: Utility>(
    utility: &U,
    i: usize,
    cost: f64,
    mu: f64,
    center: f64,
    mode: ResponseMode,
) -> Result<f64> {
    if mode == ResponseMode::ClosedForm {
        if let Some(x) = utility.best_response(i, cost, mu, center) {
            if x.is_infinite() {
                return Err(Error::Unbounded { vertex: i });
            }
            return Ok(x);
        }
    }
    bisect_response(utility, i, cost, mu, center)
}

/// Maximizes `u_i(x) - cost x - (mu/2)(x - center)^2` over `x >= 0` by
/// bisection on its (strictly decreasing) derivative.
fn bisect_response<U: Utility>(utility: &U, i: usize, cost: f64, mu: f64, center: f64) -> Result<f64> {
    let slope = |x: f64| utility.derivative(i, x) - cost - mu * (x - center);
    if slope(0.0) <= 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while slope(hi) >= 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::BracketFailed {
                vertex: i,
                limit: BRACKET_LIMIT,
            });
        }
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Best response, smoothed dual value and gradient at one price vector.
#[derive(Debug, Clone)]
pub struct DualPoint {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Evaluates `phi_mu(lambda) = max_x { U(x) + <lambda, b - Cx> - (mu/2)||x - x0||^2 }`
/// and counts single-vertex best-response evaluations.
#[derive(Debug)]
pub struct SmoothedDualOracle<'a, U = crate::model::QuadraticUtility> {
    inst: &'a ProblemInstance<U>,
    cfg: SmoothingConfig,
    mode: ResponseMode,
    calls: AtomicU64,
}

impl<'a, U: Utility> SmoothedDualOracle<'a, U> {
    pub fn new(inst: &'a ProblemInstance<U>, cfg: SmoothingConfig) -> Result<Self> {
        cfg.validate(inst.n())?;
        Ok(Self {
            inst,
            cfg,
            mode: ResponseMode::ClosedForm,
            calls: AtomicU64::new(0),
        })
    }

    pub fn with_mode(mut self, mode: ResponseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn instance(&self) -> &'a ProblemInstance<U> {
        self.inst
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.cfg
    }

    pub fn mu(&self) -> f64 {
        self.cfg.mu
    }

    /// Cumulative single-vertex best-response evaluations.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// `x_i(lambda)`.
    pub fn best_response(&self, lambda: &[f64], i: usize) -> Result<f64> {
        check_len("price vector", lambda.len(), self.inst.m())?;
        if i >= self.inst.n() {
            return Err(Error::InvalidInput(format!("vertex {i} out of range")));
        }
        for &j in self.inst.c.col(i) {
            if lambda[j] < 0.0 {
                return Err(Error::NegativeComponent {
                    what: "price",
                    index: j,
                    value: lambda[j],
                });
            }
        }
        self.response_unchecked(i, self.inst.c.col_dot(i, lambda))
    }

    /// Best response of vertex `i` facing total price `cost`.
    pub(crate) fn response_unchecked(&self, i: usize, cost: f64) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        response(
            &self.inst.utility,
            i,
            cost,
            self.cfg.mu,
            self.cfg.x0[i],
            self.mode,
        )
    }

    /// `x(lambda)`, one best response per vertex.
    pub fn primal_from_prices(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        check_prices(lambda, self.inst.m())?;
        (0..self.inst.n())
            .map(|i| self.response_unchecked(i, self.inst.c.col_dot(i, lambda)))
            .collect()
    }

    /// `U_mu(x) = U(x) - (mu/2)||x - x0||_2^2`.
    pub fn smoothed_utility(&self, x: &[f64]) -> Result<f64> {
        let u = self.inst.utility_total(x)?;
        Ok(u - 0.5 * self.cfg.mu * dist_sq(x, &self.cfg.x0))
    }

    pub fn evaluate(&self, lambda: &[f64]) -> Result<DualPoint> {
        let x = self.primal_from_prices(lambda)?;
        let load = self.inst.c.mat_vec(&x)?;
        let gradient: Vec<f64> = self.inst.b.iter().zip(&load).map(|(b, l)| b - l).collect();
        let value = self.smoothed_utility(&x)?
            + lambda.iter().zip(&gradient).map(|(l, g)| l * g).sum::<f64>();
        Ok(DualPoint { x, value, gradient })
    }

    pub fn dual_value(&self, lambda: &[f64]) -> Result<f64> {
        Ok(self.evaluate(lambda)?.value)
    }

    /// `grad phi_mu(lambda) = b - C x(lambda)`.
    pub fn dual_gradient(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(lambda)?.gradient)
    }

    pub fn lipschitz_bound(&self, method: LipschitzMethod) -> Result<f64> {
        lipschitz_for_modulus(self.inst, method, self.cfg.mu)
    }

    /// Slater estimate of `||lambda*||`: `(phi_mu(0) - U_mu(0)) / min_j b_j`
    /// over connections that relate to at least one vertex.
    pub fn slater_radius(&self) -> Result<f64> {
        let slack = (0..self.inst.m())
            .filter(|&j| !self.inst.c.row(j).is_empty())
            .map(|j| self.inst.b[j])
            .fold(f64::INFINITY, f64::min);
        if slack.is_infinite() {
            // No constraint binds any vertex; optimal prices are zero.
            return Ok(0.0);
        }
        if slack <= 0.0 {
            return Err(Error::InvalidInput(
                "origin is not strictly feasible; supply R_q explicitly".into(),
            ));
        }
        let phi0 = self.dual_value(&vec![0.0; self.inst.m()])?;
        let origin = self.smoothed_utility(&vec![0.0; self.inst.n()])?;
        Ok(((phi0 - origin) / slack).max(0.0))
    }

    /// `R_q` from the config, or the Slater estimate.
    pub fn dual_radius(&self) -> Result<f64> {
        match self.cfg.r_q {
            Some(r) => Ok(r),
            None => self.slater_radius(),
        }
    }
}

/// Lipschitz constant of the dual gradient when the inner problem is
/// `modulus`-strongly concave.
pub fn lipschitz_for_modulus<U: Utility>(
    inst: &ProblemInstance<U>,
    method: LipschitzMethod,
    modulus: f64,
) -> Result<f64> {
    if modulus <= 0.0 {
        return Err(Error::ZeroSmoothing);
    }
    let numerator = match method {
        LipschitzMethod::Nnz => inst.c.nnz() as f64,
        LipschitzMethod::Spectral | LipschitzMethod::OperatorNorm => {
            if inst.p != Norm::L2 || inst.q != Norm::L2 {
                return Err(Error::UnsupportedNorm(match method {
                    LipschitzMethod::Spectral => "spectral Lipschitz bound",
                    _ => "operator-norm Lipschitz bound",
                }));
            }
            inst.c.spectral_norm_sq(SPECTRAL_TOL, SPECTRAL_MAX_ITER)?
        }
    };
    Ok(numerator / modulus)
}

pub(crate) fn check_prices(lambda: &[f64], m: usize) -> Result<()> {
    check_len("price vector", lambda.len(), m)?;
    if let Some(j) = lambda.iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeComponent {
            what: "price",
            index: j,
            value: lambda[j],
        });
    }
    Ok(())
}

pub(crate) fn dist_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IncidenceMatrix, QuadraticUtility};

    fn quad(m: usize, n: usize, e: &[(usize, usize)], b: Vec<f64>, a: Vec<f64>, sigma: f64) -> ProblemInstance {
        let c = IncidenceMatrix::new(m, n, e.iter().copied()).unwrap();
        ProblemInstance::new(c, b, QuadraticUtility::new(a, sigma).unwrap(), Norm::L2, Norm::L2)
            .unwrap()
    }

    fn cfg(n: usize, mu: f64) -> SmoothingConfig {
        SmoothingConfig {
            mu,
            x0: vec![0.0; n],
            epsilon: 1.0,
            r_p: 1.0,
            r_q: None,
        }
    }

    #[test]
    fn zero_price_closed_form() {
        let n = 100;
        let mut a = vec![1.0; n];
        a[7] = 5.0;
        let inst = quad(1, n, &[(0, 0)], vec![1.0], a, 0.001);
        let o = SmoothedDualOracle::new(&inst, cfg(n, 0.0)).unwrap();
        let x = o.best_response(&[0.0], 7).unwrap();
        assert!((x - 50.0).abs() < 1e-12);
        assert_eq!(o.calls(), 1);
    }

    #[test]
    fn clamps_when_cost_exceeds_gain() {
        let inst = quad(2, 1, &[(0, 0), (1, 0)], vec![1.0, 1.0], vec![3.0], 0.5);
        let o = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        assert_eq!(o.best_response(&[2.0, 1.0], 0).unwrap(), 0.0);
        assert_eq!(o.best_response(&[2.0, 5.0], 0).unwrap(), 0.0);
        assert!(o.best_response(&[-1.0, 0.0], 0).is_err());
    }

    #[test]
    fn primal_all_clamped_and_counts() {
        let inst = quad(1, 3, &[(0, 0), (0, 1), (0, 2)], vec![1.0], vec![1.0, 2.0, 3.0], 0.1);
        let o = SmoothedDualOracle::new(&inst, cfg(3, 0.2)).unwrap();
        assert_eq!(o.primal_from_prices(&[3.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(o.calls(), 3);
        let x = o.primal_from_prices(&[0.0]).unwrap();
        for (i, xi) in x.iter().enumerate() {
            assert!((xi - (i as f64 + 1.0) / (0.3 + 0.2)).abs() < 1e-12);
        }
        assert_eq!(o.calls(), 6);
    }

    #[test]
    fn hand_dual_value_single_link() {
        // u(x) = 4x - x^2 (a = 4, sigma n = 2), b = 1, mu = 1, x0 = 0, lambda = 1:
        // x = (4 - 1)/3 = 1, phi = 4 - 1 + 1*(1 - 1) - 0.5 = 2.5
        let inst = quad(1, 1, &[(0, 0)], vec![1.0], vec![4.0], 2.0);
        let o = SmoothedDualOracle::new(&inst, cfg(1, 1.0)).unwrap();
        let p = o.evaluate(&[1.0]).unwrap();
        assert!((p.x[0] - 1.0).abs() < 1e-15);
        assert!((p.value - 2.5).abs() < 1e-14);
        assert!(p.gradient[0].abs() < 1e-15);
    }

    #[test]
    fn zero_price_dual_is_unconstrained_max() {
        let inst = quad(1, 2, &[(0, 0), (0, 1)], vec![1.0], vec![2.0, 3.0], 0.5);
        let o = SmoothedDualOracle::new(&inst, cfg(2, 0.0)).unwrap();
        // u_i(x) = a x - x^2/2, max a^2/2
        assert!((o.dual_value(&[0.0]).unwrap() - 6.5).abs() < 1e-12);
    }

    #[test]
    fn slack_gradient_positive() {
        let inst = quad(2, 2, &[(0, 0), (1, 1)], vec![100.0, 0.5], vec![1.0, 1.0], 0.5);
        let o = SmoothedDualOracle::new(&inst, cfg(2, 0.1)).unwrap();
        let g = o.dual_gradient(&[0.0, 0.0]).unwrap();
        assert!(g[0] > 0.0);
        assert!(g[1] < 0.0);
    }

    #[test]
    fn lipschitz_constants() {
        let inst = quad(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)], vec![1.0; 2], vec![1.0; 2], 0.0);
        let o = SmoothedDualOracle::new(&inst, cfg(2, 0.5)).unwrap();
        assert_eq!(o.lipschitz_bound(LipschitzMethod::Nnz).unwrap(), 8.0);
        assert!(o.lipschitz_bound(LipschitzMethod::Spectral).unwrap() <= 8.0 * (1.0 + 1e-8));

        let pair = quad(1, 2, &[(0, 0), (0, 1)], vec![1.0], vec![1.0; 2], 0.0);
        let o = SmoothedDualOracle::new(&pair, cfg(2, 1.0)).unwrap();
        assert!((o.lipschitz_bound(LipschitzMethod::Spectral).unwrap() - 2.0).abs() < 1e-8);
        assert_eq!(
            o.lipschitz_bound(LipschitzMethod::OperatorNorm).unwrap(),
            o.lipschitz_bound(LipschitzMethod::Spectral).unwrap()
        );

        let o = SmoothedDualOracle::new(&pair, cfg(2, 0.0)).unwrap();
        assert!(matches!(o.lipschitz_bound(LipschitzMethod::Nnz), Err(Error::ZeroSmoothing)));
    }

    #[test]
    fn spectral_needs_euclidean_norms() {
        let mut inst = quad(1, 1, &[(0, 0)], vec![1.0], vec![1.0], 0.0);
        inst.p = Norm::L1;
        let o = SmoothedDualOracle::new(&inst, cfg(1, 1.0)).unwrap();
        assert!(matches!(
            o.lipschitz_bound(LipschitzMethod::Spectral),
            Err(Error::UnsupportedNorm(_))
        ));
        assert_eq!(o.lipschitz_bound(LipschitzMethod::Nnz).unwrap(), 1.0);
    }

    #[test]
    fn unbounded_linear_response() {
        let inst = quad(1, 1, &[(0, 0)], vec![1.0], vec![1.0], 0.0);
        let o = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        assert!(matches!(o.best_response(&[0.5], 0), Err(Error::Unbounded { vertex: 0 })));
        let o = o.with_mode(ResponseMode::Bisection);
        assert!(matches!(o.best_response(&[0.5], 0), Err(Error::BracketFailed { .. })));
        assert_eq!(o.best_response(&[2.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn slater_radius_requires_slack() {
        let inst = quad(2, 1, &[(0, 0)], vec![0.0, 0.0], vec![1.0], 0.5);
        let o = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        assert!(o.slater_radius().is_err());
        let inst = quad(1, 1, &[(0, 0)], vec![0.5], vec![1.0], 0.5);
        let o = SmoothedDualOracle::new(&inst, cfg(1, 0.0)).unwrap();
        // phi(0) = a^2 / (2 sigma n) = 1, U(0) = 0
        assert!((o.slater_radius().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_config_scales() {
        let inst = quad(1, 2, &[(0, 0)], vec![1.0], vec![3.0, 4.0], 0.5);
        let cfg = SmoothingConfig::for_instance(&inst, 0.5).unwrap();
        // x(0) = a / (sigma n) = (3, 4), R_p = 5
        assert!((cfg.r_p - 5.0).abs() < 1e-12);
        assert!((cfg.mu - 0.02).abs() < 1e-15);
        assert!(SmoothingConfig::for_instance(&inst, 0.0).is_err());
    }
}

//! Randomized switching mirror descent. A step is productive when every
//! constraint holds within `eps` and then moves one random vertex along
//! its utility gradient; otherwise it lowers the rate of one random vertex
//! on the most violated connection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{check_len, ProblemInstance, QuadraticUtility, Utility};
use crate::oracle::{SmoothedDualOracle, SmoothingConfig};
use crate::rng::{seeded_rng, MD_STREAM};
use crate::trace::{fingerprint, SolverTrace, StepType, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Productive { vertex: usize },
    Nonproductive { row: usize, vertex: usize },
}

impl Branch {
    pub fn vertex(self) -> usize {
        match self {
            Branch::Productive { vertex } | Branch::Nonproductive { vertex, .. } => vertex,
        }
    }

    pub fn step_type(self) -> StepType {
        match self {
            Branch::Productive { .. } => StepType::Productive,
            Branch::Nonproductive { .. } => StepType::Nonproductive,
        }
    }
}

/// Most violated connection when some residual exceeds `eps`; ties go to
/// the lowest index.
pub(crate) fn most_violated(residual: &[f64], eps: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &r) in residual.iter().enumerate() {
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((j, r));
        }
    }
    best.filter(|&(_, r)| r > eps).map(|(j, _)| j)
}

#[inline]
pub(crate) fn productive_update(x: f64, grad: f64, step: f64, literal_sign: bool) -> f64 {
    if literal_sign {
        (x - step * grad).max(0.0)
    } else {
        (x + step * grad).max(0.0)
    }
}

#[inline]
pub(crate) fn nonproductive_update(x: f64, step: f64) -> f64 {
    (x - step).max(0.0)
}

/// Running sum of productive iterates. Components are folded in lazily,
/// only when they change, so a step costs O(1).
#[derive(Debug, Clone)]
pub(crate) struct LazyAverage {
    sum: Vec<f64>,
    synced_at: Vec<u64>,
}

impl LazyAverage {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            synced_at: vec![0; n],
        }
    }

    /// Credits `x_i` for every productive step since its last change.
    #[inline]
    pub(crate) fn flush(&mut self, i: usize, x_i: f64, count: u64) {
        self.sum[i] += x_i * (count - self.synced_at[i]) as f64;
        self.synced_at[i] = count;
    }

    #[inline]
    pub(crate) fn component(&self, i: usize, x_i: f64, count: u64) -> f64 {
        self.sum[i] + x_i * (count - self.synced_at[i]) as f64
    }

    pub(crate) fn mean(&self, x: &[f64], count: u64) -> Option<Vec<f64>> {
        (count > 0).then(|| {
            (0..x.len())
                .map(|i| self.component(i, x[i], count) / count as f64)
                .collect()
        })
    }
}

#[derive(Debug, Clone)]
pub struct MdState {
    /// Completed steps.
    pub t: u64,
    pub x: Vec<f64>,
    /// `C x - b`, updated only on rows touched by each step.
    pub residual: Vec<f64>,
    pub productive_count: u64,
    pub jt_histogram: Vec<u64>,
    pub eps: f64,
    pub m_u: f64,
    pub step_productive: f64,
    pub step_nonproductive: f64,
    pub literal_sign: bool,
    /// Set when a productive step saw `|u_i'| > M_U`.
    pub gradient_bound_exceeded: bool,
    /// Component gradient or component update evaluations.
    pub oracle_calls: u64,
    /// Residual entries refreshed incrementally.
    pub residual_updates: u64,
    average: LazyAverage,
    rng: ChaCha8Rng,
}

impl MdState {
    pub fn new<U: Utility>(
        inst: &ProblemInstance<U>,
        eps: f64,
        m_u: f64,
        x0: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
        }
        if !(m_u > 0.0 && m_u.is_finite()) {
            return Err(Error::InvalidInput(format!("M_U must be positive, got {m_u}")));
        }
        check_len("initial rates", x0.len(), inst.n())?;
        if let Some(i) = x0.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::NegativeComponent {
                what: "initial rate",
                index: i,
                value: x0[i],
            });
        }
        let n = inst.n() as f64;
        let maxnorm = inst.c.max_row_dual_norm(inst.p);
        Ok(Self {
            t: 0,
            residual: inst.residual(&x0)?,
            average: LazyAverage::new(x0.len()),
            x: x0,
            productive_count: 0,
            jt_histogram: vec![0; inst.m()],
            eps,
            m_u,
            step_productive: eps * n / (m_u * m_u),
            step_nonproductive: eps * n / (maxnorm * maxnorm),
            literal_sign: false,
            gradient_bound_exceeded: false,
            oracle_calls: 0,
            residual_updates: 0,
            rng: seeded_rng(seed, MD_STREAM),
        })
    }

    pub fn nonproductive_count(&self) -> u64 {
        self.jt_histogram.iter().sum()
    }

    /// Average of the productive iterates so far.
    pub fn x_hat(&self) -> Option<Vec<f64>> {
        self.average.mean(&self.x, self.productive_count)
    }

    pub fn step<U: Utility>(&mut self, inst: &ProblemInstance<U>) -> Result<Branch> {
        let branch = match most_violated(&self.residual, self.eps) {
            None => {
                let i = self.rng.gen_range(0..inst.n());
                let grad = inst.utility.derivative(i, self.x[i]);
                if grad.abs() > self.m_u {
                    self.gradient_bound_exceeded = true;
                }
                self.productive_count += 1;
                let next =
                    productive_update(self.x[i], grad, self.step_productive, self.literal_sign);
                self.set_component(inst, i, next);
                Branch::Productive { vertex: i }
            }
            Some(j) => {
                let row = inst.c.row(j);
                if row.is_empty() {
                    return Err(Error::EmptyRow(j));
                }
                let i = row[self.rng.gen_range(0..row.len())];
                self.jt_histogram[j] += 1;
                let next = nonproductive_update(self.x[i], self.step_nonproductive);
                self.set_component(inst, i, next);
                Branch::Nonproductive { row: j, vertex: i }
            }
        };
        self.oracle_calls += 1;
        self.t += 1;
        Ok(branch)
    }

    fn set_component<U: Utility>(&mut self, inst: &ProblemInstance<U>, i: usize, next: f64) {
        let old = self.x[i];
        self.average.flush(i, old, self.productive_count);
        self.x[i] = next;
        let delta = next - old;
        for &j in inst.c.col(i) {
            self.residual[j] += delta;
        }
        self.residual_updates += inst.c.col(i).len() as u64;
    }

    /// Trace row after the latest step: metrics of the productive average,
    /// or of the current iterate while no productive step has happened.
    pub(crate) fn row<U: Utility>(&self, inst: &ProblemInstance<U>, branch: Branch) -> Result<TraceRow> {
        md_row(inst, self.t, self.oracle_calls, &self.x, self.x_hat(), branch)
    }
}

pub(crate) fn md_row<U: Utility>(
    inst: &ProblemInstance<U>,
    t: u64,
    oracle_calls: u64,
    x: &[f64],
    x_hat: Option<Vec<f64>>,
    branch: Branch,
) -> Result<TraceRow> {
    let point = x_hat.as_deref().unwrap_or(x);
    Ok(TraceRow {
        iter: t,
        oracle_calls,
        utility: inst.utility_total(point)?,
        violation: inst.max_violation(point)?,
        gap: None,
        step_type: branch.step_type(),
    })
}

#[derive(Debug, Clone)]
pub struct MdOptions {
    /// Subtract the utility gradient on productive steps instead of adding it.
    pub literal_sign: bool,
    pub trace_stride: u64,
}

impl Default for MdOptions {
    fn default() -> Self {
        Self {
            literal_sign: false,
            trace_stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdParams {
    pub eps: f64,
    pub m_u: f64,
    pub x0: Vec<f64>,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MdResult {
    /// Average of productive iterates; `None` if every step was non-productive.
    pub x_hat: Option<Vec<f64>>,
    pub lambda_hat: Option<Vec<f64>>,
    pub x_final: Vec<f64>,
    pub trace: SolverTrace,
    pub productive_count: u64,
    pub nonproductive_count: u64,
    pub productive_fraction: f64,
    pub gradient_bound_exceeded: bool,
    /// `phi(lambda_hat) - U(x_hat)` with the unsmoothed dual, when defined.
    pub dual_gap: Option<f64>,
    pub residual_updates: u64,
    pub jt_histogram: Vec<u64>,
}

impl MdResult {
    pub fn all_nonproductive(&self) -> bool {
        self.productive_count == 0
    }
}

/// Default gradient bound for quadratic utilities: `max_i |a_i|`, valid on
/// the box `0 <= x_i <= a_i / (sigma n)`.
pub fn default_gradient_bound(utility: &QuadraticUtility) -> f64 {
    utility.a.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
}

pub fn md_solve(inst: &ProblemInstance<QuadraticUtility>, params: &MdParams, opts: &MdOptions) -> Result<MdResult> {
    let mut trace = md_trace_header(inst, params, opts);
    let state = run_md(inst, params, opts, |row| trace.push(row))?;
    finish(inst, state.outcome(), trace)
}

pub(crate) fn md_trace_header(
    inst: &ProblemInstance<QuadraticUtility>,
    params: &MdParams,
    opts: &MdOptions,
) -> SolverTrace {
    let mut trace = SolverTrace::new(fingerprint(inst));
    trace.param("solver", "md");
    trace.param("epsilon", params.eps);
    trace.param("m_u", params.m_u);
    trace.param("steps", params.steps);
    trace.param("seed", params.seed);
    trace.param("literal_sign", opts.literal_sign);
    trace.param("trace_stride", opts.trace_stride);
    trace
}

/// Step loop shared by all callers; `on_row` sees every trace row.
pub fn run_md<U: Utility>(
    inst: &ProblemInstance<U>,
    params: &MdParams,
    opts: &MdOptions,
    mut on_row: impl FnMut(TraceRow),
) -> Result<MdState> {
    if params.steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let mut state = MdState::new(inst, params.eps, params.m_u, params.x0.clone(), params.seed)?;
    state.literal_sign = opts.literal_sign;
    let stride = opts.trace_stride.max(1);
    while state.t < params.steps {
        let branch = state.step(inst)?;
        if state.t % stride == 0 || state.t == params.steps {
            on_row(state.row(inst, branch)?);
        }
    }
    Ok(state)
}

/// Final state of a run, however it was executed.
pub(crate) struct MdOutcome {
    pub x_hat: Option<Vec<f64>>,
    pub x_final: Vec<f64>,
    pub steps: u64,
    pub productive_count: u64,
    pub jt_histogram: Vec<u64>,
    pub m_u: f64,
    pub gradient_bound_exceeded: bool,
    pub residual_updates: u64,
}

impl MdState {
    pub(crate) fn outcome(self) -> MdOutcome {
        MdOutcome {
            x_hat: self.x_hat(),
            steps: self.t,
            productive_count: self.productive_count,
            m_u: self.m_u,
            gradient_bound_exceeded: self.gradient_bound_exceeded,
            residual_updates: self.residual_updates,
            jt_histogram: self.jt_histogram,
            x_final: self.x,
        }
    }
}

pub(crate) fn finish(inst: &ProblemInstance<QuadraticUtility>, out: MdOutcome, trace: SolverTrace) -> Result<MdResult> {
    let maxnorm = inst.c.max_row_dual_norm(inst.p);
    let lambda_hat = if out.productive_count > 0 {
        Some(reconstruct_dual(
            &out.jt_histogram,
            out.productive_count,
            out.m_u,
            maxnorm,
        )?)
    } else {
        None
    };
    let dual_gap = match (&out.x_hat, &lambda_hat) {
        (Some(x), Some(l)) => unsmoothed_gap(inst, l, x),
        _ => None,
    };
    Ok(MdResult {
        productive_fraction: out.productive_count as f64 / out.steps as f64,
        nonproductive_count: out.jt_histogram.iter().sum(),
        x_hat: out.x_hat,
        lambda_hat,
        trace,
        productive_count: out.productive_count,
        gradient_bound_exceeded: out.gradient_bound_exceeded,
        dual_gap,
        residual_updates: out.residual_updates,
        jt_histogram: out.jt_histogram,
        x_final: out.x_final,
    })
}

fn unsmoothed_gap(inst: &ProblemInstance<QuadraticUtility>, lambda: &[f64], x: &[f64]) -> Option<f64> {
    let cfg = SmoothingConfig {
        mu: 0.0,
        x0: vec![0.0; inst.n()],
        epsilon: 1.0,
        r_p: 1.0,
        r_q: None,
    };
    let oracle = SmoothedDualOracle::new(inst, cfg).ok()?;
    Some(oracle.dual_value(lambda).ok()? - inst.utility_total(x).ok()?)
}

/// `ceil(72 max(M_U, maxnorm)^2 n^2 R_p^2 / eps^2)`, saturating.
pub fn md_iterations_bound(m_u: f64, maxnorm: f64, n: usize, r_p: f64, eps: f64) -> u64 {
    let g = m_u.max(maxnorm);
    let v = (72.0 * g * g * (n as f64).powi(2) * r_p * r_p / (eps * eps)).ceil();
    if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v.max(0.0) as u64
    }
}

/// Prices from the histogram of most-violated connections:
/// `lambda_j = M_U^2 / (|I| maxnorm^2) * #{t in J : j_t = j}`.
pub fn reconstruct_dual(histogram: &[u64], productive_count: u64, m_u: f64, maxnorm: f64) -> Result<Vec<f64>> {
    if productive_count == 0 {
        return Err(Error::NoProductiveSteps);
    }
    let scale = m_u * m_u / (productive_count as f64 * maxnorm * maxnorm);
    Ok(histogram
        .iter()
        .map(|&h| if h == 0 { 0.0 } else { scale * h as f64 })
        .collect())
}

/// Single-vertex estimate `e_i n u_i'(x_i)` of `grad U(x)`; returns the
/// one nonzero component.
pub fn randomized_gradient<U: Utility>(inst: &ProblemInstance<U>, x: &[f64], i: usize) -> (usize, f64) {
    (i, inst.n() as f64 * inst.utility.derivative(i, x[i]))
}

pub fn utility_gradient<U: Utility>(inst: &ProblemInstance<U>, x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| inst.utility.derivative(i, xi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IncidenceMatrix, Norm};

    fn quad(m: usize, n: usize, e: &[(usize, usize)], b: Vec<f64>, a: Vec<f64>, sigma: f64) -> ProblemInstance {
        let c = IncidenceMatrix::new(m, n, e.iter().copied()).unwrap();
        ProblemInstance::new(c, b, QuadraticUtility::new(a, sigma).unwrap(), Norm::L2, Norm::L2)
            .unwrap()
    }

    #[test]
    fn interior_point_takes_productive_step() {
        let inst = quad(1, 3, &[(0, 0), (0, 1), (0, 2)], vec![100.0], vec![1.0, 2.0, 3.0], 0.1);
        let x0 = vec![1.0, 1.0, 1.0];
        let mut s = MdState::new(&inst, 0.1, 3.0, x0.clone(), 7).unwrap();
        let b = s.step(&inst).unwrap();
        assert!(matches!(b, Branch::Productive { .. }));
        let changed = s.x.iter().zip(&x0).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn origin_is_productive() {
        let inst = quad(2, 2, &[(0, 0), (1, 1)], vec![0.0, 0.0], vec![1.0, 1.0], 0.5);
        let mut s = MdState::new(&inst, 0.01, 1.0, vec![0.0; 2], 1).unwrap();
        assert!(matches!(s.step(&inst).unwrap(), Branch::Productive { .. }));
    }

    #[test]
    fn single_path_correction() {
        // one violated connection with one vertex: x <- max(0, x - eps n / 1)
        let inst = quad(1, 2, &[(0, 1)], vec![1.0], vec![1.0, 1.0], 0.5);
        let eps = 0.25;
        let mut s = MdState::new(&inst, eps, 1.0, vec![0.0, 3.0], 3).unwrap();
        let b = s.step(&inst).unwrap();
        assert_eq!(b, Branch::Nonproductive { row: 0, vertex: 1 });
        assert_eq!(s.x[1], (3.0f64 - eps * 2.0 / 1.0).max(0.0));
        assert_eq!(s.jt_histogram, vec![1]);
        assert_eq!(s.residual, inst.residual(&s.x).unwrap());
    }

    #[test]
    fn ties_pick_lowest_row() {
        assert_eq!(most_violated(&[1.0, 2.0, 2.0], 0.5), Some(1));
        assert_eq!(most_violated(&[0.1, 0.2], 0.5), None);
        assert_eq!(most_violated(&[], 0.5), None);
    }

    #[test]
    fn violated_empty_row_is_an_error() {
        let inst = quad(1, 1, &[], vec![0.0], vec![1.0], 0.5);
        let mut s = MdState::new(&inst, 0.1, 1.0, vec![0.0], 0).unwrap();
        // force an impossible residual
        s.residual[0] = 1.0;
        assert!(matches!(s.step(&inst), Err(Error::EmptyRow(0))));
    }

    #[test]
    fn singleton_average() {
        let inst = quad(1, 2, &[(0, 0), (0, 1)], vec![10.0], vec![1.0, 1.0], 0.5);
        let p = MdParams {
            eps: 0.1,
            m_u: 1.0,
            x0: vec![0.5, 0.25],
            steps: 1,
            seed: 9,
        };
        let r = md_solve(&inst, &p, &MdOptions::default()).unwrap();
        assert_eq!(r.x_hat.unwrap(), vec![0.5, 0.25]);
        assert_eq!(r.productive_count, 1);
    }

    #[test]
    fn lazy_average_matches_direct_sum() {
        let inst = quad(2, 3, &[(0, 0), (0, 1), (1, 1), (1, 2)], vec![1.0, 0.5], vec![3.0, 2.0, 1.0], 0.2);
        let mut s = MdState::new(&inst, 0.05, 3.0, vec![2.0, 0.0, 1.0], 11).unwrap();
        let mut sum = vec![0.0; 3];
        for _ in 0..500 {
            let before = s.x.clone();
            if let Branch::Productive { .. } = s.step(&inst).unwrap() {
                for (acc, v) in sum.iter_mut().zip(&before) {
                    *acc += v;
                }
            }
        }
        let xh = s.x_hat().unwrap();
        for i in 0..3 {
            let direct = sum[i] / s.productive_count as f64;
            assert!((xh[i] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn all_nonproductive_run_has_no_average() {
        let inst = quad(1, 1, &[(0, 0)], vec![0.0], vec![1.0], 0.5);
        let p = MdParams {
            eps: 0.001,
            m_u: 1.0,
            x0: vec![100.0],
            steps: 5,
            seed: 0,
        };
        let r = md_solve(&inst, &p, &MdOptions::default()).unwrap();
        assert!(r.all_nonproductive());
        assert!(r.x_hat.is_none() && r.lambda_hat.is_none());
        assert_eq!(r.nonproductive_count, 5);
    }

    #[test]
    fn bound_formula() {
        assert_eq!(md_iterations_bound(1.0, 1.0, 1, 1.0, 1.0), 72);
        assert_eq!(md_iterations_bound(3.0, 1.0, 2, 0.5, 1.5), 288);
        let n1 = md_iterations_bound(2.0, 1.0, 5, 3.0, 0.1);
        let n2 = md_iterations_bound(2.0, 1.0, 5, 3.0, 0.2);
        assert!((n1 as f64 / n2 as f64 - 4.0).abs() < 1e-3);
        assert_eq!(md_iterations_bound(1e200, 1.0, 10, 1.0, 1e-10), u64::MAX);
    }

    #[test]
    fn reconstruction() {
        assert_eq!(reconstruct_dual(&[0, 0], 3, 2.0, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(reconstruct_dual(&[3, 0], 2, 1.0, 1.0).unwrap(), vec![1.5, 0.0]);
        let base = reconstruct_dual(&[2, 5], 4, 1.5, 2.0).unwrap();
        let scaled = reconstruct_dual(&[2, 5], 4, 3.0, 2.0).unwrap();
        for (b, s) in base.iter().zip(&scaled) {
            assert!((s - 4.0 * b).abs() < 1e-12);
        }
        assert!(matches!(reconstruct_dual(&[1], 0, 1.0, 1.0), Err(Error::NoProductiveSteps)));
    }

    #[test]
    fn gradient_estimate_at_origin() {
        let inst = quad(1, 4, &[(0, 0)], vec![1.0], vec![1.0, 2.0, 3.0, 4.0], 0.5);
        assert_eq!(randomized_gradient(&inst, &[0.0; 4], 2), (2, 12.0));
    }

    #[test]
    fn literal_sign_moves_away_from_optimum() {
        let inst = quad(1, 1, &[(0, 0)], vec![100.0], vec![1.0], 1.0);
        let p = MdParams {
            eps: 0.1,
            m_u: 1.0,
            x0: vec![0.5],
            steps: 1,
            seed: 0,
        };
        let up = md_solve(&inst, &p, &MdOptions::default()).unwrap();
        let down = md_solve(&inst, &p, &MdOptions { literal_sign: true, ..MdOptions::default() }).unwrap();
        assert!(up.x_final[0] > 0.5);
        assert!(down.x_final[0] < 0.5);
    }
}

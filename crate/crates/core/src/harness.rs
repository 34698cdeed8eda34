//! Synthetic instances, the brute-force reference solver and experiment
//! orchestration with CSV/JSON export.

use rand::Rng;
use serde::Serialize;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fgm::{fgm_solve, FgmOptions, FgmResult, StopRule};
use crate::mirror::{default_gradient_bound, md_solve, MdOptions, MdParams, MdResult};
use crate::model::{IncidenceMatrix, Norm, ProblemInstance, QuadraticUtility, Utility};
use crate::oracle::{SmoothedDualOracle, SmoothingConfig};
use crate::rng::{seeded_rng, GENERATOR_STREAM};
use crate::simnet::{run_fgm_protocol, run_md_protocol, FgmProtocolOptions, MdProtocolOptions, SimStats};
use crate::trace::{fingerprint, SolverTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub m: usize,
    pub n: usize,
    /// Probability that any single `(j, i)` cell is set.
    pub density: f64,
    pub seed: u64,
    pub a_low: f64,
    pub a_high: f64,
    /// Capacities are drawn from `U[0, b_scale]`.
    pub b_scale: f64,
    pub sigma: f64,
    /// Add one random entry to every empty row and column.
    pub ensure_nonempty: bool,
}

impl GeneratorConfig {
    pub fn new(m: usize, n: usize, density: f64, seed: u64) -> Self {
        Self {
            m,
            n,
            density,
            seed,
            a_low: 1.0,
            a_high: 50.0,
            b_scale: n as f64,
            sigma: 0.001,
            ensure_nonempty: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidInput("m and n must be at least 1".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        if !(self.a_low <= self.a_high) || !(self.b_scale >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidInput("invalid coefficient ranges".into()));
        }
        Ok(())
    }
}

/// Named experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 40 connections, 100 vertices, cell density 0.001, every row and
    /// column guaranteed at least one entry.
    PaperFig1,
    /// Same sizes and laws with cell density 0.1.
    PaperFig1Dense,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-fig1" => Ok(Preset::PaperFig1),
            "paper-fig1-dense" => Ok(Preset::PaperFig1Dense),
            other => Err(Error::InvalidInput(format!("unknown preset {other:?}"))),
        }
    }
}

impl Preset {
    pub fn generator(self) -> GeneratorConfig {
        let density = match self {
            Preset::PaperFig1 => 0.001,
            Preset::PaperFig1Dense => 0.1,
        };
        GeneratorConfig {
            ensure_nonempty: true,
            ..GeneratorConfig::new(40, 100, density, 2021)
        }
    }

    pub fn params(self) -> ExperimentParams {
        ExperimentParams {
            eps: 1.0,
            oracle_budget: 400_000,
            md_start: MdStart::Unconstrained,
            seed: 2021,
            max_trace_rows: 4000,
        }
    }
}

pub fn generate_instance(cfg: &GeneratorConfig) -> Result<ProblemInstance> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, GENERATOR_STREAM);
    let mut cells = vec![vec![false; cfg.n]; cfg.m];
    for row in cells.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.gen::<f64>() < cfg.density;
        }
    }
    if cfg.ensure_nonempty {
        for row in cells.iter_mut() {
            if !row.iter().any(|&c| c) {
                row[rng.gen_range(0..cfg.n)] = true;
            }
        }
        for i in 0..cfg.n {
            if !cells.iter().any(|row| row[i]) {
                cells[rng.gen_range(0..cfg.m)][i] = true;
            }
        }
    }
    let b: Vec<f64> = (0..cfg.m).map(|_| rng.gen::<f64>() * cfg.b_scale).collect();
    let a: Vec<f64> = (0..cfg.n)
        .map(|_| cfg.a_low + (cfg.a_high - cfg.a_low) * rng.gen::<f64>())
        .collect();
    let entries = cells.iter().enumerate().flat_map(|(j, row)| {
        row.iter()
            .enumerate()
            .filter(|(_, &set)| set)
            .map(move |(i, _)| (j, i))
    });
    let c = IncidenceMatrix::new(cfg.m, cfg.n, entries)?;
    ProblemInstance::new(c, b, QuadraticUtility::new(a, cfg.sigma)?, Norm::L2, Norm::L2)
}

/// Largest instance the grid search accepts.
pub const BRUTE_FORCE_MAX_N: usize = 4;

/// Best feasible point of the grid `{k * grid_step}` inside `[0, upper_i]`.
///
/// All but the last coordinate are enumerated; along the last one the
/// utility is concave, so only the two grid points around its
/// unconstrained maximizer (clipped to the feasible range) can win.
pub fn brute_force_solve<U: Utility>(inst: &ProblemInstance<U>, grid_step: f64, upper: &[f64]) -> Result<Vec<f64>> {
    let n = inst.n();
    if n == 0 || n > BRUTE_FORCE_MAX_N {
        return Err(Error::InvalidInput(format!(
            "grid search needs 1 <= n <= {BRUTE_FORCE_MAX_N}, got {n}"
        )));
    }
    if !(grid_step > 0.0) {
        return Err(Error::InvalidInput("grid step must be positive".into()));
    }
    if upper.len() != n || upper.iter().any(|u| !(*u >= 0.0) || !u.is_finite()) {
        return Err(Error::InvalidInput("box bounds must be finite and nonnegative".into()));
    }
    let kmax: Vec<u64> = upper.iter().map(|u| (u / grid_step + 1e-9).floor() as u64).collect();
    let last = n - 1;
    let tol = |b: f64| 1e-12 * (1.0 + b.abs());
    let peak = inst.utility.best_response(last, 0.0, 0.0, 0.0);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut ks = vec![0u64; last];
    loop {
        let mut x: Vec<f64> = ks.iter().map(|&k| k as f64 * grid_step).collect();
        x.push(0.0);
        let load = inst.c.mat_vec(&x)?;
        let feasible = (0..inst.m()).all(|j| load[j] <= inst.b[j] + tol(inst.b[j]));
        if feasible {
            // Room left for the last coordinate.
            let room = inst
                .c
                .col(last)
                .iter()
                .map(|&j| inst.b[j] - load[j])
                .fold(f64::INFINITY, f64::min);
            let mut top = kmax[last];
            if room.is_finite() {
                let mut k = ((room.max(0.0) / grid_step) + 1e-9).floor() as u64;
                while k > 0 && k as f64 * grid_step > room + tol(room) {
                    k -= 1;
                }
                top = top.min(k);
            }
            let candidates: Vec<u64> = match peak {
                Some(p) if p.is_finite() => {
                    let lo = ((p / grid_step).floor() as u64).min(top);
                    vec![lo, (lo + 1).min(top)]
                }
                Some(_) => vec![top],
                None => (0..=top).collect(),
            };
            let base: f64 = (0..last).map(|i| inst.utility.value(i, x[i])).sum();
            for k in candidates {
                let xl = k as f64 * grid_step;
                let v = base + inst.utility.value(last, xl);
                if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                    x[last] = xl;
                    best = Some((v, x.clone()));
                }
            }
        }
        // Odometer over the leading coordinates.
        let mut d = 0;
        loop {
            if d == last {
                return best
                    .map(|(_, x)| x)
                    .ok_or_else(|| Error::InvalidInput("no feasible grid point".into()));
            }
            if ks[d] < kmax[d] {
                ks[d] += 1;
                break;
            }
            ks[d] = 0;
            d += 1;
        }
    }
}

/// Per-vertex box for the grid search: the tightest capacity among related
/// connections, or the unconstrained maximizer for unrelated vertices.
pub fn default_box(inst: &ProblemInstance) -> Vec<f64> {
    (0..inst.n())
        .map(|i| {
            let cap = inst
                .c
                .col(i)
                .iter()
                .map(|&j| inst.b[j])
                .fold(f64::INFINITY, f64::min);
            if cap.is_finite() {
                cap
            } else {
                inst.utility.best_response(i, 0.0, 0.0, 0.0).unwrap_or(0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Fgm,
    Md,
    FgmProtocol,
    MdProtocol,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Fgm,
        SolverKind::Md,
        SolverKind::FgmProtocol,
        SolverKind::MdProtocol,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Fgm => "fgm",
            SolverKind::Md => "md",
            SolverKind::FgmProtocol => "fgm-protocol",
            SolverKind::MdProtocol => "md-protocol",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown solver {s:?}")))
    }
}

/// Where mirror descent starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MdStart {
    Zero,
    /// Every vertex at its zero-price best response (infeasible in general).
    Unconstrained,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentParams {
    pub eps: f64,
    /// Oracle calls granted to every solver, so traces share one axis.
    pub oracle_budget: u64,
    pub md_start: MdStart,
    pub seed: u64,
    /// Upper bound on rows per trace; strides are chosen to respect it.
    pub max_trace_rows: u64,
}

impl ExperimentParams {
    /// FGM spends `n` calls per iteration plus `n` per recorded gap.
    fn fgm_iterations(&self, n: usize) -> u64 {
        (self.oracle_budget / (2 * n as u64).max(1)).max(1)
    }

    fn fgm_stride(&self, n: usize) -> u64 {
        (self.fgm_iterations(n) / self.max_trace_rows.max(1)).max(1)
    }

    fn md_stride(&self) -> u64 {
        (self.oracle_budget / self.max_trace_rows.max(1)).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    pub kind: SolverKind,
    pub outcome: std::result::Result<RunOutput, String>,
}

#[derive(Debug, Clone)]
pub enum RunOutput {
    Fgm(FgmResult, Option<SimStats>),
    Md(MdResult, Option<SimStats>),
}

impl RunOutput {
    pub fn trace(&self) -> &SolverTrace {
        match self {
            RunOutput::Fgm(r, _) => &r.trace,
            RunOutput::Md(r, _) => &r.trace,
        }
    }

    pub fn stats(&self) -> Option<&SimStats> {
        match self {
            RunOutput::Fgm(_, s) | RunOutput::Md(_, s) => s.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub solver: SolverKind,
    pub status: String,
    pub csv: Option<String>,
    pub stats_json: Option<String>,
    pub rows: usize,
    pub final_oracle_calls: Option<u64>,
    pub final_utility: Option<f64>,
    pub final_violation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub library_version: &'static str,
    pub instance_fingerprint: String,
    pub m: usize,
    pub n: usize,
    pub nnz: usize,
    pub params: ExperimentParams,
    pub generator: Option<GeneratorSnapshot>,
    pub solvers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorSnapshot {
    pub m: usize,
    pub n: usize,
    pub density: f64,
    pub seed: u64,
    pub a_low: f64,
    pub a_high: f64,
    pub b_scale: f64,
    pub sigma: f64,
    pub ensure_nonempty: bool,
}

impl From<&GeneratorConfig> for GeneratorSnapshot {
    fn from(g: &GeneratorConfig) -> Self {
        Self {
            m: g.m,
            n: g.n,
            density: g.density,
            seed: g.seed,
            a_low: g.a_low,
            a_high: g.a_high,
            b_scale: g.b_scale,
            sigma: g.sigma,
            ensure_nonempty: g.ensure_nonempty,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub runs: Vec<SolverRun>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn run(&self, kind: SolverKind) -> Option<&RunOutput> {
        self.runs
            .iter()
            .find(|r| r.kind == kind)
            .and_then(|r| r.outcome.as_ref().ok())
    }
}

/// Zero-price best response of every vertex with no smoothing.
pub fn unconstrained_rates(inst: &ProblemInstance) -> Result<Vec<f64>> {
    let cfg = SmoothingConfig {
        mu: 0.0,
        x0: vec![0.0; inst.n()],
        epsilon: 1.0,
        r_p: 1.0,
        r_q: None,
    };
    SmoothedDualOracle::new(inst, cfg)?.primal_from_prices(&vec![0.0; inst.m()])
}

fn run_one(inst: &ProblemInstance, kind: SolverKind, params: &ExperimentParams) -> Result<RunOutput> {
    let n = inst.n();
    match kind {
        SolverKind::Fgm | SolverKind::FgmProtocol => {
            let cfg = SmoothingConfig::for_instance(inst, params.eps)?;
            let iters = params.fgm_iterations(n);
            let fgm = FgmOptions {
                stop: StopRule::Iterations(iters),
                max_iter: iters,
                trace_stride: params.fgm_stride(n),
                ..FgmOptions::default()
            };
            let lambda0 = vec![0.0; inst.m()];
            if kind == SolverKind::Fgm {
                Ok(RunOutput::Fgm(fgm_solve(inst, &cfg, &lambda0, &fgm)?, None))
            } else {
                let opts = FgmProtocolOptions {
                    fgm,
                    drop_price_link: None,
                };
                let (r, s) = run_fgm_protocol(inst, &cfg, &lambda0, iters, &opts)?;
                Ok(RunOutput::Fgm(r, Some(s)))
            }
        }
        SolverKind::Md | SolverKind::MdProtocol => {
            let x0 = match params.md_start {
                MdStart::Zero => vec![0.0; n],
                MdStart::Unconstrained => unconstrained_rates(inst)?,
            };
            let md_params = MdParams {
                eps: params.eps,
                m_u: default_gradient_bound(&inst.utility),
                x0,
                steps: params.oracle_budget,
                seed: params.seed,
            };
            let md = MdOptions {
                literal_sign: false,
                trace_stride: params.md_stride(),
            };
            if kind == SolverKind::Md {
                Ok(RunOutput::Md(md_solve(inst, &md_params, &md)?, None))
            } else {
                let opts = MdProtocolOptions {
                    md,
                    ..MdProtocolOptions::default()
                };
                let (r, s) = run_md_protocol(inst, &md_params, &opts)?;
                Ok(RunOutput::Md(r, Some(s)))
            }
        }
    }
}

/// Runs every requested solver on one instance. A failing solver is
/// recorded in the manifest and does not stop the others. When `out_dir`
/// is given, writes `<solver>.csv`, `<solver>.stats.json` for protocol
/// runs, and `manifest.json`.
pub fn run_experiment(
    inst: &ProblemInstance,
    solvers: &[SolverKind],
    params: &ExperimentParams,
    generator: Option<&GeneratorConfig>,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for &kind in solvers {
        let outcome = run_one(inst, kind, params).map_err(|e| e.to_string());
        let mut entry = ManifestEntry {
            solver: kind,
            status: "ok".into(),
            csv: None,
            stats_json: None,
            rows: 0,
            final_oracle_calls: None,
            final_utility: None,
            final_violation: None,
        };
        match &outcome {
            Ok(out) => {
                let trace = out.trace();
                entry.rows = trace.rows.len();
                if let Some(last) = trace.last() {
                    entry.final_oracle_calls = Some(last.oracle_calls);
                    entry.final_utility = Some(last.utility);
                    entry.final_violation = Some(last.violation);
                }
                if let Some(dir) = out_dir {
                    let csv: PathBuf = dir.join(format!("{}.csv", kind.name()));
                    trace.write_csv(fs::File::create(&csv)?)?;
                    entry.csv = Some(file_name(&csv));
                    if let Some(stats) = out.stats() {
                        let path = dir.join(format!("{}.stats.json", kind.name()));
                        fs::write(&path, stats.to_json())?;
                        entry.stats_json = Some(file_name(&path));
                    }
                }
            }
            Err(e) => entry.status = format!("failed: {e}"),
        }
        entries.push(entry);
        runs.push(SolverRun { kind, outcome });
    }
    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION"),
        instance_fingerprint: fingerprint(inst),
        m: inst.m(),
        n: inst.n(),
        nnz: inst.c.nnz(),
        params: params.clone(),
        generator: generator.map(GeneratorSnapshot::from),
        solvers: entries,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(ExperimentReport { runs, manifest })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(b: f64, a: f64, sigma: f64) -> ProblemInstance {
        let c = IncidenceMatrix::new(1, 1, [(0, 0)]).unwrap();
        ProblemInstance::new(c, vec![b], QuadraticUtility::new(vec![a], sigma).unwrap(), Norm::L2, Norm::L2)
            .unwrap()
    }

    #[test]
    fn saturated_density() {
        let g = GeneratorConfig::new(3, 4, 1.0, 5);
        let inst = generate_instance(&g).unwrap();
        assert_eq!(inst.c.nnz(), 12);
    }

    #[test]
    fn generator_is_deterministic() {
        let g = GeneratorConfig::new(10, 20, 0.2, 42);
        let a = generate_instance(&g).unwrap();
        let b = generate_instance(&g).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let other = generate_instance(&GeneratorConfig { seed: 43, ..g }).unwrap();
        assert_ne!(a.to_json(), other.to_json());
    }

    #[test]
    fn generator_laws() {
        let g = GeneratorConfig::new(40, 100, 0.05, 3);
        let inst = generate_instance(&g).unwrap();
        assert!(inst.b.iter().all(|&b| (0.0..=100.0).contains(&b)));
        assert!(inst.utility.a.iter().all(|&a| (1.0..=50.0).contains(&a)));
        assert_eq!(inst.utility.sigma, 0.001);
    }

    #[test]
    fn nonempty_fill() {
        let g = GeneratorConfig {
            ensure_nonempty: true,
            ..GeneratorConfig::new(40, 100, 0.001, 1)
        };
        let inst = generate_instance(&g).unwrap();
        assert!((0..40).all(|j| !inst.c.row(j).is_empty()));
        assert!((0..100).all(|i| !inst.c.col(i).is_empty()));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_instance(&GeneratorConfig::new(0, 1, 0.5, 0)).is_err());
        assert!(generate_instance(&GeneratorConfig::new(1, 1, 0.0, 0)).is_err());
        assert!(generate_instance(&GeneratorConfig::new(1, 1, 1.5, 0)).is_err());
    }

    #[test]
    fn brute_force_boundary_optimum() {
        // unconstrained peak at 10 / 0.001, the constraint clips it to 1
        let inst = tiny(1.0, 10.0, 0.001);
        let x = brute_force_solve(&inst, 1e-3, &[2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_interior_optimum() {
        // peak at a / (sigma n) = 0.8
        let inst = tiny(100.0, 0.8, 1.0);
        let x = brute_force_solve(&inst, 0.03, &[2.0]).unwrap();
        assert!((x[0] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn brute_force_refinement_monotone() {
        let c = IncidenceMatrix::new(2, 3, [(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap();
        let inst = ProblemInstance::new(
            c,
            vec![1.0, 0.7],
            QuadraticUtility::new(vec![1.0, 1.4, 0.6], 1.0 / 3.0).unwrap(),
            Norm::L2,
            Norm::L2,
        )
        .unwrap();
        let bx = default_box(&inst);
        let mut last = f64::NEG_INFINITY;
        for step in [0.1, 0.05, 0.025, 0.0125] {
            let x = brute_force_solve(&inst, step, &bx).unwrap();
            let u = inst.utility_total(&x).unwrap();
            assert!(u >= last - 1e-12);
            assert!(inst.max_violation(&x).unwrap() <= 1e-12);
            last = u;
        }
    }

    #[test]
    fn brute_force_limits() {
        let inst = generate_instance(&GeneratorConfig::new(1, 5, 1.0, 0)).unwrap();
        assert!(brute_force_solve(&inst, 0.1, &[1.0; 5]).is_err());
        let inst = tiny(1.0, 1.0, 1.0);
        assert!(brute_force_solve(&inst, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn parses_names() {
        assert_eq!("md-protocol".parse::<SolverKind>().unwrap(), SolverKind::MdProtocol);
        assert!("nope".parse::<SolverKind>().is_err());
        assert_eq!("paper-fig1".parse::<Preset>().unwrap(), Preset::PaperFig1);
    }
}

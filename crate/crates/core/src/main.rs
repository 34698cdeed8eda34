use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use netrate::fgm::{fgm_iterations_bound, fgm_solve, FgmOptions, StopRule};
use netrate::harness::{
    generate_instance, run_experiment, unconstrained_rates, ExperimentParams, GeneratorConfig, MdStart, Preset,
    SolverKind,
};
use netrate::mirror::{default_gradient_bound, md_iterations_bound, md_solve, MdOptions, MdParams};
use netrate::oracle::{default_primal_radius, lipschitz_for_modulus, LipschitzMethod, SmoothedDualOracle, SmoothingConfig};
use netrate::simnet::{run_fgm_protocol, run_md_protocol, FgmProtocolOptions, MdProtocolOptions};
use netrate::{Error, ProblemInstance};

#[derive(Parser)]
#[command(name = "netrate", version, about = "Network utility maximization solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random instance and write it as JSON.
    Generate(GenerateArgs),
    /// Run one solver on an instance file and write its trace as CSV.
    Solve(SolveArgs),
    /// Run several solvers on one instance with a shared oracle budget.
    Experiment(ExperimentArgs),
    /// Print the iteration bounds and constants for an instance.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Start from a named preset (paper-fig1, paper-fig1-dense).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 40)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    density: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    ensure_nonempty: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(short, long)]
    instance: PathBuf,
    /// fgm, md, fgm-protocol or md-protocol.
    #[arg(long, default_value = "fgm")]
    solver: String,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    /// Prox coefficient for FGM; replaces the utility's own curvature.
    #[arg(long)]
    mu: Option<f64>,
    /// Run exactly this many FGM iterations instead of the certificate rule.
    #[arg(long)]
    iters: Option<u64>,
    /// FGM iteration cap under the certificate rule, or the number of MD
    /// steps (defaults to the theoretical bound).
    #[arg(long)]
    max_iter: Option<u64>,
    /// MD productive steps move against the utility gradient.
    #[arg(long)]
    literal_sign: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lipschitz estimate for FGM: spectral, nnz or operator.
    #[arg(long, default_value = "spectral")]
    lipschitz: String,
    #[arg(long, default_value_t = 1)]
    trace_stride: u64,
    /// Start MD from the unconstrained maximizer instead of zero.
    #[arg(long)]
    md_unconstrained_start: bool,
    /// Trace CSV; printed to stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Message statistics JSON for protocol solvers.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, conflicts_with = "instance")]
    preset: Option<String>,
    #[arg(short, long)]
    instance: Option<PathBuf>,
    /// Comma-separated solver list.
    #[arg(long, default_value = "fgm,md")]
    solvers: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(short, long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve(a),
        Command::Experiment(a) => experiment(a),
        Command::Bounds(a) => bounds(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoConvergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn generate(a: GenerateArgs) -> netrate::Result<()> {
    let mut cfg = match &a.preset {
        Some(p) => p.parse::<Preset>()?.generator(),
        None => {
            let mut g = GeneratorConfig::new(a.m, a.n, a.density, 0);
            g.ensure_nonempty = a.ensure_nonempty;
            g
        }
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    generate_instance(&cfg)?.save(&a.out)
}

fn parse_lipschitz(s: &str) -> netrate::Result<LipschitzMethod> {
    match s {
        "spectral" => Ok(LipschitzMethod::Spectral),
        "nnz" => Ok(LipschitzMethod::Nnz),
        "operator" => Ok(LipschitzMethod::OperatorNorm),
        other => Err(Error::InvalidInput(format!("unknown Lipschitz method {other:?}"))),
    }
}

fn solve(a: SolveArgs) -> netrate::Result<()> {
    let inst = ProblemInstance::load(&a.instance)?;
    let kind: SolverKind = a.solver.parse()?;
    let (trace, stats) = match kind {
        SolverKind::Fgm | SolverKind::FgmProtocol => {
            let mut cfg = SmoothingConfig::for_instance(&inst, a.eps)?;
            if let Some(mu) = a.mu {
                cfg = cfg.with_mu(mu);
            }
            let mut opts = FgmOptions {
                lipschitz: parse_lipschitz(&a.lipschitz)?,
                use_curvature: a.mu.map(|_| false),
                stop: a.iters.map_or(StopRule::Certificate, StopRule::Iterations),
                trace_stride: a.trace_stride,
                ..FgmOptions::default()
            };
            if let Some(cap) = a.max_iter {
                opts.max_iter = cap;
            }
            let lambda0 = vec![0.0; inst.m()];
            if kind == SolverKind::Fgm {
                let r = fgm_solve(&inst, &cfg, &lambda0, &opts)?;
                if !r.converged {
                    write_trace(&r.trace, a.out.as_ref())?;
                    let last = r.trace.last().map_or(f64::NAN, |row| row.violation);
                    return Err(Error::NoConvergence {
                        what: "fast gradient certificate",
                        iterations: r.iterations as usize,
                        last,
                    });
                }
                (r.trace, None)
            } else {
                let iters = a.iters.ok_or_else(|| {
                    Error::InvalidInput("the protocol simulation needs --iters".into())
                })?;
                let popts = FgmProtocolOptions {
                    fgm: opts,
                    drop_price_link: None,
                };
                let (r, s) = run_fgm_protocol(&inst, &cfg, &lambda0, iters, &popts)?;
                (r.trace, Some(s))
            }
        }
        SolverKind::Md | SolverKind::MdProtocol => {
            let x0 = if a.md_unconstrained_start {
                unconstrained_rates(&inst)?
            } else {
                vec![0.0; inst.n()]
            };
            let m_u = default_gradient_bound(&inst.utility);
            let steps = match a.max_iter.or(a.iters) {
                Some(s) => s,
                None => {
                    let r_p = default_primal_radius(&inst, &vec![0.0; inst.n()])?;
                    let maxnorm = inst.c.max_row_dual_norm(inst.p);
                    md_iterations_bound(m_u, maxnorm, inst.n(), r_p, a.eps)
                }
            };
            let params = MdParams {
                eps: a.eps,
                m_u,
                x0,
                steps,
                seed: a.seed,
            };
            let md = MdOptions {
                literal_sign: a.literal_sign,
                trace_stride: a.trace_stride,
            };
            if kind == SolverKind::Md {
                (md_solve(&inst, &params, &md)?.trace, None)
            } else {
                let opts = MdProtocolOptions {
                    md,
                    ..MdProtocolOptions::default()
                };
                let (r, s) = run_md_protocol(&inst, &params, &opts)?;
                (r.trace, Some(s))
            }
        }
    };
    write_trace(&trace, a.out.as_ref())?;
    if let (Some(path), Some(s)) = (a.stats, stats) {
        fs::write(path, s.to_json())?;
    }
    Ok(())
}

fn write_trace(trace: &netrate::SolverTrace, out: Option<&PathBuf>) -> netrate::Result<()> {
    match out {
        Some(p) => trace.write_csv(fs::File::create(p)?),
        None => trace.write_csv(std::io::stdout().lock()),
    }
}

fn experiment(a: ExperimentArgs) -> netrate::Result<()> {
    let (inst, generator, mut params) = match (&a.preset, &a.instance) {
        (Some(p), _) => {
            let preset: Preset = p.parse()?;
            let g = preset.generator();
            (generate_instance(&g)?, Some(g), preset.params())
        }
        (None, Some(path)) => (
            ProblemInstance::load(path)?,
            None,
            ExperimentParams {
                eps: 1.0,
                oracle_budget: 100_000,
                md_start: MdStart::Unconstrained,
                seed: 0,
                max_trace_rows: 4000,
            },
        ),
        (None, None) => return Err(Error::InvalidInput("need --preset or --instance".into())),
    };
    if let Some(e) = a.eps {
        params.eps = e;
    }
    if let Some(b) = a.budget {
        params.oracle_budget = b;
    }
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let solvers = a
        .solvers
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<netrate::Result<Vec<SolverKind>>>()?;
    fs::create_dir_all(&a.out)?;
    inst.save(&a.out.join("instance.json"))?;
    let report = run_experiment(&inst, &solvers, &params, generator.as_ref(), Some(&a.out))?;
    for e in &report.manifest.solvers {
        println!(
            "{:<13} {:<8} rows={:<6} calls={:<9} utility={:<14} violation={}",
            e.solver.to_string(),
            e.status,
            e.rows,
            e.final_oracle_calls.map_or("-".into(), |v| v.to_string()),
            e.final_utility.map_or("-".into(), |v| format!("{v:.6}")),
            e.final_violation.map_or("-".into(), |v| format!("{v:.3e}")),
        );
    }
    Ok(())
}

fn bounds(a: BoundsArgs) -> netrate::Result<()> {
    let inst = ProblemInstance::load(&a.instance)?;
    let cfg = SmoothingConfig::for_instance(&inst, a.eps)?;
    let oracle = SmoothedDualOracle::new(&inst, cfg.clone())?;
    let r_q = oracle.dual_radius()?;
    let norm_c = inst.c.spectral_norm_sq(1e-10, 100_000)?.sqrt();
    let strong = inst.utility.curvature();
    let m_u = default_gradient_bound(&inst.utility);
    let maxnorm = inst.c.max_row_dual_norm(inst.p);
    let report = serde_json::json!({
        "eps": a.eps,
        "mu": cfg.mu,
        "r_p": cfg.r_p,
        "r_q": r_q,
        "norm_c": norm_c,
        "nnz": inst.c.nnz(),
        "lambda_max": norm_c * norm_c,
        "lipschitz_nnz": oracle.lipschitz_bound(LipschitzMethod::Nnz).ok(),
        "lipschitz_spectral": oracle.lipschitz_bound(LipschitzMethod::Spectral).ok(),
        "lipschitz_operator": oracle.lipschitz_bound(LipschitzMethod::OperatorNorm).ok(),
        "strong_concavity": strong,
        "lipschitz_strong": lipschitz_for_modulus(&inst, LipschitzMethod::Spectral, strong).ok(),
        "fgm_iterations": fgm_iterations_bound(cfg.r_p, r_q, norm_c, strong, a.eps),
        "md_gradient_bound": m_u,
        "md_max_row_norm": maxnorm,
        "md_iterations": md_iterations_bound(m_u, maxnorm, inst.n(), cfg.r_p, a.eps),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

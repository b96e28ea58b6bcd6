//! `avicert`: train, certify and simulate value-iteration neurocontrollers.

mod bundle;
mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use avicert::{
    bound_check, build_grid, issue_certificate, open_loop_oracle, run_avi_with, simulate,
    train_actor, AviConfig, CertifyError, CertifyOptions, OracleConfig, SimConfig,
};
use clap::{Args, Parser, Subcommand};

use bundle::{critic_digest, timestamp, Bounds, CertificateRecord, Provenance, RunBundle};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "avicert", version, about)]
struct Cli {
    /// Worker threads for the numerical kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run value iteration from a config file and write a run bundle.
    Train(TrainArgs),
    /// Certify a trained bundle on an evaluation grid.
    Certify(CertifyArgs),
    /// Simulate the trained controller from an initial state.
    Simulate(SimulateArgs),
    /// Tabulate certificates of several bundles side by side.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output bundle path (default: next to the config).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Replace the sampling seed from the config.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Print the residual every this many iterations.
    #[arg(long, default_value_t = 25)]
    report_every: usize,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Grid points per axis (default: from the config).
    #[arg(long)]
    grid: Option<usize>,
    /// Certificate report path (default: `<bundle>.certificate.json`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-state CSV export of δ, ‖μ‖ and max |ε|.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Comma-separated initial state.
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    /// Also solve the open-loop reference problem.
    #[arg(long)]
    oracle: bool,
    /// Closed-loop trajectory CSV; the open-loop one gets an `.oracle` suffix.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    max_steps: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long = "bundle", required = true)]
    bundles: Vec<PathBuf>,
    /// Also report the critic value and region membership at this state.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
}

/// Failure classes with their exit codes.
enum Failure {
    /// Bad arguments or configuration (1).
    Usage(anyhow::Error),
    /// Value iteration hit its iteration cap (2).
    NotConverged(String),
    /// Input exists but does not meet a precondition (3).
    Precondition(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::NotConverged(_) => 2,
            Failure::Precondition(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Certify(a) => certify(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Precondition(e) => eprintln!("error: {e:#}"),
                Failure::NotConverged(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn default_bundle_path(config: &Path) -> PathBuf {
    config.with_extension("bundle.json")
}

fn parse_state(text: &str, dim: usize) -> anyhow::Result<Vec<f64>> {
    let x: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("cannot parse state \"{text}\""))?;
    if x.len() != dim {
        return Err(anyhow!(
            "state has {} components, the plant has {dim}",
            x.len()
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(anyhow!("state components must be finite"));
    }
    Ok(x)
}

fn run_bounds(
    model: &avicert::SystemModel,
    basis: &avicert::PolynomialBasis,
    base: &AviConfig,
    c: f64,
) -> anyhow::Result<Bounds> {
    let shifted = |s: f64| AviConfig {
        utility_shift: s,
        ..base.clone()
    };
    let upper = run_avi_with(model, basis, shifted(c), None, |_, _| {})?;
    let lower = run_avi_with(model, basis, shifted(-c), None, |_, _| {})?;
    for (name, run) in [("upper", &upper), ("lower", &lower)] {
        if !run.converged() {
            log::warn!("{name} bounding run stopped at the iteration cap");
        }
    }
    println!(
        "bounding runs with c = {c:.6}: upper {} iterations, lower {} iterations",
        upper.iterations(),
        lower.iterations()
    );
    Ok(Bounds { c, upper, lower })
}

fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| Failure::Usage(e.into()))?;
    if let Some(seed) = args.seed_override {
        cfg.avi.rng_seed = seed;
    }
    let model = cfg.model()?;
    let basis = cfg.critic_basis()?;
    let actor_basis = cfg.actor_basis()?;
    let avi_cfg = cfg.avi_config()?;
    let every = args.report_every.max(1);
    let run = run_avi_with(&model, &basis, avi_cfg.clone(), None, |i, r| {
        if i % every == 0 {
            println!("iteration {i:>5}  max residual {r:.6e}");
        }
    })
    .map_err(|e| Failure::Precondition(e.into()))?;
    let last = run.max_residuals.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} after {} iterations, final max residual {last:.6e} (tolerance {})",
        if run.converged() {
            "converged"
        } else {
            "NOT converged"
        },
        run.iterations(),
        avi_cfg.outer_tolerance
    );
    let critic = run.final_critic();
    let actor = train_actor(&model, &critic, &actor_basis, &run.samples, &cfg.inner())
        .map_err(|e| Failure::Precondition(e.into()))?;
    let bounds = match cfg.bounding_c() {
        Some(Some(c)) => Some(run_bounds(&model, &basis, &avi_cfg, c)?),
        _ => None,
    };
    let converged = run.converged();
    let iterations = run.iterations();
    let bundle = RunBundle {
        format_version: bundle::FORMAT_VERSION,
        provenance: Provenance {
            seed: cfg.avi.rng_seed,
            created: timestamp(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            critic_sha256: critic_digest(&critic),
        },
        config: cfg,
        model,
        run,
        actor,
        bounds,
        certificate: None,
    };
    let path = args
        .bundle
        .unwrap_or_else(|| default_bundle_path(&args.config));
    bundle.save(&path)?;
    println!("wrote {}", path.display());
    if !converged {
        return Err(Failure::NotConverged(format!(
            "value iteration did not converge within {iterations} iterations"
        )));
    }
    Ok(())
}

fn certify(args: CertifyArgs) -> CmdResult {
    let mut bundle = RunBundle::load(&args.bundle)?;
    if !bundle.run.converged() {
        return Err(Failure::Precondition(anyhow!(
            "the bundle's run did not converge; refusing to certify"
        )));
    }
    let per_axis = args.grid.unwrap_or(bundle.config.certify.grid_per_axis);
    let grid =
        build_grid(&bundle.run.config.domain, per_axis).map_err(|e| Failure::Usage(e.into()))?;
    let options = CertifyOptions {
        exclusion_threshold: bundle.config.certify.exclusion_threshold,
        inner: bundle.config.inner(),
    };
    let cert = issue_certificate(&bundle.model, &bundle.run, &bundle.actor, &grid, &options)
        .map_err(|e| match e {
            CertifyError::Precondition(_) | CertifyError::Avi(_) => Failure::Precondition(e.into()),
            other => Failure::Usage(other.into()),
        })?;
    print!("{}", cert.summary());
    if let Some(path) = &args.csv {
        let out = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
        cert.write_state_csv(&grid, &bundle.model, out)
            .map_err(|e| Failure::Usage(e.into()))?;
        println!("wrote {}", path.display());
    }
    if bundle.config.bounding_c() == Some(None) && bundle.bounds.is_none() {
        if cert.c < 1.0 {
            let basis = bundle.run.basis.clone();
            bundle.bounds = Some(run_bounds(
                &bundle.model,
                &basis,
                &bundle.run.config,
                cert.c,
            )?);
        } else {
            log::warn!("certified c = {} is not below 1; no bounding runs", cert.c);
        }
    }
    let out = args
        .out
        .unwrap_or_else(|| args.bundle.with_extension("certificate.json"));
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&cert).map_err(anyhow::Error::from)?,
    )
    .with_context(|| out.display().to_string())?;
    println!("wrote {}", out.display());
    bundle.certificate = Some(CertificateRecord {
        created: timestamp(),
        critic_sha256: critic_digest(&bundle.critic()),
        certificate: cert,
    });
    bundle.save(&args.bundle)?;
    println!("updated {}", args.bundle.display());
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> CmdResult {
    let bundle = RunBundle::load(&args.bundle)?;
    let model = &bundle.model;
    let x0 = parse_state(&args.x0, model.state_dim())?;
    let domain = bundle.run.config.domain.clone();
    let sim_cfg = SimConfig {
        max_steps: args.max_steps,
        domain: Some(domain.clone()),
        ..Default::default()
    };
    let traj = simulate(model, &bundle.actor, &x0, &sim_cfg).map_err(anyhow::Error::from)?;
    if let Some(path) = &args.csv {
        traj.write_csv(BufWriter::new(
            File::create(path).with_context(|| path.display().to_string())?,
        ))
        .map_err(anyhow::Error::from)?;
        println!("wrote {}", path.display());
    }
    match &bundle.certificate {
        Some(rec) if rec.certificate.roa_member(&x0) => {}
        Some(rec) => eprintln!(
            "warning: x0 lies outside the certified region (critic value {:.6} > r_bar {}); \
             the trajectory is not guaranteed to stay in the training domain",
            bundle.critic().value(&x0),
            rec.certificate
                .r_bar
                .map_or_else(|| "n/a".to_string(), |r| format!("{r:.6}"))
        ),
        None => eprintln!(
            "warning: bundle has no certificate; the trajectory is not guaranteed to stay \
             in the training domain"
        ),
    }
    if traj.diverged {
        eprintln!("warning: closed-loop trajectory diverged");
    }
    if let Some(k) = traj.exited_domain_at {
        eprintln!("warning: closed-loop trajectory left the training domain at step {k}");
    }
    let oracle = if args.oracle {
        let res = open_loop_oracle(model, &x0, &OracleConfig::default(), Some(&traj.controls))
            .map_err(anyhow::Error::from)?;
        if let Some(path) = &args.csv {
            let path = path.with_extension("oracle.csv");
            res.trajectory(model)
                .write_csv(BufWriter::new(
                    File::create(&path).with_context(|| path.display().to_string())?,
                ))
                .map_err(anyhow::Error::from)?;
            println!("wrote {}", path.display());
        }
        Some(res.cost)
    } else {
        None
    };
    let critic = bundle.critic();
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    let (upper, lower) = match &bundle.bounds {
        Some(b) => {
            let rep = bound_check(
                &critic,
                &b.upper.final_critic(),
                &b.lower.final_critic(),
                &x0,
            );
            if !rep.ordered {
                eprintln!("warning: bounds are not ordered at x0");
            }
            (Some(rep.upper), Some(rep.lower))
        }
        None => (None, None),
    };
    println!(
        "{:>12} {:>12} {:>12} {:>12} {:>12}",
        "closed_loop", "open_loop", "critic", "upper", "lower"
    );
    println!(
        "{:>12} {:>12} {:>12} {:>12} {:>12}",
        fmt(Some(traj.total_cost)),
        fmt(oracle),
        fmt(Some(critic.value(&x0))),
        fmt(upper),
        fmt(lower)
    );
    println!(
        "steps {}  reached stop radius {}",
        traj.controls.len(),
        traj.reached_stop_radius
    );
    Ok(())
}

fn compare(args: CompareArgs) -> CmdResult {
    println!(
        "{:<32} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "bundle", "iters", "c", "L_U", "L_V", "margin", "r_bar", "V(x0)", "verdict"
    );
    for path in &args.bundles {
        let b = RunBundle::load(path)?;
        let critic = b.critic();
        let value = match &args.x0 {
            Some(s) => Some(critic.value(&parse_state(s, b.model.state_dim())?)),
            None => None,
        };
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let name = path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        match &b.certificate {
            Some(rec) => {
                let c = &rec.certificate;
                println!(
                    "{name:<32} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                    b.run.iterations(),
                    f(Some(c.c)),
                    f(Some(c.lipschitz_u)),
                    f(Some(c.lipschitz_v)),
                    f(Some(c.actor_error_margin)),
                    f(c.r_bar),
                    f(value),
                    c.verdict()
                );
            }
            None => println!(
                "{name:<32} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
                b.run.iterations(),
                "-",
                "-",
                "-",
                "-",
                "-",
                f(value),
                "uncertified"
            ),
        }
    }
    Ok(())
}

//! Command-line front end: config ingestion, subcommand orchestration, and
//! report/graph/CSV emission.

mod config;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use config::{BackendConfig, FormatConfig, RunConfig};
use etc_traffic::metrics::{self, AnalyzeOptions};
use etc_traffic::system::polar_angle;
use etc_traffic::{cycles, ergodic, traffic, Error as EtcError};
use nalgebra::DVector;
use std::path::{Path, PathBuf};

const EXIT_CONFIG: i32 = 2;
const EXIT_INCOMPLETE: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "etc-traffic",
    about = "Sampling-traffic analysis for event-triggered control of LTI systems",
    version
)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Abstraction depth (overrides the config's l_max for `abstract`).
    #[arg(long, global = true)]
    l: Option<usize>,
    /// Maximum refinement depth (overrides the config's l_max).
    #[arg(long, global = true)]
    l_max: Option<usize>,
    /// Feasibility backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Random unit samples per feasibility query (sampling backend).
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Root seed; every command is deterministic given the seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (defaults to a name under the config's output dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format where applicable.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sampling,
    Exact,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Build the depth-l traffic model and serialize it.
    Abstract,
    /// Run the verify-or-refine pipeline and emit the metrics report.
    Metrics,
    /// Entropy of the abstraction for every depth up to l_max, as CSV.
    EntropyCurve,
    /// Verify one periodic inter-sample pattern (comma-separated k values).
    VerifyCycle {
        /// e.g. "8" or "7,9".
        cycle: String,
    },
    /// CETC qualitative suite: extreme inter-sample times, fixed o-lines,
    /// attractivity and Schur tests.
    FixedLines,
    /// Simulate the sample map; writes a trajectory CSV (and a cobweb CSV for
    /// planar systems).
    Simulate {
        /// Initial state, comma-separated (default: seeded random).
        #[arg(long)]
        x0: Option<String>,
        /// Steps.
        #[arg(short = 'n', long, default_value_t = 100)]
        steps: usize,
    },
    /// Two-ensemble ergodicity test on a chaos-suspect component.
    ErgodicTest {
        /// SCC id, or "auto" for the largest non-simple component.
        #[arg(long, default_value = "auto")]
        scc: String,
    },
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<EtcError>() {
        match e {
            EtcError::NumericOverflow { .. } | EtcError::Eigensolver(_) => EXIT_NUMERIC,
            EtcError::Budget(_) => EXIT_INCOMPLETE,
            EtcError::Config(_)
            | EtcError::InvalidSystem(_)
            | EtcError::Dimension(_)
            | EtcError::WrongKind(_)
            | EtcError::OutOfRange(_) => EXIT_CONFIG,
            _ => 1,
        }
    } else if err.downcast_ref::<serde_json::Error>().is_some() {
        EXIT_CONFIG
    } else if err.to_string().contains("config") || err.to_string().contains("matrix") {
        EXIT_CONFIG
    } else {
        1
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli.config.as_ref().context("--config is required")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(l) = cli.l_max.or(cli.l) {
        cfg.analysis.l_max = l;
    }
    if let Some(b) = cli.backend {
        cfg.analysis.backend = match b {
            BackendArg::Exact => BackendConfig::Exact,
            BackendArg::Sampling => BackendConfig::Sampling,
        };
    }
    if let Some(s) = cli.samples {
        cfg.analysis.samples = s;
    }
    if let Some(s) = cli.seed {
        cfg.analysis.seed = s;
    }
    if let Some(f) = cli.format {
        cfg.output.format = match f {
            FormatArg::Json => FormatConfig::Json,
            FormatArg::Csv => FormatConfig::Csv,
            FormatArg::Dot => FormatConfig::Dot,
        };
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, cfg: &RunConfig, name: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| Path::new(&cfg.output.dir).join(name))
}

fn write_out(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Abstract => cmd_abstract(cli),
        Command::Metrics => cmd_metrics(cli),
        Command::EntropyCurve => cmd_entropy_curve(cli),
        Command::VerifyCycle { cycle } => cmd_verify_cycle(cli, cycle),
        Command::FixedLines => cmd_fixed_lines(cli),
        Command::Simulate { x0, steps } => cmd_simulate(cli, x0.as_deref(), *steps),
        Command::ErgodicTest { scc } => cmd_ergodic_test(cli, scc),
    }
}

fn cmd_abstract(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let l = cli.l.unwrap_or(cfg.analysis.l_max);
    let model = traffic::build(&sys, l, &cfg.build_options())?;
    let ent = metrics::digraph_entropy(&model.edges);
    println!("l: {}", model.l());
    println!("states: {}", model.state_count());
    println!("edges: {}", model.edge_count());
    println!("entropy: {:.12} bits", ent.bits);
    let (name, text) = match cfg.output.format {
        FormatConfig::Dot => (format!("model_l{}.dot", model.l()), model.to_dot()),
        _ => (format!("model_l{}.json", model.l()), model.to_json()?),
    };
    let path = out_path(cli, &cfg, &name);
    write_out(&path, &text)?;
    println!("wrote {}", path.display());
    Ok(if model.meta.incomplete { EXIT_INCOMPLETE } else { 0 })
}

fn cmd_metrics(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let opts = AnalyzeOptions { l_max: cfg.analysis.l_max, build: cfg.build_options() };
    let report = metrics::analyze(&sys, &opts)?;
    print!("{}", report.summary_table());
    let path = out_path(cli, &cfg, "metrics.json");
    write_out(&path, &report.to_json()?)?;
    println!("wrote {}", path.display());
    Ok(if report.flags.incomplete { EXIT_INCOMPLETE } else { 0 })
}

fn cmd_entropy_curve(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let opts = cfg.build_options();
    let mut model = traffic::build(&sys, 1, &opts)?;
    let mut csv = String::from("l,bits\n");
    let mut incomplete = false;
    loop {
        let ent = metrics::digraph_entropy(&model.edges);
        println!("l={} states={} entropy={:.12}", model.l(), model.state_count(), ent.bits);
        csv.push_str(&format!("{},{}\n", model.l(), ent.bits));
        incomplete |= model.meta.incomplete;
        if model.l() >= cfg.analysis.l_max || model.meta.incomplete {
            break;
        }
        model = traffic::refine(&model, &sys, &opts)?;
    }
    let path = out_path(cli, &cfg, "entropy_curve.csv");
    write_out(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(if incomplete { EXIT_INCOMPLETE } else { 0 })
}

fn cmd_verify_cycle(cli: &Cli, cycle: &str) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let sigma: Vec<usize> = cycle
        .split(',')
        .map(|t| t.trim().parse::<usize>().context("cycle entries must be integers"))
        .collect::<anyhow::Result<_>>()?;
    if sigma.is_empty() {
        bail!("config error: empty cycle");
    }
    let witness = cycles::verify_cycle(&sys, &sigma)?;
    let schur = etc_traffic::spectral::schur_check(&witness.m_sigma, sys.tolerances().psd_tol)?;
    println!("cycle: {sigma:?}");
    println!("verified: {}", witness.verified);
    println!("classification: {:?}", witness.classification);
    println!(
        "side conditions: nonsingular={} mixed={} irrational_rotations={}",
        witness.side_conditions.nonsingular,
        witness.side_conditions.mixed,
        witness.side_conditions.irrational_rotations
    );
    println!("schur(M_sigma): {schur}");
    if let Some(inv) = &witness.invariant {
        println!("invariant: {:?} with |lambda| = {:.6}", inv.kind, inv.magnitude);
    }
    Ok(0)
}

fn cmd_fixed_lines(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let inf = sys.min_inter_sample_time()?;
    let sup = sys.max_inter_sample_time(&cfg.budget())?;
    println!("inf inter-sample time: {inf:.6}");
    println!(
        "sup inter-sample time: {:.6} (interval [{:.6}, {:.6}], exact: {})",
        sup.upper, sup.lower, sup.upper, sup.exact
    );
    let hits = cycles::fixed_oline_search_cetc(&sys, sys.tolerances().cetc_grid)?;
    let mut rows = Vec::new();
    if hits.is_empty() {
        println!("fixed o-lines: none");
    }
    for h in &hits {
        let att = cycles::attractivity_check(&sys, &h.line)?;
        let m = sys.transition_matrix(h.t)?;
        let schur = etc_traffic::spectral::schur_check(&m, sys.tolerances().psd_tol)?;
        let theta = h.theta.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "fixed o-line: t*={:.6} theta={theta} lambda={:.6} attractive={} schur(M(t*))={}",
            h.t, h.eigenvalue, att.attractive, schur
        );
        rows.push(serde_json::json!({
            "t": h.t,
            "theta": h.theta,
            "eigenvalue": h.eigenvalue,
            "attractive": att.attractive,
            "lambda": att.lambda,
            "schur_m_t": schur,
            "line": h.line.as_slice(),
        }));
    }
    let advice = cycles::structural_advice(&sys);
    let doc = serde_json::json!({
        "format_version": 1,
        "inf": inf,
        "sup": {"lower": sup.lower, "upper": sup.upper, "exact": sup.exact},
        "fixed_lines": rows,
        "structural_advice": advice,
    });
    let path = out_path(cli, &cfg, "fixed_lines.json");
    write_out(&path, &serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_simulate(cli: &Cli, x0: Option<&str>, steps: usize) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let x0 = match x0 {
        Some(raw) => {
            let vals: Vec<f64> = raw
                .split(',')
                .map(|t| t.trim().parse::<f64>().context("x0 entries must be numbers"))
                .collect::<anyhow::Result<_>>()?;
            if vals.len() != sys.nx() {
                bail!("config error: x0 has {} entries, expected {}", vals.len(), sys.nx());
            }
            DVector::from_vec(vals)
        }
        None => {
            let mut state = cfg.analysis.seed;
            DVector::from_fn(sys.nx(), |_, _| {
                state = splitmix(state);
                // uniform in [-1, 1)
                (state >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
            })
        }
    };
    let traj = sys.simulate(&x0, steps, true)?;
    let mut csv = String::from("step,output");
    for i in 0..sys.nx() {
        csv.push_str(&format!(",x{i}"));
    }
    csv.push('\n');
    for (i, y) in traj.outputs.iter().enumerate() {
        csv.push_str(&format!("{i},{y}"));
        for v in traj.states[i].iter() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let path = out_path(cli, &cfg, "trajectory.csv");
    write_out(&path, &csv)?;
    println!("wrote {}", path.display());
    if sys.nx() == 2 {
        let mut cobweb = String::from("theta,theta_next,output\n");
        for w in traj.states.windows(2) {
            let y = sys.inter_sample_time(&w[0])?;
            cobweb.push_str(&format!("{},{},{}\n", polar_angle(&w[0]), polar_angle(&w[1]), y));
        }
        let cpath = out_path(cli, &cfg, "cobweb.csv");
        // --out points at the trajectory; the cobweb goes next to it
        let cpath = if cli.out.is_some() {
            path.with_file_name("cobweb.csv")
        } else {
            cpath
        };
        write_out(&cpath, &cobweb)?;
        println!("wrote {}", cpath.display());
    }
    let mean: f64 = traj.outputs.iter().sum::<f64>() / traj.outputs.len() as f64;
    println!("mean output: {mean:.6}");
    Ok(0)
}

fn splitmix(z: u64) -> u64 {
    let z = z.wrapping_add(0x9e3779b97f4a7c15);
    let z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn cmd_ergodic_test(cli: &Cli, scc_arg: &str) -> anyhow::Result<i32> {
    let cfg = load_config(cli)?;
    let sys = cfg.system()?;
    let model = traffic::build(&sys, cfg.analysis.l_max, &cfg.build_options())?;
    let scc = metrics::scc_decompose(&model);
    let scc_id = if scc_arg == "auto" {
        // largest non-simple component
        (0..scc.components.len())
            .filter(|&i| !scc.flags[i].trivial && !scc.flags[i].simple_cycle)
            .max_by_key(|&i| scc.components[i].len())
            .context("no chaos-suspect component; nothing to test")?
    } else {
        scc_arg.parse::<usize>().context("--scc must be an id or 'auto'")?
    };
    let opts = ergodic::ErgodicOptions {
        n_points: cfg.analysis.ergodic.n_points,
        max_iters: cfg.analysis.ergodic.max_iters,
        alpha: cfg.analysis.ergodic.alpha,
        permutations: cfg.analysis.ergodic.permutations,
        seed: cfg.analysis.seed,
        run_length: 3,
    };
    let report = ergodic::ergodicity_protocol(&sys, &model, &scc, scc_id, &opts)?;
    println!("component: {} ({} states)", scc_id, scc.components[scc_id].len());
    println!("verdict: {}", report.verdict);
    if let Some(t) = report.converged_at {
        println!("non-rejection reached at iteration {t}");
    }
    println!(
        "pooled long-run average: {:.4} (95% CI [{:.4}, {:.4}])",
        report.pooled_average, report.ci_low, report.ci_high
    );
    let path = out_path(cli, &cfg, "ergodic.json");
    write_out(&path, &serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", path.display());
    Ok(0)
}

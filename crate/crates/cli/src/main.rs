use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmrs::criteria::CriterionKind;
use bmrs::experiment::{self, ExperimentConfig};
use bmrs::nn::checkpoint;
use bmrs::report::{self, Manifest, OutputSet};
use bmrs::verify::{self, ClosedForms, VerifyProfile};
use bmrs::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bmrs", version, about = "Structured pruning experiments with Bayesian model reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with continuous pruning; writes run.csv, model.ckpt and manifest.json.
    Train(Common),
    /// Post-training pruning curve and criterion rank correlations for a checkpoint.
    PrunePost {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One BMRS_U continuous run per p1 value (comma separated --p1) and seed.
    SweepP1(Common),
    /// Check the closed forms against quadrature and Monte-Carlo oracles.
    Verify {
        #[arg(long, value_enum, default_value = "default")]
        profile: Profile,
        /// Directory for verify.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Quick,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config (a manifest.json is accepted too). Defaults to the MNIST MLP setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// bmrs_n, bmrs_u, snr, mean_theta, l2 or none.
    #[arg(long)]
    criterion: Option<String>,
    /// Upper precision exponent for BMRS_U; a comma separated list for sweep-p1.
    #[arg(long)]
    p1: Option<String>,
    #[arg(long)]
    p2: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Dataset root; falls back to $BMRS_DATA_DIR, then ./data.
    #[arg(long, env = "BMRS_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Output directory; falls back to the config's output_dir, then ./bmrs-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn parse_p1_list(s: &str) -> Result<Vec<u32>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| config_error(format!("invalid p1 value {t:?}"))))
        .collect()
}

struct Setup {
    cfg: ExperimentConfig,
    p1s: Vec<u32>,
    out: PathBuf,
    data_dir: Option<PathBuf>,
}

fn setup(c: &Common) -> Result<Setup, Failure> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::mnist_mlp(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(k) = &c.criterion {
        cfg.criterion.criterion = k.parse::<CriterionKind>()?;
    }
    let p1s = match &c.p1 {
        Some(s) => parse_p1_list(s)?,
        None => vec![cfg.criterion.p1],
    };
    if let Some(&p1) = p1s.first() {
        cfg.criterion.p1 = p1;
    }
    if let Some(p2) = c.p2 {
        cfg.criterion.p2 = p2;
    }
    if c.threshold.is_some() {
        cfg.criterion.threshold = c.threshold;
    }
    cfg.validate()?;
    for &p1 in &p1s {
        let mut probe = cfg.criterion;
        probe.p1 = p1;
        if p1 >= probe.p2 {
            return Err(config_error(format!("p1 = {p1} must be below p2 = {}", probe.p2)));
        }
        probe.validate()?;
    }
    let out = c.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("bmrs-out"));
    cfg.output_dir = Some(out.clone());
    Ok(Setup { cfg, p1s, out, data_dir: c.data_dir.clone() })
}

fn create_dir(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| config_error(format!("cannot create {}: {e}", out.display())))
}

fn train(c: &Common, outs: &mut OutputSet) -> Result<(), Failure> {
    let s = setup(c)?;
    if s.p1s.len() > 1 {
        return Err(config_error("train takes a single --p1 value; use sweep-p1 for lists"));
    }
    let data = s.cfg.load_data(s.data_dir.as_deref())?;
    create_dir(&s.out)?;
    let run = experiment::run_train(&s.cfg, &data)?;
    let last = run.final_record();
    let run_csv = outs.path(&s.out, "run.csv");
    report::write_run_csv(&run_csv, &run.records, &experiment::criterion_label(&s.cfg.criterion), s.cfg.seed)?;
    let ckpt = outs.path(&s.out, "model.ckpt");
    checkpoint::save(&run.net, &ckpt)?;
    let manifest = outs.path(&s.out, "manifest.json");
    let metrics = json!({
        "test_accuracy": last.test_accuracy,
        "compression": last.compression,
        "alive_counts": last.alive_counts,
    });
    Manifest::new("train", &s.cfg, metrics, &outs.paths()[..2]).write(&manifest)?;
    println!("accuracy {:.2}% compression {:.2}% alive {:?} -> {}", last.test_accuracy, last.compression, last.alive_counts, s.out.display());
    Ok(())
}

fn prune_post(c: &Common, ckpt: &Path, outs: &mut OutputSet) -> Result<(), Failure> {
    let s = setup(c)?;
    let net = checkpoint::load(ckpt).map_err(|e| config_error(format!("{}: {e}", ckpt.display())))?;
    let data = s.cfg.load_data(s.data_dir.as_deref())?;
    let post = experiment::run_prune_post(&s.cfg, &net, &data)?;
    create_dir(&s.out)?;
    let label = experiment::criterion_label(&s.cfg.criterion);
    let curve = outs.path(&s.out, "curve.csv");
    report::write_curve_csv(&curve, post.origin_accuracy, &net.n_alive_per_gate(), &post.curve.points, &label, s.cfg.seed)?;
    let sp = outs.path(&s.out, "spearman.csv");
    report::write_spearman_csv(&sp, &post.labels, &post.spearman)?;
    let stop = post.curve.points.iter().find(|p| p.stop);
    let metrics = json!({
        "origin_accuracy": post.origin_accuracy,
        "stop_compression": stop.map(|p| p.compression),
        "stop_accuracy": stop.map(|p| p.accuracy),
        "checkpoint": ckpt.display().to_string(),
    });
    let manifest = outs.path(&s.out, "manifest.json");
    Manifest::new("prune-post", &s.cfg, metrics, &outs.paths()[..2]).write(&manifest)?;
    println!("origin accuracy {:.2}%, {} curve points -> {}", post.origin_accuracy, post.curve.points.len(), s.out.display());
    Ok(())
}

fn sweep(c: &Common, outs: &mut OutputSet) -> Result<(), Failure> {
    let s = setup(c)?;
    let mut cfg = s.cfg.clone();
    cfg.criterion.criterion = CriterionKind::BmrsU;
    let rows = experiment::run_sweep(&cfg, &s.p1s, s.data_dir.as_deref())?;
    create_dir(&s.out)?;
    let csv = outs.path(&s.out, "sweep.csv");
    report::write_sweep_csv(&csv, &rows)?;
    let manifest = outs.path(&s.out, "manifest.json");
    Manifest::new("sweep-p1", &cfg, json!({ "rows": rows, "p1": s.p1s }), &outs.paths()[..1]).write(&manifest)?;
    for r in &rows {
        println!("p1 {:>2} seed {} compression {:.2}% accuracy {:.2}%", r.p1, r.seed, r.compression, r.accuracy);
    }
    Ok(())
}

fn verify_cmd(profile: Profile, out: Option<&Path>, seed: Option<u64>, outs: &mut OutputSet) -> Result<(), Failure> {
    let mut p = match profile {
        Profile::Default => VerifyProfile::default_profile(),
        Profile::Quick => VerifyProfile::quick(),
    };
    if let Some(seed) = seed {
        p.seed = seed;
    }
    let rep = verify::run(&p, &ClosedForms::default());
    let text = serde_json::to_string_pretty(&rep).map_err(Error::from)? + "\n";
    for s in &rep.suites {
        eprintln!(
            "{:<22} {:>5}/{:<5} worst {:.3e} (tol {:.0e}, {} allowed) {}",
            s.name,
            s.passed,
            s.checks,
            s.worst,
            s.tolerance,
            s.allowed_failures,
            if s.ok() { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = outs.path(dir, "verify.json");
        std::fs::write(&path, &text).map_err(Error::from)?;
    }
    print!("{text}");
    if rep.all_passed {
        Ok(())
    } else {
        Err(Failure { code: 3, message: "verification failed".into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut outs = OutputSet::default();
    let result = match &cli.command {
        Command::Train(c) => train(c, &mut outs),
        Command::PrunePost { common, checkpoint } => prune_post(common, checkpoint, &mut outs),
        Command::SweepP1(c) => sweep(c, &mut outs),
        Command::Verify { profile, out, seed } => verify_cmd(*profile, out.as_deref(), *seed, &mut outs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            // A failed verification keeps its report; anything else leaves no partial outputs.
            if f.code != 3 {
                outs.remove_all();
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

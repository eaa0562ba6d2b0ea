use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtn_core::commands::{
    bench, evaluate, load_network, train, warp_demo, write_warp_demo, TrainOptions,
    CHECKPOINT_FILE, DEFAULT_LR, METRICS_FILE,
};
use dtn_core::data::{gen_blobs, load_png, write_dataset};
use dtn_core::gradcheck::{run_suite, DEFAULT_TOL};
use dtn_core::model::ModelKind;
use dtn_core::DtnError;

#[derive(Parser)]
#[command(
    name = "dtn",
    version,
    about = "Dense transformer networks on synthetic boundary segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Train on streamed synthetic samples.
    Train {
        #[arg(long, default_value = "dtn")]
        model: ModelKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_LR)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out synthetic samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expected model kind; a checkpoint of the other kind is rejected.
        #[arg(long)]
        model: Option<ModelKind>,
        /// Expected input size; a checkpoint trained at another size is rejected.
        #[arg(long)]
        size: Option<usize>,
        /// Also write the result as a one-row metrics CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw the learned fiducials and deformed grid over an image.
    WarpDemo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward+backward steps of both models.
    Bench {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a directory of numbered synthetic image/label PNG pairs.
    GenData {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Check(String),
    Usage(DtnError),
}

impl From<DtnError> for Failure {
    fn from(e: DtnError) -> Self {
        Failure::Usage(e)
    }
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or("n/a".into(), |a| format!("{a:.4}"))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gradcheck { seed, tol } => {
            let results = run_suite(seed, tol)?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            for r in &results {
                println!(
                    "{} {:<32} max_rel_err {:.3e} ({} entries)",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.entries
                );
            }
            println!(
                "{} of {} checks passed at tol {tol:e}",
                results.len() - failed.len(),
                results.len()
            );
            if !failed.is_empty() {
                return Err(Failure::Check(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Train {
            model,
            seed,
            steps,
            size,
            lr,
            out,
        } => {
            let mut opts = TrainOptions::new(model, seed, steps, size);
            opts.learning_rate = lr;
            opts.out = Some(out.clone());
            let r = train(&opts)?;
            if let (Some(a), Some(b)) = (r.initial_loss(), r.final_loss()) {
                println!(
                    "initial loss {a:.6}  final loss {b:.6}  ({:.1}% reduction)",
                    100.0 * (1.0 - b / a)
                );
            }
            println!("{} steps in {:.1}s", steps, r.seconds);
            println!("wrote {}", out.join(CHECKPOINT_FILE).display());
            println!("wrote {}", out.join(METRICS_FILE).display());
        }
        Command::Eval {
            ckpt,
            n,
            seed,
            model,
            size,
            csv,
        } => {
            let mut net = load_network(&ckpt, None)?;
            let cfg = net.config().clone();
            if let Some(m) = model.filter(|&m| m != cfg.kind) {
                return Err(DtnError::Config(format!(
                    "checkpoint config mismatch in kind: expected {m}, checkpoint has {}",
                    cfg.kind
                ))
                .into());
            }
            if let Some(s) = size.filter(|&s| s != cfg.height) {
                return Err(DtnError::Config(format!(
                    "checkpoint config mismatch in height: expected {s}, checkpoint has {}",
                    cfg.height
                ))
                .into());
            }
            let r = evaluate(&mut net, n, seed)?;
            println!("model {}  samples {}", cfg.kind, r.samples);
            println!("loss      {:.6}", r.loss);
            println!(
                "accuracy  {:.6}  (majority rate {:.6})",
                r.accuracy, r.majority_rate
            );
            println!("mean_iou  {:.6}", r.mean_iou);
            println!("auc       {}", fmt_auc(r.auc));
            if let Some(path) = csv {
                let steps = dtn_core::checkpoint::Checkpoint::load(&ckpt)?.steps;
                let mut w = dtn_core::metrics::MetricsWriter::create(&path)?;
                w.write(&dtn_core::metrics::MetricsRow {
                    run_id: format!("eval-{}-s{seed}", cfg.kind),
                    step: steps,
                    loss: r.loss,
                    accuracy: r.accuracy,
                    mean_iou: r.mean_iou,
                    auc: r.auc,
                })?;
            }
        }
        Command::WarpDemo { ckpt, image, out } => {
            let mut net = load_network(&ckpt, None)?;
            let img = load_png(&image)?;
            let r = warp_demo(&mut net, &img)?;
            let (a, b) = write_warp_demo(&r, &out)?;
            println!(
                "max fiducial shift {:.6} (normalized)",
                r.max_fiducial_shift
            );
            println!("max grid shift     {:.6} px", r.max_grid_shift);
            println!("wrote {}", a.display());
            println!("wrote {}", b.display());
        }
        Command::Bench { size, iters, seed } => {
            print!("{}", bench(size, iters, seed)?.table());
        }
        Command::GenData { n, size, seed, out } => {
            let samples = (0..n as u64)
                .map(|i| gen_blobs(seed.wrapping_add(i), size, size, 1 + (i % 3) as usize))
                .collect::<dtn_core::Result<Vec<_>>>()?;
            write_dataset(&out, &samples, 2)?;
            println!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

/// `DTN_SEED` wins over `--seed` when set.
fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var("DTN_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::Usage(DtnError::Config(format!(
                "DTN_SEED={v:?} is not an unsigned integer"
            )))
        }),
        Err(_) => Ok(None),
    }
}

fn apply_seed(cmd: &mut Command, seed: u64) {
    match cmd {
        Command::Gradcheck { seed: s, .. }
        | Command::Train { seed: s, .. }
        | Command::Eval { seed: s, .. }
        | Command::Bench { seed: s, .. }
        | Command::GenData { seed: s, .. } => *s = seed,
        Command::WarpDemo { .. } => {}
    }
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    let result = seed_override().and_then(|seed| {
        if let Some(seed) = seed {
            apply_seed(&mut cli.command, seed);
        }
        run(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

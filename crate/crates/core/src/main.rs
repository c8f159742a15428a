use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ginas::defense::DefenseConfig;
use ginas::gradcheck::{first_order_suite, second_order_suite, FIRST_ORDER_TOL, SECOND_ORDER_TOL};
use ginas::harness::{persist, run_attack, search_diagnostic, DatasetSource, ExperimentConfig, HarnessMode};
use ginas::victim::ClassifierKind;

/// Gradient inversion with a training-free search over image decoders.
#[derive(Parser)]
#[command(name = "ginas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full attack and write a report, CSV tables and images.
    Attack(ExperimentArgs),
    /// Recover every candidate and relate initial loss to final PSNR.
    SearchDiag(ExperimentArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per operation and for the second-order chain.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML configuration, or a report.toml from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of candidate architectures [default: 50].
    #[arg(long)]
    n: Option<usize>,
    /// full, upsample_only, connection_only or fixed_genome [default: full].
    #[arg(long)]
    mode: Option<HarnessMode>,
    /// none, noise:<sigma>, clip:<bound>, sparsify:<rate> or
    /// sparsify-layer:<rate> [default: none].
    #[arg(long)]
    defense: Option<DefenseConfig>,
    /// Output directory [default: ginas-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// synthetic, synthetic:<C>x<side>, cifar10:<path> or dir:<path>.
    #[arg(long)]
    dataset: Option<DatasetSource>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated record indices for file datasets.
    #[arg(long, value_delimiter = ',')]
    indices: Option<Vec<usize>>,
    /// tiny_convnet, lenet_zhu_like or mini_resnet.
    #[arg(long)]
    victim: Option<ClassifierKind>,
    #[arg(long)]
    classes: Option<usize>,
    /// Recovery iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Feed raw gradients to Adam instead of their signs.
    #[arg(long)]
    unsigned: bool,
    /// Comma-separated decoder widths; their count sets the level count.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Add same-level skips to every candidate.
    #[arg(long)]
    diagonal_skips: bool,
}

impl ExperimentArgs {
    fn resolve(self) -> ginas::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.master_seed, self.seed);
        set!(cfg.search.n, self.n);
        set!(cfg.search.mode, self.mode);
        set!(cfg.defense, self.defense);
        set!(cfg.dataset, self.dataset);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.indices, self.indices);
        set!(cfg.victim.kind, self.victim);
        set!(cfg.victim.classes, self.classes);
        set!(cfg.recovery.iterations, self.iterations);
        set!(cfg.recovery.lr, self.lr);
        set!(cfg.search.widths, self.widths);
        if self.unsigned {
            cfg.recovery.signed_gradient = false;
        }
        if self.diagonal_skips {
            cfg.search.diagonal_skips = true;
        }
        if let Some(out) = self.out {
            cfg.output_dir = Some(out);
        }
        let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("ginas-out"));
        Ok((cfg, out))
    }
}

fn attack(args: ExperimentArgs) -> ginas::Result<bool> {
    let (cfg, out) = args.resolve()?;
    let mut report = run_attack(&cfg);
    persist(&mut report, &out)?;
    if let Some(f) = &report.failure {
        eprintln!("attack failed at stage {:?}: {}", f.stage, f.message);
        return Ok(false);
    }
    let sel = report.selected.as_ref().expect("successful run has a selection");
    let m = report.metrics.as_ref().expect("successful run has metrics");
    println!("selected candidate {} (initial loss {:.6})", sel.genome_id, sel.initial_loss);
    println!("final loss {:.6}", report.final_loss.unwrap_or(f64::NAN));
    println!("mean PSNR {:.3} dB", m.mean_psnr);
    if let Some(s) = m.mean_ssim {
        println!("mean SSIM {s:.4}");
    }
    if report.labels_partial {
        println!("warning: label inference was partial");
    }
    println!("report written to {}", out.join("report.toml").display());
    Ok(true)
}

fn search_diag(args: ExperimentArgs) -> ginas::Result<bool> {
    let (cfg, out) = args.resolve()?;
    let diag = match search_diagnostic(&cfg) {
        Ok(d) => d,
        Err(f) => {
            eprintln!("diagnostic failed at stage {:?}: {}", f.stage, f.message);
            return Ok(false);
        }
    };
    fs::create_dir_all(&out)?;
    let path = out.join("search_diag.csv");
    diag.write_csv(fs::File::create(&path)?)?;
    diag.write_csv(std::io::stdout().lock())?;
    match diag.tau {
        Some(t) => println!("kendall_tau {t:.4}"),
        None => println!("kendall_tau undefined"),
    }
    println!(
        "selected {} psnr {:.3} median {:.3}",
        diag.selected,
        diag.selected_psnr(),
        diag.median_psnr()
    );
    Ok(true)
}

fn gradcheck(seed: u64, instances: usize) -> ginas::Result<bool> {
    let mut ok = true;
    let first = first_order_suite(seed, instances.div_ceil(10).max(1))?;
    let second = second_order_suite(seed.wrapping_add(1), instances)?;
    for (outcomes, tol, label) in [(&first, FIRST_ORDER_TOL, "first"), (&second, SECOND_ORDER_TOL, "second")] {
        let worst = outcomes.iter().map(|o| o.rel_err).fold(0.0, f64::max);
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed(tol)).collect();
        for f in &failed {
            println!("FAIL {label}-order {} rel_err {:.3e}", f.name, f.rel_err);
        }
        println!(
            "{label}-order: {} checks, worst rel_err {worst:.3e}, tolerance {tol:.0e}",
            outcomes.len()
        );
        ok &= failed.is_empty();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Attack(a) => attack(a),
        Command::SearchDiag(a) => search_diag(a),
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

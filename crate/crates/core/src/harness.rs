//! End-to-end attack orchestration: configuration, seeding, the pipeline
//! itself and report persistence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data;
use crate::defense::{apply_defense, DefenseConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::nas::{self, build_decoder, sample_genome, ArchGenome, SearchMode, DEFAULT_WIDTHS};
use crate::recovery::{recover, write_trace_csv, RecoveryOptions};
use crate::search::{kendall_tau, select_optimal, write_scores_csv, CandidateScore, MatchingProblem};
use crate::tensor::Tensor;
use crate::victim::{compute_gradients, infer_labels, Classifier, ClassifierKind, ClassifierSpec, PrivateBatch};

/// Seed for one role and index under a master seed; the first eight bytes
/// of `sha256("master|role|index")`, little endian.
pub fn derive_seed(master: u64, role: &str, index: u64) -> u64 {
    let digest = Sha256::digest(format!("{master}|{role}|{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Smooth random blobs; the generator seed is derived from the master seed.
    Synthetic { channels: usize, side: usize },
    Cifar10 { path: PathBuf },
    ImageDir { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { channels: 1, side: 16 }
    }
}

/// `synthetic`, `synthetic:<channels>x<side>`, `cifar10:<path>` or
/// `dir:<path>`.
impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        match (kind, arg) {
            ("synthetic", None) => Ok(DatasetSource::default()),
            ("synthetic", Some(a)) => {
                let (c, side) = a
                    .split_once('x')
                    .ok_or_else(|| Error::invalid(format!("expected <channels>x<side>, got '{a}'")))?;
                let parse = |v: &str| v.parse::<usize>().map_err(|e| Error::invalid(format!("'{v}': {e}")));
                Ok(DatasetSource::Synthetic {
                    channels: parse(c)?,
                    side: parse(side)?,
                })
            }
            ("cifar10", Some(p)) => Ok(DatasetSource::Cifar10 { path: p.into() }),
            ("dir", Some(p)) => Ok(DatasetSource::ImageDir { path: p.into() }),
            _ => Err(Error::invalid(format!("unknown dataset source '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub kind: ClassifierKind,
    pub classes: usize,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            kind: ClassifierKind::TinyConvnet,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessMode {
    Full,
    UpsampleOnly,
    ConnectionOnly,
    /// Every candidate uses the base architecture.
    FixedGenome,
}

impl HarnessMode {
    pub const ALL: [HarnessMode; 4] = [
        HarnessMode::Full,
        HarnessMode::UpsampleOnly,
        HarnessMode::ConnectionOnly,
        HarnessMode::FixedGenome,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HarnessMode::Full => "full",
            HarnessMode::UpsampleOnly => "upsample_only",
            HarnessMode::ConnectionOnly => "connection_only",
            HarnessMode::FixedGenome => "fixed_genome",
        }
    }
}

impl fmt::Display for HarnessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HarnessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown search mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub mode: HarnessMode,
    pub n: usize,
    pub widths: Vec<usize>,
    /// OR the identity into every skip matrix.
    pub diagonal_skips: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: HarnessMode::Full,
            n: 50,
            widths: DEFAULT_WIDTHS.to_vec(),
            diagonal_skips: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub batch_size: usize,
    /// Record indices for file-backed datasets; defaults to `0..batch_size`.
    pub indices: Vec<usize>,
    pub dataset: DatasetSource,
    pub victim: VictimConfig,
    pub defense: DefenseConfig,
    pub search: SearchConfig,
    pub recovery: RecoveryOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            output_dir: None,
            batch_size: 1,
            indices: Vec::new(),
            dataset: DatasetSource::default(),
            victim: VictimConfig::default(),
            defense: DefenseConfig::none(),
            search: SearchConfig::default(),
            recovery: RecoveryOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wrapped {
            config: ExperimentConfig,
        }
        // A saved report nests the configuration under `[config]`.
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
        let parsed = if value.contains_key("config") {
            toml::from_str::<Wrapped>(text).map(|w| w.config)
        } else {
            toml::from_str::<ExperimentConfig>(text)
        };
        parsed.map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > crate::victim::MAX_BATCH {
            return Err(Error::invalid(format!("batch size {} out of range", self.batch_size)));
        }
        if !self.indices.is_empty() && self.indices.len() != self.batch_size {
            return Err(Error::invalid("number of indices must equal the batch size"));
        }
        if self.search.n == 0 {
            return Err(Error::invalid("search needs at least one candidate"));
        }
        if self.search.widths.is_empty() {
            return Err(Error::invalid("at least one decoder level is required"));
        }
        self.defense.validate()?;
        self.recovery.validate()
    }

    fn record_indices(&self) -> Vec<usize> {
        if self.indices.is_empty() {
            (0..self.batch_size).collect()
        } else {
            self.indices.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Victim,
    Defense,
    Labels,
    Search,
    Recovery,
    Metrics,
    Persist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedGenome {
    pub genome_id: usize,
    pub initial_loss: f64,
    pub record: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub genome_id: usize,
    pub initial_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_s: f64,
    pub search_s: f64,
    pub recovery_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub true_labels: Vec<usize>,
    pub inferred_labels: Vec<usize>,
    pub labels_partial: bool,
    pub selected: Option<SelectedGenome>,
    pub final_loss: Option<f64>,
    /// Hex FNV-1a digest of the optimized decoder parameters.
    pub params_checksum: Option<String>,
    pub metrics: Option<MetricReport>,
    pub clamped_pixels: usize,
    pub failure: Option<StageFailure>,
    pub candidates: Vec<ScoreRow>,
    pub loss_trace: Vec<TracePoint>,
    pub timings: Timings,
    #[serde(skip)]
    pub reconstruction: Option<Tensor>,
    #[serde(skip)]
    pub original: Option<Tensor>,
}

impl ExperimentReport {
    fn new(config: ExperimentConfig) -> Self {
        ExperimentReport {
            config,
            true_labels: Vec::new(),
            inferred_labels: Vec::new(),
            labels_partial: false,
            selected: None,
            final_loss: None,
            params_checksum: None,
            metrics: None,
            clamped_pixels: 0,
            failure: None,
            candidates: Vec::new(),
            loss_trace: Vec::new(),
            timings: Timings::default(),
            reconstruction: None,
            original: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.mean_psnr)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("report", e.to_string()))
    }

    /// The report with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        ExperimentReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn scores(&self) -> Vec<CandidateScore> {
        self.candidates
            .iter()
            .map(|r| CandidateScore {
                genome_id: r.genome_id,
                initial_loss: r.initial_loss,
            })
            .collect()
    }
}

/// Everything up to candidate generation, shared by the attack and the
/// search diagnostic.
pub struct Prepared {
    pub batch: PrivateBatch,
    pub problem: MatchingProblem,
    pub labels_partial: bool,
    pub genomes: Vec<ArchGenome>,
    pub z0: Tensor,
    pub out_shape: [usize; 4],
}

fn load_batch(cfg: &ExperimentConfig) -> Result<PrivateBatch> {
    let indices = cfg.record_indices();
    match &cfg.dataset {
        DatasetSource::Synthetic { channels, side } => data::synthetic_batch(
            derive_seed(cfg.master_seed, "dataset", 0),
            cfg.batch_size,
            *channels,
            *side,
            cfg.victim.classes,
        ),
        DatasetSource::Cifar10 { path } => data::load_cifar10(path, &indices),
        DatasetSource::ImageDir { path } => data::load_image_dir(path, &indices),
    }
}

/// Base genome for restricted modes and the fixed-genome baseline.
pub fn base_genome(cfg: &ExperimentConfig) -> ArchGenome {
    ArchGenome::baseline(&cfg.search.widths, derive_seed(cfg.master_seed, "base", 0))
}

/// The candidate list; candidate `i` depends only on the master seed and `i`.
pub fn candidate_genomes(cfg: &ExperimentConfig) -> Vec<ArchGenome> {
    let base = base_genome(cfg);
    (0..cfg.search.n)
        .map(|i| {
            let seed = derive_seed(cfg.master_seed, "genome", i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = match cfg.search.mode {
                HarnessMode::Full => sample_genome(&mut rng, SearchMode::Full, &base),
                HarnessMode::UpsampleOnly => sample_genome(&mut rng, SearchMode::UpsampleOnly, &base),
                HarnessMode::ConnectionOnly => sample_genome(&mut rng, SearchMode::ConnectionOnly, &base),
                HarnessMode::FixedGenome => ArchGenome {
                    init_seed: if i == 0 { base.init_seed } else { seed },
                    ..base.clone()
                },
            };
            if cfg.search.diagonal_skips {
                g.skips = g.skips.with_diagonal();
            }
            g
        })
        .collect()
}

fn tagged<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, StageFailure> {
    r.map_err(|e| StageFailure {
        stage,
        message: e.to_string(),
    })
}

/// Loads data, computes and perturbs the client gradient, infers labels and
/// draws the candidates and latent.
pub fn prepare(cfg: &ExperimentConfig) -> std::result::Result<Prepared, StageFailure> {
    tagged(Stage::Config, cfg.validate())?;
    let batch = tagged(Stage::Load, load_batch(cfg))?;
    let out_shape: [usize; 4] = batch.images.shape().try_into().expect("batch is 4-d");
    let victim = tagged(
        Stage::Victim,
        Classifier::build(ClassifierSpec {
            kind: cfg.victim.kind,
            input_shape: out_shape,
            classes: cfg.victim.classes,
            seed: derive_seed(cfg.master_seed, "victim", 0),
        }),
    )?;
    let clean = tagged(Stage::Victim, compute_gradients(&victim, &batch))?;
    let defense = DefenseConfig {
        seed: derive_seed(cfg.master_seed, "defense", cfg.defense.seed),
        ..cfg.defense
    };
    let observed = tagged(Stage::Defense, apply_defense(&clean, &defense))?;
    let inferred = tagged(Stage::Labels, infer_labels(&observed, &victim))?;
    let latent = tagged(Stage::Search, nas::latent_shape_for(out_shape, cfg.search.widths.len()))?;
    let z0 = nas::sample_latent(latent, derive_seed(cfg.master_seed, "latent", 0));
    Ok(Prepared {
        problem: MatchingProblem::with_labels(victim, observed, defense, inferred.labels),
        labels_partial: inferred.partial,
        batch,
        genomes: candidate_genomes(cfg),
        z0,
        out_shape,
    })
}

/// Runs the whole attack. Failures are recorded in the report with the
/// stage that raised them.
pub fn run_attack(cfg: &ExperimentConfig) -> ExperimentReport {
    let mut report = ExperimentReport::new(cfg.clone());
    if let Err(f) = attack_into(cfg, &mut report) {
        report.failure = Some(f);
    }
    report
}

fn attack_into(cfg: &ExperimentConfig, report: &mut ExperimentReport) -> std::result::Result<(), StageFailure> {
    let t0 = Instant::now();
    let prep = prepare(cfg)?;
    report.true_labels = prep.batch.labels.clone();
    report.inferred_labels = prep.problem.labels.clone();
    report.labels_partial = prep.labels_partial;
    report.original = Some(prep.batch.images.clone());
    report.timings.load_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (best, scores) = tagged(
        Stage::Search,
        select_optimal(&prep.genomes, &prep.z0, &prep.problem, prep.out_shape),
    )?;
    report.candidates = scores
        .iter()
        .map(|s| ScoreRow {
            genome_id: s.genome_id,
            initial_loss: s.initial_loss,
        })
        .collect();
    report.selected = Some(SelectedGenome {
        genome_id: best,
        initial_loss: scores[best].initial_loss,
        record: prep.genomes[best].to_record(),
    });
    report.timings.search_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let latent: [usize; 4] = prep.z0.shape().try_into().expect("latent is 4-d");
    let mut decoder = tagged(Stage::Recovery, build_decoder(&prep.genomes[best], latent, prep.out_shape))?;
    let result = recover(&mut decoder, &prep.z0, &prep.problem, &cfg.recovery);
    report.timings.recovery_s = t2.elapsed().as_secs_f64();
    let result = match result {
        Ok(r) => r,
        Err(abort) => {
            report.loss_trace = to_points(&abort.trace);
            return Err(StageFailure {
                stage: Stage::Recovery,
                message: abort.error.to_string(),
            });
        }
    };
    report.loss_trace = to_points(&result.trace);
    report.final_loss = Some(result.final_loss);
    report.params_checksum = Some(format!("{:016x}", result.params_checksum));
    report.metrics = Some(tagged(
        Stage::Metrics,
        metrics::evaluate(&result.reconstruction, &prep.batch.images),
    )?);
    report.reconstruction = Some(result.reconstruction);
    report.timings.total_s = t0.elapsed().as_secs_f64();
    Ok(())
}

fn to_points(trace: &[(usize, f64)]) -> Vec<TracePoint> {
    trace.iter().map(|&(step, loss)| TracePoint { step, loss }).collect()
}

/// Writes `report.toml`, `candidates.csv`, `loss.csv` and image files into
/// `dir`. Reconstructions are saved in aligned order.
pub fn persist(report: &mut ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_scores_csv(&report.scores(), fs::File::create(dir.join("candidates.csv"))?)?;
    let trace: Vec<(usize, f64)> = report.loss_trace.iter().map(|p| (p.step, p.loss)).collect();
    write_trace_csv(&trace, fs::File::create(dir.join("loss.csv"))?)?;
    let mut clamped = 0;
    if let Some(orig) = &report.original {
        for (i, img) in split_batch(orig)?.iter().enumerate() {
            clamped += data::write_image(img, &dir.join(image_name("original", i, img)))?;
        }
    }
    if let (Some(recon), Some(m)) = (&report.reconstruction, &report.metrics) {
        let images = split_batch(recon)?;
        for (i, &j) in m.alignment.iter().enumerate() {
            let img = &images[i];
            clamped += data::write_image(img, &dir.join(image_name("reconstruction", j, img)))?;
        }
    }
    report.clamped_pixels = clamped;
    fs::write(dir.join("report.toml"), report.to_toml()?)?;
    Ok(())
}

fn image_name(prefix: &str, i: usize, img: &Tensor) -> String {
    let ext = if img.shape()[0] == 1 { "pgm" } else { "ppm" };
    format!("{prefix}_{i:03}.{ext}")
}

fn split_batch(t: &Tensor) -> Result<Vec<Tensor>> {
    let b = t.shape()[0];
    let n = t.numel() / b;
    (0..b)
        .map(|i| Tensor::new(&t.shape()[1..], t.data()[i * n..(i + 1) * n].to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub genome_id: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostic {
    pub rows: Vec<DiagRow>,
    pub selected: usize,
    pub tau: Option<f64>,
}

impl SearchDiagnostic {
    pub fn selected_psnr(&self) -> f64 {
        self.rows[self.selected].final_psnr
    }

    pub fn median_psnr(&self) -> f64 {
        median(self.rows.iter().map(|r| r.final_psnr).collect())
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "genome_id,initial_loss,final_loss,final_psnr")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{}", r.genome_id, r.initial_loss, r.final_loss, r.final_psnr)?;
        }
        Ok(())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Recovers every candidate with the same budget and pairs its initial loss
/// with its final PSNR.
pub fn search_diagnostic(cfg: &ExperimentConfig) -> std::result::Result<SearchDiagnostic, StageFailure> {
    let prep = prepare(cfg)?;
    let latent: [usize; 4] = prep.z0.shape().try_into().expect("latent is 4-d");
    let (selected, scores) = tagged(
        Stage::Search,
        select_optimal(&prep.genomes, &prep.z0, &prep.problem, prep.out_shape),
    )?;
    let mut rows = Vec::with_capacity(scores.len());
    for (g, s) in prep.genomes.iter().zip(&scores) {
        let mut decoder = tagged(Stage::Recovery, build_decoder(g, latent, prep.out_shape))?;
        let r = recover(&mut decoder, &prep.z0, &prep.problem, &cfg.recovery).map_err(|a| StageFailure {
            stage: Stage::Recovery,
            message: format!("candidate {}: {}", s.genome_id, a.error),
        })?;
        let m = tagged(Stage::Metrics, metrics::evaluate(&r.reconstruction, &prep.batch.images))?;
        rows.push(DiagRow {
            genome_id: s.genome_id,
            initial_loss: s.initial_loss,
            final_loss: r.final_loss,
            final_psnr: m.mean_psnr,
        });
    }
    let a: Vec<f64> = rows.iter().map(|r| r.initial_loss).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.final_psnr).collect();
    Ok(SearchDiagnostic {
        tau: kendall_tau(&a, &b).ok(),
        rows,
        selected,
    })
}

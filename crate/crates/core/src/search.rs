//! Training-free ranking of candidate decoders by their initial
//! gradient-matching loss, plus the rank-correlation diagnostic.

use std::io::Write;

use crate::defense::{estimate_transform, DefenseConfig};
use crate::error::{Error, Result};
use crate::nas::{build_decoder, ArchGenome, Decoder};
use crate::tensor::{cosine_distance, Graph, Tensor};
use crate::victim::{infer_labels, model_gradients, Classifier, GradientSet};

/// Everything the attacker holds: the victim model, the observed gradient,
/// the assumed defense and the labels used for dummy gradients.
#[derive(Debug, Clone)]
pub struct MatchingProblem {
    pub victim: Classifier,
    pub observed: GradientSet,
    pub defense: DefenseConfig,
    pub labels: Vec<usize>,
}

impl MatchingProblem {
    /// Labels are inferred from the observed gradient.
    pub fn new(victim: Classifier, observed: GradientSet, defense: DefenseConfig) -> Result<Self> {
        let labels = infer_labels(&observed, &victim)?.labels;
        Ok(Self::with_labels(victim, observed, defense, labels))
    }

    pub fn with_labels(victim: Classifier, observed: GradientSet, defense: DefenseConfig, labels: Vec<usize>) -> Self {
        MatchingProblem {
            victim,
            observed,
            defense,
            labels,
        }
    }

    /// `D(T(grad_theta L(x)), g)` as a node of `x`'s graph (or of `graph`
    /// when `x` is untracked).
    pub fn loss(&self, graph: &Graph, x: &Tensor) -> Result<Tensor> {
        let dummy = model_gradients(&self.victim, graph, x, &self.labels)?;
        let transformed = estimate_transform(&dummy, &self.observed, &self.defense)?;
        cosine_distance(&transformed, &self.observed.tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub genome_id: usize,
    pub initial_loss: f64,
}

/// Matching loss of a freshly initialized decoder; no parameter changes.
pub fn initial_loss(decoder: &Decoder, z0: &Tensor, problem: &MatchingProblem) -> Result<f64> {
    let graph = Graph::new();
    let x = decoder.generate(z0)?;
    let loss = problem.loss(&graph, &x)?.item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, value: loss });
    }
    Ok(loss)
}

/// Index of the smallest score; ties go to the lowest index.
pub fn argmin(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("argmin of an empty list"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Scores every genome in index order and returns the winner with the full
/// score table.
pub fn select_optimal(
    genomes: &[ArchGenome],
    z0: &Tensor,
    problem: &MatchingProblem,
    out_shape: [usize; 4],
) -> Result<(usize, Vec<CandidateScore>)> {
    if genomes.is_empty() {
        return Err(Error::invalid("no candidate genomes"));
    }
    let scores = genomes
        .iter()
        .enumerate()
        .map(|(genome_id, g)| {
            let decoder = build_decoder(g, latent_of(z0)?, out_shape)?;
            Ok(CandidateScore {
                genome_id,
                initial_loss: initial_loss(&decoder, z0, problem)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = scores.iter().map(|s| s.initial_loss).collect();
    Ok((argmin(&losses)?, scores))
}

fn latent_of(z0: &Tensor) -> Result<[usize; 4]> {
    z0.shape()
        .try_into()
        .map_err(|_| Error::invalid(format!("latent must be 4-d, got {:?}", z0.shape())))
}

/// Tie-adjusted Kendall rank correlation.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "kendall_tau needs equal lengths of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kendall_tau inputs must be finite"));
    }
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].partial_cmp(&a[j]).expect("finite");
            let db = b[i].partial_cmp(&b[j]).expect("finite");
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + ties_a) as f64;
    let n2 = (concordant + discordant + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::invalid("kendall_tau undefined for constant input"));
    }
    Ok((concordant - discordant) as f64 / (n1 * n2).sqrt())
}

pub fn write_scores_csv(scores: &[CandidateScore], mut out: impl Write) -> Result<()> {
    writeln!(out, "genome_id,initial_loss")?;
    for s in scores {
        writeln!(out, "{},{:e}", s.genome_id, s.initial_loss)?;
    }
    Ok(())
}

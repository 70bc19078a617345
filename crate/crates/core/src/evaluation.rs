//! Bilingual retrieval metrics and the injected-vs-zeroed loss comparison.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SentencePair;
use crate::models::{TeacherLayer, ToyModels};
use crate::projector::ProjectorState;
use crate::stage_a::{encode_source, teacher_vector};
use crate::stage_b::{sft_loss, zeroed_loss, StageBBundle, StageBExample};
use crate::tensor::{l2_norm, Matrix};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mrr: f64,
    pub mean_rank: f64,
    pub n: usize,
    /// Queries whose gold similarity was tied with another candidate.
    pub tied_queries: usize,
}

impl RetrievalReport {
    /// Metrics from 1-based gold ranks.
    pub fn from_ranks(ranks: &[usize], tied_queries: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = ranks.len() as f64;
        let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            r_at_1: frac(1),
            r_at_5: frac(5),
            r_at_10: frac(10),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            mean_rank: ranks.iter().sum::<usize>() as f64 / n,
            n: ranks.len(),
            tied_queries,
        })
    }

    pub fn ordering_holds(&self) -> bool {
        self.r_at_1 <= self.r_at_5
            && self.r_at_5 <= self.r_at_10
            && self.mrr >= self.r_at_1
            && self.mean_rank >= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalOutcome {
    pub report: RetrievalReport,
    /// Gold rank per query, 1-based.
    pub ranks: Vec<usize>,
}

/// Ranks the gold candidate `i` in row `i` of `sim` (queries × candidates).
/// `rank = 1 + #{j : s_ij > s_ii} + #{j < i : s_ij == s_ii}`: ties go to
/// the lower candidate index.
pub fn evaluate_similarity(sim: &Matrix) -> Result<RetrievalOutcome> {
    let n = sim.nrows();
    if n < 2 || sim.ncols() != n {
        return Err(Error::Shape(format!(
            "need a square similarity matrix with n >= 2, got {:?}",
            sim.dim()
        )));
    }
    if sim.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: "NaN in similarity matrix".into(),
        });
    }
    let mut ranks = Vec::with_capacity(n);
    let mut tied = 0;
    for i in 0..n {
        let gold = sim[[i, i]];
        let row = sim.row(i);
        let higher = row.iter().filter(|&&s| s > gold).count();
        let ties_before = row.iter().take(i).filter(|&&s| s == gold).count();
        if row.iter().enumerate().any(|(j, &s)| j != i && s == gold) {
            tied += 1;
        }
        ranks.push(1 + higher + ties_before);
    }
    if tied > 0 {
        log::info!("retrieval: {tied} queries have ties with the gold similarity");
    }
    Ok(RetrievalOutcome {
        report: RetrievalReport::from_ranks(&ranks, tied)?,
        ranks,
    })
}

/// Cosine similarity matrix between the rows of `q` and `c`.
pub fn cosine_matrix(q: &Matrix, c: &Matrix) -> Matrix {
    let norm = |m: &Matrix| {
        let mut out = m.clone();
        for mut r in out.outer_iter_mut() {
            let n = l2_norm(r.view()).max(crate::tensor::NORM_EPS);
            r.mapv_inplace(|v| v / n);
        }
        out
    };
    norm(q).dot(&norm(c).t())
}

/// Projected source vectors (eval mode) as rows.
pub fn projected_sources(
    pairs: &[SentencePair],
    models: &ToyModels,
    projector: &ProjectorState,
) -> Result<Matrix> {
    let mut z = Matrix::zeros((pairs.len(), models.encoder.hidden_dim()));
    for (i, p) in pairs.iter().enumerate() {
        z.row_mut(i).assign(&encode_source(models, &p.source)?);
    }
    projector.project_batch(&z, None)
}

/// Teacher vectors of every target under one fixed instruction.
pub fn teacher_matrix(
    pairs: &[SentencePair],
    models: &ToyModels,
    instruction: &str,
    layer: TeacherLayer,
) -> Result<Matrix> {
    let mut h = Matrix::zeros((pairs.len(), models.decoder.hidden_dim()));
    for (i, p) in pairs.iter().enumerate() {
        h.row_mut(i)
            .assign(&teacher_vector(models, instruction, &p.target, layer)?);
    }
    Ok(h)
}

/// Ranks each projected source among all teacher vectors by cosine.
pub fn evaluate_retrieval(
    pairs: &[SentencePair],
    models: &ToyModels,
    projector: &ProjectorState,
    instruction: &str,
    layer: TeacherLayer,
) -> Result<RetrievalOutcome> {
    if pairs.len() < 2 {
        return Err(Error::Config("retrieval needs at least 2 pairs".into()));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        *seen.entry(p.target.as_str()).or_default() += 1;
    }
    let dups = seen.values().filter(|&&c| c > 1).count();
    if dups > 0 {
        log::warn!(
            "retrieval: {dups} target sentences occur more than once; gold ranks are ambiguous"
        );
    }
    let p = projected_sources(pairs, models, projector)?;
    let h = teacher_matrix(pairs, models, instruction, layer)?;
    evaluate_similarity(&cosine_matrix(&p, &h))
}

/// Machine-readable report table: `metric,value,n,config_hash`.
pub fn write_report_csv(
    path: impl AsRef<Path>,
    report: &RetrievalReport,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,value,n,config_hash")?;
    for (k, v) in [
        ("r_at_1", report.r_at_1),
        ("r_at_5", report.r_at_5),
        ("r_at_10", report.r_at_10),
        ("mrr", report.mrr),
        ("mean_rank", report.mean_rank),
    ] {
        writeln!(out, "{k},{v},{},{config_hash}", report.n)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ranks_csv(
    path: impl AsRef<Path>,
    pairs: &[SentencePair],
    ranks: &[usize],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,rank")?;
    for (p, r) in pairs.iter().zip(ranks) {
        writeln!(out, "{},{r}", p.id)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub id: String,
    pub loss_injected: f64,
    pub loss_zeroed: f64,
    /// `loss_injected − loss_zeroed`; negative when the slots help.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageComparison {
    pub rows: Vec<UsageRow>,
    /// Fraction of rows with `delta < 0`.
    pub usage_rate: f64,
    /// Mean `loss_zeroed − loss_injected`.
    pub mean_gain: f64,
}

/// Paired SFT losses with the trained slots injected and with the slot rows
/// left at their base embeddings. Examples without slots are skipped.
pub fn compare_injected_vs_zeroed(
    examples: &[StageBExample],
    models: &ToyModels,
    bundle: &StageBBundle,
) -> Result<UsageComparison> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let injected = match sft_loss(models, bundle, ex) {
            Ok(l) => l,
            Err(Error::SlotLayout(e)) => {
                log::warn!("usage comparison: skipping {}: {e}", ex.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let zeroed = zeroed_loss(models, bundle, ex)?;
        rows.push(UsageRow {
            id: ex.id.clone(),
            loss_injected: injected,
            loss_zeroed: zeroed,
            delta: injected - zeroed,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len() as f64;
    Ok(UsageComparison {
        usage_rate: rows.iter().filter(|r| r.delta < 0.0).count() as f64 / n,
        mean_gain: -rows.iter().map(|r| r.delta).sum::<f64>() / n,
        rows,
    })
}

pub fn write_usage_csv(path: impl AsRef<Path>, cmp: &UsageComparison) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,loss_injected,loss_zeroed,delta")?;
    for r in &cmp.rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.id, r.loss_injected, r.loss_zeroed, r.delta
        )?;
    }
    out.flush()?;
    Ok(())
}

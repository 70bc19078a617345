//! Stage A: align projected encoder vectors with decoder teacher states.
//!
//! Per step: `L = ½[NCE(p→h) + NCE(h→p)] + λ_dir·L_dir + λ_norm·L_norm`,
//! one AdamW update on the projector, then the step's teacher vectors enter
//! the negative queue (after mining, so nothing is its own negative).
//!
//! All randomness is drawn from per-step streams of the root seed, so a run
//! resumed from a saved [`StageAState`] replays the uninterrupted run exactly.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::SentencePair;
use crate::losses::{info_nce_graph, regularizers_graph, LossWeights, NegativeQueue, QueueConfig};
use crate::models::{extract_teacher_at, TeacherLayer, Tokenizer, ToyModels, FOREIGN_EMB};
use crate::optim::{AdamW, AdamWConfig};
use crate::projector::{ProjectorConfig, ProjectorState};
use crate::tensor::{Graph, Matrix, ParamSet};
use crate::{rng, Error, Result};

pub const DEFAULT_INSTRUCTION: &str = "Summarize the following text.";

/// Decoder prompt whose marker state is the teacher for `text`.
pub fn teacher_prompt(instruction: &str, text: &str) -> String {
    format!("User:{instruction} {text}{FOREIGN_EMB} Assistant:")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageAConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub queue: QueueConfig,
    pub seed: u64,
    pub instruction_pool: Vec<String>,
    pub projector_hidden: usize,
    pub dropout: f64,
    pub teacher_layer: TeacherLayer,
}

impl Default for StageAConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            queue: QueueConfig::default(),
            seed: 0,
            instruction_pool: vec![DEFAULT_INSTRUCTION.to_string()],
            projector_hidden: 3072,
            dropout: 0.10,
            teacher_layer: TeacherLayer::PostNorm,
        }
    }
}

impl StageAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "stage A batch_size must be at least 2".into(),
            ));
        }
        if self.instruction_pool.is_empty() {
            return Err(Error::Config("instruction_pool is empty".into()));
        }
        self.weights.validate()
    }

    pub fn projector_config(&self, models: &ToyModels) -> ProjectorConfig {
        ProjectorConfig {
            encoder_dim: models.encoder.hidden_dim(),
            hidden: self.projector_hidden,
            decoder_dim: models.decoder.hidden_dim(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAReport {
    pub step: usize,
    pub nce: f64,
    pub dir: f64,
    pub norm: f64,
    pub total: f64,
    pub hard_negatives: usize,
    pub learning_rate: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAState {
    /// Completed steps.
    pub step: usize,
    pub projector: ProjectorState,
    pub optimizer: AdamW,
    pub queue: NegativeQueue,
}

impl StageAState {
    pub fn new(models: &ToyModels, config: &StageAConfig) -> Result<Self> {
        config.validate()?;
        let projector = ProjectorState::new(
            config.projector_config(models),
            &mut rng::stream(config.seed, "stage_a/projector"),
        )?;
        let optimizer = AdamW::new(config.optimizer.clone(), config.steps, &projector.params);
        let queue = NegativeQueue::new(config.queue.clone(), models.decoder.hidden_dim())?;
        Ok(Self {
            step: 0,
            projector,
            optimizer,
            queue,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamSet::new();
        params.extend_prefixed("projector.", &self.projector.params);
        params.extend_prefixed("adam_m.", &self.optimizer.m);
        params.extend_prefixed("adam_v.", &self.optimizer.v);
        params.insert("queue", self.queue.to_matrix());
        let meta = serde_json::json!({
            "step": self.step,
            "projector": self.projector.config,
            "optimizer": self.optimizer.config,
            "optimizer_step": self.optimizer.step,
            "total_steps": self.optimizer.total_steps,
            "queue": self.queue.config,
            "queue_dim": self.queue.dim(),
        });
        Checkpoint::new("stage_a_state", meta, params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "stage_a_state" {
            return Err(Error::Checkpoint(format!(
                "expected stage_a_state, found {}",
                ck.kind
            )));
        }
        let projector = ProjectorState {
            config: ck.meta_field("projector")?,
            params: ck.params.strip_prefix("projector."),
        };
        let optimizer = AdamW {
            config: ck.meta_field("optimizer")?,
            total_steps: ck.meta_field("total_steps")?,
            step: ck.meta_field("optimizer_step")?,
            m: ck.params.strip_prefix("adam_m."),
            v: ck.params.strip_prefix("adam_v."),
        };
        let mut queue = NegativeQueue::new(ck.meta_field("queue")?, ck.meta_field("queue_dim")?)?;
        queue.restore(ck.params.get("queue"))?;
        Ok(Self {
            step: ck.meta_field("step")?,
            projector,
            optimizer,
            queue,
        })
    }
}

/// Sentence vector `z_F` of a foreign text.
pub fn encode_source(models: &ToyModels, text: &str) -> Result<Array1<f64>> {
    let ids = models.encoder_tokenizer.encode(text);
    models.encoder.sentence_vector(&ids)
}

/// Teacher `h_E` for an English text under `instruction`.
pub fn teacher_vector(
    models: &ToyModels,
    instruction: &str,
    text: &str,
    layer: TeacherLayer,
) -> Result<Array1<f64>> {
    let ids = models.tokenizer.encode(&teacher_prompt(instruction, text));
    Ok(extract_teacher_at(
        &models.decoder,
        &ids,
        models.decoder.reserved().foreign_emb,
        layer,
    )?
    .vector)
}

/// Instruction index per batch position for `step`.
fn instruction_choices(config: &StageAConfig, step: usize, n: usize) -> Vec<usize> {
    let mut r = rng::step_stream(config.seed, "stage_a/instruction", step);
    (0..n)
        .map(|_| r.random_range(0..config.instruction_pool.len()))
        .collect()
}

/// One update from precomputed `z` (`n × enc`) and teacher (`n × dec`) rows.
pub fn step_on_vectors(
    state: &mut StageAState,
    z: &Matrix,
    h: &Matrix,
    config: &StageAConfig,
) -> Result<StageAReport> {
    if z.nrows() < 2 || z.nrows() != h.nrows() {
        return Err(Error::Shape(format!(
            "stage A batch of {} sources, {} teachers",
            z.nrows(),
            h.nrows()
        )));
    }
    let step = state.step;
    let hard = state.queue.mine(h)?;
    let mask = state.projector.dropout_mask(
        z.nrows(),
        &mut rng::step_stream(config.seed, "stage_a/dropout", step),
    );
    let mut g = Graph::new();
    let w = state.projector.params.bind(&mut g, true);
    let zv = g.constant(z.clone());
    let hv = g.constant(h.clone());
    let p = state.projector.forward_graph(&mut g, &w, zv, Some(&mask));
    let nce = info_nce_graph(&mut g, p, hv, &hard, config.weights.temperature);
    let (dir, norm) = regularizers_graph(&mut g, p, hv);
    let d = g.scale(dir, config.weights.lambda_dir);
    let n = g.scale(norm, config.weights.lambda_norm);
    let total = g.add(nce, d);
    let total = g.add(total, n);
    let report = StageAReport {
        step: step + 1,
        nce: g.scalar(nce),
        dir: g.scalar(dir),
        norm: g.scalar(norm),
        total: g.scalar(total),
        hard_negatives: hard.nrows(),
        learning_rate: state.optimizer.learning_rate_at(state.optimizer.step),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            step: step + 1,
            detail: format!(
                "nce={} dir={} norm={} batch={} hard={}",
                report.nce,
                report.dir,
                report.norm,
                z.nrows(),
                hard.nrows()
            ),
        });
    }
    let grads = w.grads(&g, &g.backward(total));
    state.optimizer.update(&mut state.projector.params, &grads);
    if !state.projector.params.all_finite() {
        return Err(Error::NonFinite {
            step: step + 1,
            detail: "projector parameters became non-finite".into(),
        });
    }
    state.queue.push(h)?;
    state.step += 1;
    Ok(report)
}

/// One Stage A step on raw pairs: encodes sources, extracts teachers with
/// per-pair instructions drawn from the pool, then updates.
pub fn stage_a_step(
    batch: &[SentencePair],
    models: &ToyModels,
    state: &mut StageAState,
    config: &StageAConfig,
) -> Result<StageAReport> {
    if batch.len() < 2 {
        return Err(Error::Config("stage A batch needs at least 2 pairs".into()));
    }
    let instr = instruction_choices(config, state.step, batch.len());
    let mut z = Matrix::zeros((batch.len(), models.encoder.hidden_dim()));
    let mut h = Matrix::zeros((batch.len(), models.decoder.hidden_dim()));
    for (i, p) in batch.iter().enumerate() {
        z.row_mut(i).assign(&encode_source(models, &p.source)?);
        let ins = &config.instruction_pool[instr[i]];
        h.row_mut(i).assign(&teacher_vector(
            models,
            ins,
            &p.target,
            config.teacher_layer,
        )?);
    }
    step_on_vectors(state, &z, &h, config)
}

/// Dataset-level driver with cached encoder and teacher vectors.
pub struct StageATrainer<'a> {
    models: &'a ToyModels,
    config: StageAConfig,
    pairs: Vec<SentencePair>,
    z: Matrix,
    teachers: HashMap<(usize, usize), Array1<f64>>,
    base_hashes: (String, String),
}

impl<'a> StageATrainer<'a> {
    pub fn new(
        dataset: &[SentencePair],
        models: &'a ToyModels,
        config: StageAConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "dataset of {} pairs is smaller than batch_size {}",
                dataset.len(),
                config.batch_size
            )));
        }
        let mut z = Matrix::zeros((dataset.len(), models.encoder.hidden_dim()));
        for (i, p) in dataset.iter().enumerate() {
            z.row_mut(i).assign(&encode_source(models, &p.source)?);
        }
        Ok(Self {
            models,
            config,
            pairs: dataset.to_vec(),
            z,
            teachers: HashMap::new(),
            base_hashes: (models.encoder.fingerprint(), models.decoder.fingerprint()),
        })
    }

    pub fn config(&self) -> &StageAConfig {
        &self.config
    }

    fn teacher(&mut self, pair: usize, instr: usize) -> Result<Array1<f64>> {
        if let Some(v) = self.teachers.get(&(pair, instr)) {
            return Ok(v.clone());
        }
        let v = teacher_vector(
            self.models,
            &self.config.instruction_pool[instr],
            &self.pairs[pair].target,
            self.config.teacher_layer,
        )?;
        self.teachers.insert((pair, instr), v.clone());
        Ok(v)
    }

    /// Pair indices of the batch for a (0-based) step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut r = rng::step_stream(self.config.seed, "stage_a/batch", step);
        sample(&mut r, self.pairs.len(), self.config.batch_size).into_vec()
    }

    fn audit(&self) -> Result<()> {
        let now = (
            self.models.encoder.fingerprint(),
            self.models.decoder.fingerprint(),
        );
        if now != self.base_hashes {
            return Err(Error::Config(
                "frozen encoder/decoder weights changed during stage A".into(),
            ));
        }
        Ok(())
    }

    pub fn step(&mut self, state: &mut StageAState) -> Result<StageAReport> {
        let idx = self.batch_indices(state.step);
        let instr = instruction_choices(&self.config, state.step, idx.len());
        let z = self.z.select(ndarray::Axis(0), &idx);
        let mut h = Matrix::zeros((idx.len(), self.models.decoder.hidden_dim()));
        for (row, (&p, &ins)) in idx.iter().zip(&instr).enumerate() {
            h.row_mut(row).assign(&self.teacher(p, ins)?);
        }
        step_on_vectors(state, &z, &h, &self.config)
    }

    /// Runs until `state.step == until` (capped at `config.steps`).
    pub fn run(&mut self, state: &mut StageAState, until: usize) -> Result<Vec<StageAReport>> {
        let until = until.min(self.config.steps);
        let per_epoch = self.pairs.len().div_ceil(self.config.batch_size).max(1);
        let mut curve = Vec::with_capacity(until.saturating_sub(state.step));
        while state.step < until {
            let r = self.step(state)?;
            if r.step % 50 == 0 || r.step == 1 {
                log::info!(
                    "stage A step {}: total {:.4} nce {:.4}",
                    r.step,
                    r.total,
                    r.nce
                );
            }
            curve.push(r);
            if state.step % per_epoch == 0 {
                self.audit()?;
            }
        }
        self.audit()?;
        Ok(curve)
    }
}

pub struct StageAOutcome {
    pub projector: ProjectorState,
    pub curve: Vec<StageAReport>,
    pub state: StageAState,
}

/// Fresh run of `config.steps` steps.
pub fn train_stage_a(
    dataset: &[SentencePair],
    models: &ToyModels,
    config: &StageAConfig,
) -> Result<StageAOutcome> {
    let mut trainer = StageATrainer::new(dataset, models, config.clone())?;
    let mut state = StageAState::new(models, config)?;
    let curve = trainer.run(&mut state, config.steps)?;
    Ok(StageAOutcome {
        projector: state.projector.clone(),
        curve,
        state,
    })
}

pub const STAGE_A_CURVE_HEADER: &str = "step,nce,dir,norm,total";

pub fn write_stage_a_curve(path: impl AsRef<Path>, curve: &[StageAReport]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{STAGE_A_CURVE_HEADER}")?;
    for r in curve {
        writeln!(out, "{},{},{},{},{}", r.step, r.nce, r.dir, r.norm, r.total)?;
    }
    out.flush()?;
    Ok(())
}

//! Stage B: instruction tuning with K injected slots.
//!
//! The frozen Stage A projector maps each source to `p_F`; the trainable
//! adapter and expander turn it into K slot rows that overwrite the `<fk>`
//! embeddings. LoRA deltas adapt the decoder. Every step adds the slot/teacher
//! auxiliaries; every `contrast_every`-th step adds the usage contrast
//! against the zeroed-injection loss.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_targets, SentencePair, TemplateId};
use crate::lora::{BoundLora, LoraAdapterSet, LoraConfig};
use crate::losses::{slot_alignment_aux_graph, LossWeights};
use crate::models::{median_embedding_norm, TeacherLayer, Tokenizer, ToyModels, EOS};
use crate::optim::{AdamW, AdamWConfig};
use crate::projector::{
    expand_slots_graph, slot_positions, slot_string, ExpanderConfig, ProjectorState, SlotExpander,
    VectorAdapter,
};
use crate::stage_a::{encode_source, teacher_vector, DEFAULT_INSTRUCTION};
use crate::tensor::{Graph, Matrix, ParamSet, Var};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBConfig {
    pub slots: usize,
    pub contrast_every: usize,
    pub weights: LossWeights,
    pub lora: LoraConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub templates: Vec<TemplateId>,
    pub adapter_bottleneck: usize,
    pub expander_init_noise: f64,
    /// Instruction used for the auxiliaries' teacher vectors.
    pub teacher_instruction: String,
    pub teacher_layer: TeacherLayer,
}

impl Default for StageBConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            contrast_every: 3,
            weights: LossWeights::default(),
            lora: LoraConfig::default(),
            batch_size: 8,
            steps: 500,
            optimizer: AdamWConfig::default(),
            seed: 0,
            templates: TemplateId::ALL.to_vec(),
            adapter_bottleneck: 256,
            expander_init_noise: 0.5,
            teacher_instruction: DEFAULT_INSTRUCTION.to_string(),
            teacher_layer: TeacherLayer::PostNorm,
        }
    }
}

impl StageBConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contrast_every == 0 || self.slots == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "contrast_every, slots and batch_size must be >= 1".into(),
            ));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("no instruction templates selected".into()));
        }
        self.weights.validate()
    }

    /// Steps `s` (1-based) with `s % contrast_every == 0` carry the contrast.
    pub fn contrast_at(&self, step: usize) -> bool {
        step % self.contrast_every == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedExample {
    pub prompt: String,
    pub target: String,
    pub template: TemplateId,
}

/// `User:<instruction><f0>…<f{K-1}> Assistant:` plus the template target.
pub fn render_instruction(
    pair: &SentencePair,
    template: TemplateId,
    slots: usize,
) -> RenderedExample {
    RenderedExample {
        prompt: format!(
            "User:{}{} Assistant:",
            template.instruction(),
            slot_string(slots)
        ),
        target: make_targets(pair, template),
        template,
    }
}

pub fn render_instruction_by_name(
    pair: &SentencePair,
    template: &str,
    slots: usize,
) -> Result<RenderedExample> {
    Ok(render_instruction(pair, template.parse()?, slots))
}

/// A tokenised training example with its frozen inputs precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct StageBExample {
    pub id: String,
    pub template: TemplateId,
    /// Prompt followed by ` target<eos>`.
    pub ids: Vec<usize>,
    /// Next-token target per position; `None` on prompt positions.
    pub targets: Vec<Option<usize>>,
    /// Frozen projection `p_F = g(z_F)`.
    pub projected: Array1<f64>,
    pub teacher: Array1<f64>,
}

/// Next-token targets covering only the response tokens.
pub fn response_targets(ids: &[usize], prompt_len: usize) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|t| (t + 1 >= prompt_len && t + 1 < ids.len()).then(|| ids[t + 1]))
        .collect()
}

pub fn prepare_example(
    pair: &SentencePair,
    template: TemplateId,
    models: &ToyModels,
    projector: &ProjectorState,
    config: &StageBConfig,
) -> Result<StageBExample> {
    let r = render_instruction(pair, template, config.slots);
    let tok = &models.tokenizer;
    let mut ids = tok.encode(&r.prompt);
    let prompt_len = ids.len();
    ids.extend(tok.encode(&format!(" {}", r.target)));
    ids.push(
        tok.token_id(EOS)
            .ok_or_else(|| Error::Tokenizer("no <eos> token".into()))?,
    );
    let z = encode_source(models, &pair.source)?;
    Ok(StageBExample {
        id: format!("{}/{}", pair.id, template),
        template,
        targets: response_targets(&ids, prompt_len),
        ids,
        projected: projector.project(&z, None)?,
        teacher: teacher_vector(
            models,
            &config.teacher_instruction,
            &pair.target,
            config.teacher_layer,
        )?,
    })
}

/// One example per (pair, template), pairs outer.
pub fn prepare_examples(
    pairs: &[SentencePair],
    models: &ToyModels,
    projector: &ProjectorState,
    config: &StageBConfig,
) -> Result<Vec<StageBExample>> {
    let mut out = Vec::with_capacity(pairs.len() * config.templates.len());
    for p in pairs {
        for &t in &config.templates {
            out.push(prepare_example(p, t, models, projector, config)?);
        }
    }
    Ok(out)
}

/// Trainable Stage B parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StageBBundle {
    pub expander: SlotExpander,
    pub adapter: VectorAdapter,
    pub lora: LoraAdapterSet,
}

impl StageBBundle {
    /// Scale starts at the median base-embedding norm; LoRA `B` and the
    /// adapter's second layer start at zero.
    pub fn new(models: &ToyModels, config: &StageBConfig) -> Result<Self> {
        let d = models.decoder.hidden_dim();
        let ecfg = ExpanderConfig {
            dim: d,
            slots: config.slots,
            init_noise: config.expander_init_noise,
            adapter_bottleneck: config.adapter_bottleneck,
        };
        let scale = median_embedding_norm(&models.decoder);
        Ok(Self {
            expander: SlotExpander::new(
                &ecfg,
                scale,
                &mut rng::stream(config.seed, "stage_b/expander"),
            )?,
            adapter: VectorAdapter::new(
                d,
                config.adapter_bottleneck,
                &mut rng::stream(config.seed, "stage_b/adapter"),
            )?,
            lora: LoraAdapterSet::new(
                config.lora.clone(),
                models.decoder.config(),
                &mut rng::stream(config.seed, "stage_b/lora"),
            )?,
        })
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("expander.", &self.expander.params);
        p.extend_prefixed("adapter.", &self.adapter.params);
        p.extend_prefixed("lora.", &self.lora.params);
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) {
        self.expander.params = p.strip_prefix("expander.");
        self.adapter.params = p.strip_prefix("adapter.");
        self.lora.params = p.strip_prefix("lora.");
    }

    pub fn fingerprint(&self) -> String {
        self.params().fingerprint()
    }

    pub fn to_checkpoint(&self, meta_extra: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "dim": self.expander.dim,
            "slots": self.expander.slots,
            "scale": self.expander.scale(),
            "adapter_bottleneck": self.adapter.bottleneck,
            "lora": self.lora.config,
        });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), meta_extra) {
            m.extend(extra);
        }
        Checkpoint::new("stage_b_bundle", meta, self.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "stage_b_bundle" {
            return Err(Error::Checkpoint(format!(
                "expected stage_b_bundle, found {}",
                ck.kind
            )));
        }
        let dim: usize = ck.meta_field("dim")?;
        let bottleneck: usize = ck.meta_field("adapter_bottleneck")?;
        Ok(Self {
            expander: SlotExpander {
                dim,
                slots: ck.meta_field("slots")?,
                params: ck.params.strip_prefix("expander."),
            },
            adapter: VectorAdapter {
                dim,
                bottleneck,
                params: ck.params.strip_prefix("adapter."),
            },
            lora: LoraAdapterSet {
                config: ck.meta_field("lora")?,
                params: ck.params.strip_prefix("lora."),
            },
        })
    }
}

struct ExampleGraph {
    sft: Var,
    mean_slot: Var,
}

/// Injected-slot forward for one example inside `g`.
fn injected_forward(
    g: &mut Graph,
    models: &ToyModels,
    bundle: &StageBBundle,
    handles: &Handles,
    ex: &StageBExample,
    positions: &[usize],
) -> Result<ExampleGraph> {
    if !ex.targets.iter().any(Option::is_some) {
        return Err(Error::NoResponseTokens);
    }
    let p = g.constant(crate::losses::as_row(&ex.projected));
    let slots = expand_slots_graph(
        g,
        &bundle.expander,
        &handles.expander,
        &bundle.adapter,
        &handles.adapter,
        p,
    );
    let base = g.constant(models.decoder.embed(&ex.ids)?);
    let rows = g.scatter_rows(base, slots, positions);
    let out = models
        .decoder
        .forward_graph(g, &handles.decoder, &handles.lora, rows);
    Ok(ExampleGraph {
        sft: g.cross_entropy(out.logits, &ex.targets),
        mean_slot: g.mean_rows(slots),
    })
}

struct Handles {
    decoder: crate::tensor::Bound,
    expander: crate::tensor::Bound,
    adapter: crate::tensor::Bound,
    lora_bound: crate::tensor::Bound,
    lora: BoundLora,
}

fn bind_all(g: &mut Graph, models: &ToyModels, bundle: &StageBBundle, trainable: bool) -> Handles {
    let decoder = models.decoder.bind(g);
    let expander = bundle.expander.params.bind(g, trainable);
    let adapter = bundle.adapter.params.bind(g, trainable);
    let (lora_bound, lora) = BoundLora::bind(&bundle.lora, g, trainable);
    Handles {
        decoder,
        expander,
        adapter,
        lora_bound,
        lora,
    }
}

/// SFT loss with injected slots: mean cross-entropy over response tokens.
pub fn sft_loss(models: &ToyModels, bundle: &StageBBundle, ex: &StageBExample) -> Result<f64> {
    let positions = slot_positions(models.decoder.reserved(), &ex.ids, bundle.expander.slots)?;
    let mut g = Graph::new();
    let h = bind_all(&mut g, models, bundle, false);
    let out = injected_forward(&mut g, models, bundle, &h, ex, &positions)?;
    Ok(g.scalar(out.sft))
}

/// SFT loss with the slot rows restored to their base embeddings.
pub fn zeroed_loss(models: &ToyModels, bundle: &StageBBundle, ex: &StageBExample) -> Result<f64> {
    slot_positions(models.decoder.reserved(), &ex.ids, bundle.expander.slots)?;
    if !ex.targets.iter().any(Option::is_some) {
        return Err(Error::NoResponseTokens);
    }
    let mut g = Graph::new();
    let decoder = models.decoder.bind(&mut g);
    let (_, lora) = BoundLora::bind(&bundle.lora, &mut g, false);
    let rows = g.constant(models.decoder.embed(&ex.ids)?);
    let out = models.decoder.forward_graph(&mut g, &decoder, &lora, rows);
    let l = g.cross_entropy(out.logits, &ex.targets);
    Ok(g.scalar(l))
}

/// Mean cross-entropy of `logits` rows against `targets`, masked rows skipped.
pub fn masked_cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape("one target slot per logit row".into()));
    }
    if !targets.iter().any(Option::is_some) {
        return Err(Error::NoResponseTokens);
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets);
    Ok(g.scalar(ce))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBReport {
    pub step: usize,
    pub sft: f64,
    /// Weighted usage contrast; `None` on steps without it.
    pub contrast: Option<f64>,
    /// Weighted `1 − cos` auxiliary.
    pub aux_cos: f64,
    /// Weighted InfoNCE auxiliary.
    pub aux_nce: f64,
    pub total: f64,
    /// Fraction of the batch with `L_sft < L_zero`, both measured before the update.
    pub usage_rate: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageBState {
    /// Completed steps.
    pub step: usize,
    pub bundle: StageBBundle,
    pub optimizer: AdamW,
}

impl StageBState {
    pub fn new(models: &ToyModels, config: &StageBConfig) -> Result<Self> {
        config.validate()?;
        let bundle = StageBBundle::new(models, config)?;
        let optimizer = AdamW::new(config.optimizer.clone(), config.steps, &bundle.params());
        Ok(Self {
            step: 0,
            bundle,
            optimizer,
        })
    }
}

/// One Stage B update on `batch`; `state.step + 1` is the 1-based step index.
pub fn stage_b_step(
    batch: &[StageBExample],
    models: &ToyModels,
    state: &mut StageBState,
    config: &StageBConfig,
) -> Result<StageBReport> {
    let step = state.step + 1;
    let k = state.bundle.expander.slots;
    let mut g = Graph::new();
    let h = bind_all(&mut g, models, &state.bundle, true);
    let mut sfts = Vec::new();
    let mut means = Vec::new();
    let mut teachers = Vec::new();
    let mut zeros = Vec::new();
    let mut skipped = 0;
    for ex in batch {
        let positions = match slot_positions(models.decoder.reserved(), &ex.ids, k) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("stage B: skipping {}: {e}", ex.id);
                skipped += 1;
                continue;
            }
        };
        let out = injected_forward(&mut g, models, &state.bundle, &h, ex, &positions)?;
        zeros.push(zeroed_loss(models, &state.bundle, ex)?);
        sfts.push(out.sft);
        means.push(out.mean_slot);
        teachers.push(ex.teacher.view());
    }
    if sfts.is_empty() {
        return Err(Error::AllSkipped);
    }
    let n = sfts.len() as f64;
    let sft_sum = if sfts.len() == 1 {
        sfts[0]
    } else {
        g.concat_rows(&sfts)
    };
    let sft_sum = g.sum(sft_sum);
    let sft = g.scale(sft_sum, 1.0 / n);
    let mut total = sft;

    let contrast = if config.contrast_at(step) {
        let z =
            g.constant(Matrix::from_shape_vec((zeros.len(), 1), zeros.clone()).expect("column"));
        let s = if sfts.len() == 1 {
            sfts[0]
        } else {
            g.concat_rows(&sfts)
        };
        let d = g.sub(s, z);
        let r = g.relu(d);
        let r = g.mean(r);
        let c = g.scale(r, config.weights.lambda_contrast);
        total = g.add(total, c);
        Some(c)
    } else {
        None
    };

    let m = if means.len() == 1 {
        means[0]
    } else {
        g.concat_rows(&means)
    };
    let t = g.constant(
        ndarray::stack(ndarray::Axis(0), &teachers).map_err(|e| Error::Shape(e.to_string()))?,
    );
    let (cos_term, nce_term) = slot_alignment_aux_graph(&mut g, m, t, config.weights.temperature);
    let aux_cos = g.scale(cos_term, config.weights.lambda_cos_aux);
    let aux_nce = g.scale(nce_term, config.weights.lambda_nce_aux);
    total = g.add(total, aux_cos);
    total = g.add(total, aux_nce);

    let sft_values: Vec<f64> = sfts.iter().map(|v| g.scalar(*v)).collect();
    let report = StageBReport {
        step,
        sft: g.scalar(sft),
        contrast: contrast.map(|c| g.scalar(c)),
        aux_cos: g.scalar(aux_cos),
        aux_nce: g.scalar(aux_nce),
        total: g.scalar(total),
        usage_rate: sft_values.iter().zip(&zeros).filter(|(s, z)| s < z).count() as f64 / n,
        skipped,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "sft={} aux_cos={} aux_nce={}",
                report.sft, report.aux_cos, report.aux_nce
            ),
        });
    }
    let grads = g.backward(total);
    let mut all = ParamSet::new();
    all.extend_prefixed("expander.", &h.expander.grads(&g, &grads));
    all.extend_prefixed("adapter.", &h.adapter.grads(&g, &grads));
    all.extend_prefixed("lora.", &h.lora_bound.grads(&g, &grads));
    let mut params = state.bundle.params();
    state.optimizer.update(&mut params, &all);
    if !params.all_finite() {
        return Err(Error::NonFinite {
            step,
            detail: "stage B parameters became non-finite".into(),
        });
    }
    state.bundle.set_params(&params);
    state.step = step;
    Ok(report)
}

pub struct StageBOutcome {
    pub bundle: StageBBundle,
    pub curve: Vec<StageBReport>,
    pub state: StageBState,
}

/// Batch indices for a 1-based step.
pub fn batch_indices(config: &StageBConfig, n: usize, step: usize) -> Vec<usize> {
    let mut r = rng::step_stream(config.seed, "stage_b/batch", step);
    sample(&mut r, n, config.batch_size.min(n)).into_vec()
}

/// Runs `config.steps` steps from `state`; the projector is checked unchanged.
pub fn run_stage_b(
    examples: &[StageBExample],
    models: &ToyModels,
    projector: &ProjectorState,
    state: &mut StageBState,
    config: &StageBConfig,
) -> Result<Vec<StageBReport>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let frozen = (
        projector.fingerprint(),
        models.encoder.fingerprint(),
        models.decoder.fingerprint(),
    );
    let mut curve = Vec::new();
    while state.step < config.steps {
        let idx = batch_indices(config, examples.len(), state.step + 1);
        let batch: Vec<StageBExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let r = stage_b_step(&batch, models, state, config)?;
        if r.step % 50 == 0 || r.step == 1 {
            log::info!(
                "stage B step {}: total {:.4} sft {:.4} usage {:.2}",
                r.step,
                r.total,
                r.sft,
                r.usage_rate
            );
        }
        curve.push(r);
    }
    let after = (
        projector.fingerprint(),
        models.encoder.fingerprint(),
        models.decoder.fingerprint(),
    );
    if after != frozen {
        return Err(Error::Config(
            "frozen weights changed during stage B".into(),
        ));
    }
    Ok(curve)
}

pub fn train_stage_b(
    pairs: &[SentencePair],
    models: &ToyModels,
    projector: &ProjectorState,
    config: &StageBConfig,
) -> Result<StageBOutcome> {
    let examples = prepare_examples(pairs, models, projector, config)?;
    let mut state = StageBState::new(models, config)?;
    let curve = run_stage_b(&examples, models, projector, &mut state, config)?;
    Ok(StageBOutcome {
        bundle: state.bundle.clone(),
        curve,
        state,
    })
}

pub const STAGE_B_CURVE_HEADER: &str = "step,sft,contrast,aux_cos,aux_nce,total,usage_rate";

pub fn write_stage_b_curve(path: impl AsRef<Path>, curve: &[StageBReport]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{STAGE_B_CURVE_HEADER}")?;
    for r in curve {
        let c = r.contrast.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{c},{},{},{},{}",
            r.step, r.sft, r.aux_cos, r.aux_nce, r.total, r.usage_rate
        )?;
    }
    out.flush()?;
    Ok(())
}

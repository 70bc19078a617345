//! Config-driven pipeline commands shared by the CLI and the end-to-end tests.
//!
//! Every command reads a [`PipelineConfig`], works inside one output root and
//! writes a [`RunManifest`] under `manifests/` listing the digests of what it
//! read and wrote. Nothing time-dependent goes into any artifact, so reruns
//! with the same config and seed are byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{self, CipherCorpusConfig, SentencePair, Stage};
use crate::evaluation::{self, RetrievalReport};
use crate::losses::{LossWeights, QueueConfig};
use crate::models::bpe::BpeTokenizer;
use crate::models::{self, FrozenDecoder, FrozenEncoder, Tokenizer, ToyModelConfig, ToyModels};
use crate::optim::AdamWConfig;
use crate::projector::ProjectorState;
use crate::stage_a::{self, StageAConfig, DEFAULT_INSTRUCTION};
use crate::stage_b::{self, StageBBundle, StageBConfig};
use crate::token_analysis::{self, Aggregate, ContextBudget};
use crate::{Error, Result};

pub const ASSET_DIR_ENV: &str = "LLINK_ASSET_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub stage_a_pairs: usize,
    pub stage_b_pairs: usize,
    pub eval_pairs: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub two_sentence_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CipherCorpusConfig::default();
        Self {
            stage_a_pairs: 2000,
            stage_b_pairs: 500,
            eval_pairs: 256,
            min_words: c.min_words,
            max_words: c.max_words,
            two_sentence_prob: c.two_sentence_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fixed instruction for the teacher vectors of the retrieval candidates.
    pub instruction: String,
    /// Held-out pairs (times templates) for the injected-vs-zeroed comparison.
    pub usage_pairs: usize,
    pub context_limit: usize,
    /// Rows written to the character annotation stream.
    pub annotate_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            usage_pairs: 64,
            context_limit: 2048,
            annotate_rows: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokensConfig {
    /// Hugging Face `tokenizer.json`; relative paths resolve against the
    /// asset directory. Unset means the toy decoder tokenizer.
    pub tokenizer: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub models: ToyModelConfig,
    pub stage_a: StageAConfig,
    pub stage_b: StageBConfig,
    pub eval: EvalConfig,
    pub tokens: TokensConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale toy run: sized to finish on one CPU core in a few minutes.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            models: ToyModelConfig::default(),
            stage_a: StageAConfig {
                batch_size: 64,
                steps: 2000,
                projector_hidden: 256,
                optimizer: AdamWConfig {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                weights: LossWeights {
                    temperature: 0.02,
                    ..Default::default()
                },
                queue: QueueConfig {
                    capacity: 4096,
                    ..Default::default()
                },
                ..Default::default()
            },
            stage_b: StageBConfig {
                steps: 500,
                batch_size: 8,
                optimizer: AdamWConfig {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            eval: EvalConfig::default(),
            tokens: TokensConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Copies the root seed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.stage_a.seed = c.seed;
        c.stage_b.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.models.validate()?;
        self.stage_a.validate()?;
        self.stage_b.validate()?;
        if self.stage_b.slots != self.models.slots {
            return Err(Error::Config(format!(
                "stage_b.slots = {} but the decoder reserves {} slot tokens",
                self.stage_b.slots, self.models.slots
            )));
        }
        if self.data.stage_a_pairs == 0 || self.data.stage_b_pairs == 0 || self.data.eval_pairs < 2
        {
            return Err(Error::Config("data split sizes too small".into()));
        }
        if self.eval.context_limit == 0 {
            return Err(Error::Config("eval.context_limit must be positive".into()));
        }
        Ok(())
    }

    /// sha256 of the resolved config's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    /// Weight fingerprints of the frozen components this command used.
    pub frozen: BTreeMap<String, String>,
    pub inputs: Vec<ArtifactDigest>,
    pub outputs: Vec<ArtifactDigest>,
}

/// Fixed artifact locations under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.path(&format!("manifests/{command}.json"))
    }
}

pub const STAGE_A_DATA: &str = "data/stage_a.jsonl";
pub const STAGE_B_DATA: &str = "data/stage_b.jsonl";
pub const EVAL_DATA: &str = "data/eval.jsonl";
pub const CIPHER_MAP: &str = "data/cipher_map.json";
pub const ENCODER_CKPT: &str = "models/encoder.ckpt";
pub const DECODER_CKPT: &str = "models/decoder.ckpt";
pub const PROJECTOR_CKPT: &str = "stage_a/projector.ckpt";
pub const STAGE_A_STATE: &str = "stage_a/state.ckpt";
pub const STAGE_A_CURVE: &str = "stage_a/curve.csv";
pub const BUNDLE_CKPT: &str = "stage_b/bundle.ckpt";
pub const STAGE_B_CURVE: &str = "stage_b/curve.csv";
pub const EVAL_REPORT_JSON: &str = "eval/report.json";
pub const EVAL_REPORT_TXT: &str = "eval/report.txt";
pub const EVAL_RETRIEVAL_CSV: &str = "eval/retrieval.csv";
pub const EVAL_RANKS_CSV: &str = "eval/ranks.csv";
pub const EVAL_USAGE_CSV: &str = "eval/usage.csv";
pub const TOKENS_CSV: &str = "tokens/inflation.csv";
pub const TOKENS_SUMMARY: &str = "tokens/summary.json";
pub const TOKENS_ANNOTATIONS: &str = "tokens/annotations.jsonl";

struct Run<'a> {
    layout: &'a Layout,
    config: PipelineConfig,
    command: &'static str,
    inputs: Vec<&'static str>,
    outputs: Vec<&'static str>,
    frozen: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn begin(
        layout: &'a Layout,
        config: &PipelineConfig,
        command: &'static str,
        inputs: Vec<&'static str>,
        outputs: Vec<&'static str>,
        overwrite: bool,
    ) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        for rel in &inputs {
            if !layout.path(rel).is_file() {
                return Err(Error::MissingArtifact(
                    layout.path(rel).display().to_string(),
                ));
            }
        }
        if !overwrite {
            for rel in outputs.iter().copied().chain([""]) {
                let p = if rel.is_empty() {
                    layout.manifest(command)
                } else {
                    layout.path(rel)
                };
                if p.exists() {
                    return Err(Error::OutputExists(p.display().to_string()));
                }
            }
        }
        Ok(Self {
            layout,
            config,
            command,
            inputs,
            outputs,
            frozen: BTreeMap::new(),
        })
    }

    fn digest(&self, rel: &str) -> Result<ArtifactDigest> {
        let p = self.layout.path(rel);
        Ok(ArtifactDigest {
            path: rel.to_string(),
            sha256: sha256_file(&p)?,
            bytes: std::fs::metadata(&p)?.len(),
        })
    }

    fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: self.config.hash(),
            seeds: BTreeMap::from([
                ("root".to_string(), self.config.seed),
                ("models".to_string(), self.config.models.seed),
            ]),
            versions: BTreeMap::from([(
                env!("CARGO_PKG_NAME").to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            )]),
            frozen: self.frozen.clone(),
            inputs: self
                .inputs
                .iter()
                .map(|r| self.digest(r))
                .collect::<Result<_>>()?,
            outputs: self
                .outputs
                .iter()
                .map(|r| self.digest(r))
                .collect::<Result<_>>()?,
        };
        let path = self.layout.manifest(self.command);
        std::fs::create_dir_all(path.parent().expect("manifests dir"))?;
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Cipher corpus split into Stage A, Stage B and held-out eval files.
pub fn gen_data(config: &PipelineConfig, layout: &Layout, overwrite: bool) -> Result<RunManifest> {
    let run = Run::begin(
        layout,
        config,
        "gen-data",
        vec![],
        vec![STAGE_A_DATA, STAGE_B_DATA, EVAL_DATA, CIPHER_MAP],
        overwrite,
    )?;
    let c = &run.config;
    let d = &c.data;
    let (pairs, map) = data::generate_cipher_corpus(&CipherCorpusConfig {
        n_pairs: d.stage_a_pairs + d.stage_b_pairs + d.eval_pairs,
        seed: c.seed,
        min_words: d.min_words,
        max_words: d.max_words,
        two_sentence_prob: d.two_sentence_prob,
        ..Default::default()
    })?;
    let (a, rest) = pairs.split_at(d.stage_a_pairs);
    let (b, eval) = rest.split_at(d.stage_b_pairs);
    let a = data::filter_pairs(a, data::MIN_SOURCE_CHARS, data::MAX_SOURCE_CHARS, Stage::A);
    let b = data::filter_pairs(b, data::MIN_SOURCE_CHARS, data::MAX_SOURCE_CHARS, Stage::B);
    log::info!(
        "gen-data: {} stage A, {} stage B, {} eval pairs",
        a.len(),
        b.len(),
        eval.len()
    );
    data::write_records(layout.path(STAGE_A_DATA), &a)?;
    data::write_records(layout.path(STAGE_B_DATA), &b)?;
    data::write_records(layout.path(EVAL_DATA), eval)?;
    write_json(&layout.path(CIPHER_MAP), &map)?;
    run.finish()
}

fn frozen_fingerprints(models: &ToyModels) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("encoder".to_string(), models.encoder.fingerprint()),
        ("decoder".to_string(), models.decoder.fingerprint()),
    ])
}

/// Frozen encoder/decoder written by `train-a`, with tokenizers rebuilt from the config.
pub fn load_models(config: &PipelineConfig, layout: &Layout) -> Result<ToyModels> {
    let slots = config.models.slots;
    Ok(ToyModels {
        encoder: FrozenEncoder::from_checkpoint(&Checkpoint::load(layout.path(ENCODER_CKPT))?)?,
        decoder: FrozenDecoder::from_checkpoint(&Checkpoint::load(layout.path(DECODER_CKPT))?)?,
        tokenizer: models::decoder_tokenizer(slots),
        encoder_tokenizer: models::encoder_tokenizer(slots),
    })
}

pub fn train_a(config: &PipelineConfig, layout: &Layout, overwrite: bool) -> Result<RunManifest> {
    let mut run = Run::begin(
        layout,
        config,
        "train-a",
        vec![STAGE_A_DATA],
        vec![
            ENCODER_CKPT,
            DECODER_CKPT,
            PROJECTOR_CKPT,
            STAGE_A_STATE,
            STAGE_A_CURVE,
        ],
        overwrite,
    )?;
    let pairs = data::read_records(layout.path(STAGE_A_DATA))?;
    let models = models::build_toy_models(&run.config.models)?;
    let before = frozen_fingerprints(&models);
    let out = stage_a::train_stage_a(&pairs, &models, &run.config.stage_a)?;
    if frozen_fingerprints(&models) != before {
        return Err(Error::Config(
            "frozen weights changed during stage A".into(),
        ));
    }
    models
        .encoder
        .to_checkpoint()
        .save(layout.path(ENCODER_CKPT))?;
    models
        .decoder
        .to_checkpoint()
        .save(layout.path(DECODER_CKPT))?;
    out.projector
        .to_checkpoint()
        .save(layout.path(PROJECTOR_CKPT))?;
    out.state.to_checkpoint().save(layout.path(STAGE_A_STATE))?;
    stage_a::write_stage_a_curve(layout.path(STAGE_A_CURVE), &out.curve)?;
    run.frozen = before;
    run.finish()
}

pub fn load_projector(layout: &Layout) -> Result<ProjectorState> {
    let p = layout.path(PROJECTOR_CKPT);
    if !p.is_file() {
        return Err(Error::MissingArtifact(p.display().to_string()));
    }
    ProjectorState::from_checkpoint(&Checkpoint::load(p)?)
}

pub fn train_b(config: &PipelineConfig, layout: &Layout, overwrite: bool) -> Result<RunManifest> {
    let mut run = Run::begin(
        layout,
        config,
        "train-b",
        vec![PROJECTOR_CKPT, ENCODER_CKPT, DECODER_CKPT, STAGE_B_DATA],
        vec![BUNDLE_CKPT, STAGE_B_CURVE],
        overwrite,
    )?;
    let pairs = data::read_records(layout.path(STAGE_B_DATA))?;
    let models = load_models(&run.config, layout)?;
    let projector = load_projector(layout)?;
    let mut frozen = frozen_fingerprints(&models);
    frozen.insert("projector".into(), projector.fingerprint());
    let out = stage_b::train_stage_b(&pairs, &models, &projector, &run.config.stage_b)?;
    let mut after = frozen_fingerprints(&models);
    after.insert("projector".into(), projector.fingerprint());
    if after != frozen {
        return Err(Error::Config(
            "frozen weights changed during stage B".into(),
        ));
    }
    let meta = serde_json::json!({
        "config_hash": run.config.hash(),
        "projector_fingerprint": frozen["projector"],
    });
    out.bundle
        .to_checkpoint(meta)
        .save(layout.path(BUNDLE_CKPT))?;
    stage_b::write_stage_b_curve(layout.path(STAGE_B_CURVE), &out.curve)?;
    run.frozen = frozen;
    run.finish()
}

/// Tokenizer for inflation analysis: the configured asset if any, else the
/// toy decoder tokenizer.
pub fn analysis_tokenizer(
    config: &PipelineConfig,
    asset_dir: Option<&Path>,
) -> Result<(String, Box<dyn Tokenizer>)> {
    match &config.tokens.tokenizer {
        Some(p) => {
            let path = match asset_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            if !path.is_file() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            Ok((
                path.display().to_string(),
                Box::new(BpeTokenizer::from_tokenizer_json(&path)?),
            ))
        }
        None => Ok((
            "toy-char".to_string(),
            Box::new(models::decoder_tokenizer(config.models.slots)),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub tokenizer: String,
    pub n: usize,
    pub excluded: usize,
    pub inflation_ratio: Aggregate,
    pub source_tokens_per_char: Aggregate,
    pub target_tokens_per_char: Aggregate,
    pub mean_source_tokens: f64,
    pub context_limit: usize,
    /// Budget left after one source sentence of mean length.
    pub budget_after_mean_source: ContextBudget,
}

fn token_summary(
    name: String,
    pairs: &[SentencePair],
    tok: &dyn Tokenizer,
    limit: usize,
) -> Result<(TokenSummary, token_analysis::InflationReport)> {
    let r = token_analysis::measure_inflation(pairs, tok)?;
    let mean_src = r
        .rows
        .iter()
        .map(|x| x.source.token_count as f64)
        .sum::<f64>()
        / r.rows.len() as f64;
    let summary = TokenSummary {
        tokenizer: name,
        n: r.rows.len(),
        excluded: r.excluded,
        inflation_ratio: r.inflation_ratio,
        source_tokens_per_char: r.source_tokens_per_char,
        target_tokens_per_char: r.target_tokens_per_char,
        mean_source_tokens: mean_src,
        context_limit: limit,
        budget_after_mean_source: token_analysis::context_budget(mean_src.round() as usize, limit)?,
    };
    Ok((summary, r))
}

fn write_inflation_csv(path: &Path, r: &token_analysis::InflationReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "id,source_tokens,source_chars,source_tokens_per_char,target_tokens,target_chars,target_tokens_per_char,inflation_ratio"
    )?;
    for x in &r.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            x.id,
            x.source.token_count,
            x.source.chars,
            x.source.tokens_per_char,
            x.target.token_count,
            x.target.chars,
            x.target.tokens_per_char,
            x.inflation_ratio
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub n: usize,
    pub usage_rate: f64,
    pub mean_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub retrieval: RetrievalReport,
    pub usage: UsageSummary,
    pub tokens: TokenSummary,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let r = &self.retrieval;
        let t = &self.tokens;
        format!(
            "config {}\n\
             retrieval (n={}): R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  MRR {:.3}  mean rank {:.2}\n\
             usage (n={}): L_sft < L_zero on {:.1}% of examples, mean gain {:.4} nats\n\
             tokens [{}] (n={}): inflation mean {:.2} median {:.2} p95 {:.2}; source {:.2} tok/char, target {:.2} tok/char\n",
            self.config_hash,
            r.n,
            r.r_at_1,
            r.r_at_5,
            r.r_at_10,
            r.mrr,
            r.mean_rank,
            self.usage.n,
            100.0 * self.usage.usage_rate,
            self.usage.mean_gain,
            t.tokenizer,
            t.n,
            t.inflation_ratio.mean,
            t.inflation_ratio.median,
            t.inflation_ratio.p95,
            t.source_tokens_per_char.mean,
            t.target_tokens_per_char.mean,
        )
    }
}

pub fn eval(
    config: &PipelineConfig,
    layout: &Layout,
    overwrite: bool,
    asset_dir: Option<&Path>,
) -> Result<(RunManifest, EvalReport)> {
    let mut run = Run::begin(
        layout,
        config,
        "eval",
        vec![
            EVAL_DATA,
            ENCODER_CKPT,
            DECODER_CKPT,
            PROJECTOR_CKPT,
            BUNDLE_CKPT,
        ],
        vec![
            EVAL_REPORT_JSON,
            EVAL_REPORT_TXT,
            EVAL_RETRIEVAL_CSV,
            EVAL_RANKS_CSV,
            EVAL_USAGE_CSV,
        ],
        overwrite,
    )?;
    let c = run.config.clone();
    let pairs = data::read_records(layout.path(EVAL_DATA))?;
    let models = load_models(&c, layout)?;
    let projector = load_projector(layout)?;
    let bundle = StageBBundle::from_checkpoint(&Checkpoint::load_kind(
        layout.path(BUNDLE_CKPT),
        "stage_b_bundle",
    )?)?;
    let hash = c.hash();

    let retrieval = evaluation::evaluate_retrieval(
        &pairs,
        &models,
        &projector,
        &c.eval.instruction,
        c.stage_a.teacher_layer,
    )?;
    evaluation::write_report_csv(layout.path(EVAL_RETRIEVAL_CSV), &retrieval.report, &hash)?;
    evaluation::write_ranks_csv(layout.path(EVAL_RANKS_CSV), &pairs, &retrieval.ranks)?;

    let usage_pairs = &pairs[..c.eval.usage_pairs.min(pairs.len())];
    let examples = stage_b::prepare_examples(usage_pairs, &models, &projector, &c.stage_b)?;
    let usage = evaluation::compare_injected_vs_zeroed(&examples, &models, &bundle)?;
    evaluation::write_usage_csv(layout.path(EVAL_USAGE_CSV), &usage)?;

    let (name, tok) = analysis_tokenizer(&c, asset_dir)?;
    let (tokens, _) = token_summary(name, &pairs, tok.as_ref(), c.eval.context_limit)?;

    let report = EvalReport {
        config_hash: hash,
        retrieval: retrieval.report,
        usage: UsageSummary {
            n: usage.rows.len(),
            usage_rate: usage.usage_rate,
            mean_gain: usage.mean_gain,
        },
        tokens,
    };
    write_json(&layout.path(EVAL_REPORT_JSON), &report)?;
    std::fs::write(layout.path(EVAL_REPORT_TXT), report.to_text())?;
    let mut frozen = frozen_fingerprints(&models);
    frozen.insert("projector".into(), projector.fingerprint());
    run.frozen = frozen;
    Ok((run.finish()?, report))
}

/// Inflation table, summary and character annotations for the eval corpus.
pub fn analyze_tokens(
    config: &PipelineConfig,
    layout: &Layout,
    overwrite: bool,
    asset_dir: Option<&Path>,
) -> Result<(RunManifest, TokenSummary)> {
    let run = Run::begin(
        layout,
        config,
        "analyze-tokens",
        vec![EVAL_DATA],
        vec![TOKENS_CSV, TOKENS_SUMMARY, TOKENS_ANNOTATIONS],
        overwrite,
    )?;
    let c = &run.config;
    let pairs = data::read_records(layout.path(EVAL_DATA))?;
    let (name, tok) = analysis_tokenizer(c, asset_dir)?;
    let (summary, report) = token_summary(name, &pairs, tok.as_ref(), c.eval.context_limit)?;
    write_inflation_csv(&layout.path(TOKENS_CSV), &report)?;
    write_json(&layout.path(TOKENS_SUMMARY), &summary)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(layout.path(TOKENS_ANNOTATIONS))?);
    for p in pairs.iter().take(c.eval.annotate_rows) {
        let chars = token_analysis::annotate_chars(&p.source, tok.as_ref())?;
        let line = serde_json::json!({ "id": p.id, "chars": chars });
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    drop(out);
    Ok((run.finish()?, summary))
}

//! Parallel corpora: loading, length filtering, instruction targets and a
//! synthetic cipher-language generator for self-contained runs.
//!
//! Character counts are taken over canonically decomposed (NFD) code
//! points, so scripts with combining marks filter the same way regardless
//! of how the input was composed.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    /// Foreign-language side.
    pub source: String,
    /// English side.
    pub target: String,
    /// Provenance flags recording normalizations applied on the way in.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl SentencePair {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        target: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            target: target.into(),
            flags: Vec::new(),
        }
    }
}

pub fn char_len(s: &str) -> usize {
    s.nfd().count()
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// `source<TAB>target` per line.
    Tsv,
    /// One JSON record per line: `{"id"?, "source", "target"}`.
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" | "records" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Tsv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub pairs: Vec<SentencePair>,
    pub malformed: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    source: Option<String>,
    target: Option<String>,
    #[serde(default)]
    flags: Vec<String>,
}

/// Reads a parallel corpus; malformed lines are counted and skipped, blank
/// lines ignored. More than half malformed is treated as a format error.
pub fn load_parallel(path: impl AsRef<Path>, format: CorpusFormat) -> Result<LoadReport> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let fallback_id = format!("{stem}:{}", i + 1);
        let parsed = match format {
            CorpusFormat::Tsv => line.split_once('\t').and_then(|(s, t)| {
                let t = t.trim_end_matches('\r');
                (!s.trim().is_empty() && !t.trim().is_empty())
                    .then(|| SentencePair::new(fallback_id.clone(), s, t))
            }),
            CorpusFormat::Jsonl => serde_json::from_str::<RawRecord>(&line).ok().and_then(|r| {
                let (s, t) = (r.source?, r.target?);
                (!s.trim().is_empty() && !t.trim().is_empty()).then(|| SentencePair {
                    id: r.id.unwrap_or_else(|| fallback_id.clone()),
                    source: s,
                    target: t,
                    flags: r.flags,
                })
            }),
        };
        match parsed {
            Some(p) => pairs.push(p),
            None => {
                log::debug!("{}: skipping malformed line {}", path.display(), i + 1);
                malformed += 1;
            }
        }
    }
    if total > 0 && malformed * 2 > total {
        return Err(Error::MisFormatted { malformed, total });
    }
    Ok(LoadReport { pairs, malformed })
}

/// Writes the canonical record file: one JSON object per line.
pub fn write_records(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SentencePair>> {
    Ok(load_parallel(path, CorpusFormat::Jsonl)?.pairs)
}

// ---------------------------------------------------------------------------
// Filtering

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Alignment: sources longer than `max_len` are truncated.
    A,
    /// Instruction tuning: sources outside `[min_len, max_len]` are dropped.
    B,
}

pub const MIN_SOURCE_CHARS: usize = 12;
pub const MAX_SOURCE_CHARS: usize = 256;

/// Stage-appropriate length constraints; order preserved; idempotent.
pub fn filter_pairs(
    pairs: &[SentencePair],
    min_len: usize,
    max_len: usize,
    stage: Stage,
) -> Vec<SentencePair> {
    pairs
        .iter()
        .filter(|p| !p.source.trim().is_empty() && !p.target.trim().is_empty())
        .filter_map(|p| {
            let len = char_len(&p.source);
            match stage {
                Stage::A if len > max_len => {
                    let mut p = p.clone();
                    p.source = p.source.nfd().take(max_len).collect();
                    p.flags.push("truncated_nfd".into());
                    Some(p)
                }
                Stage::A => Some(p.clone()),
                Stage::B => (min_len..=max_len).contains(&len).then(|| p.clone()),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Instruction targets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    BulletPointify,
    TranslateToEnglish,
    SummarizeInEnglish,
    QaAboutText,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::BulletPointify,
        TemplateId::TranslateToEnglish,
        TemplateId::SummarizeInEnglish,
        TemplateId::QaAboutText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BulletPointify => "bullet_pointify",
            Self::TranslateToEnglish => "translate_to_english",
            Self::SummarizeInEnglish => "summarize_in_english",
            Self::QaAboutText => "qa_about_text",
        }
    }

    /// User-side instruction text that precedes the slot tokens.
    pub fn instruction(self) -> &'static str {
        match self {
            Self::BulletPointify => "Rewrite the text as bullet points.",
            Self::TranslateToEnglish => "Translate the text to English.",
            Self::SummarizeInEnglish => "Summarize the text in English.",
            Self::QaAboutText => "Which word opens the text?",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

fn first_word(text: &str) -> String {
    text.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Response text for `template` built from the English side of `pair`.
///
/// * translate: the English text verbatim
/// * bullet points: one `- sentence` line per sentence
/// * summary: the first sentence
/// * QA: the first word, as answer to "Which word opens the text?"
pub fn make_targets(pair: &SentencePair, template: TemplateId) -> String {
    match template {
        TemplateId::TranslateToEnglish => pair.target.clone(),
        TemplateId::BulletPointify => split_sentences(&pair.target)
            .iter()
            .map(|s| format!("- {s}"))
            .collect::<Vec<_>>()
            .join("\n"),
        TemplateId::SummarizeInEnglish => split_sentences(&pair.target)
            .into_iter()
            .next()
            .unwrap_or_default(),
        TemplateId::QaAboutText => format!("The text opens with \"{}\".", first_word(&pair.target)),
    }
}

pub fn make_targets_by_name(pair: &SentencePair, template: &str) -> Result<String> {
    Ok(make_targets(pair, template.parse()?))
}

// ---------------------------------------------------------------------------
// Cipher corpus

/// Khmer consonants used as the cipher letters.
const FOREIGN_LETTERS: std::ops::RangeInclusive<u32> = 0x1780..=0x17A2;
const PUNCTUATION: [(char, char); 3] = [('.', '\u{17D4}'), ('!', '\u{17D5}'), ('?', '\u{17D6}')];

/// Every character the cipher can emit (whitespace excluded).
pub fn foreign_alphabet() -> String {
    FOREIGN_LETTERS
        .filter_map(char::from_u32)
        .chain(PUNCTUATION.iter().map(|(_, f)| *f))
        .collect()
}

/// Injective word → pseudo-word table. Letters are substituted through a
/// seeded permutation into the foreign script and the word is reversed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherMap {
    pub forward: BTreeMap<String, String>,
    pub inverse: BTreeMap<String, String>,
}

impl CipherMap {
    pub fn new(vocab: &[String], seed: u64) -> Result<Self> {
        let mut letters: Vec<char> = FOREIGN_LETTERS.filter_map(char::from_u32).collect();
        letters.shuffle(&mut rng::stream(seed, "cipher/letters"));
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for w in vocab {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Config(format!(
                    "cipher vocabulary word `{w}` must be lowercase a-z"
                )));
            }
            let enc: String = w
                .chars()
                .rev()
                .map(|c| letters[(c as u8 - b'a') as usize])
                .collect();
            if let Some(prev) = inverse.insert(enc.clone(), w.clone()) {
                if &prev != w {
                    return Err(Error::Config(format!(
                        "cipher collision: `{prev}` and `{w}`"
                    )));
                }
            }
            forward.insert(w.clone(), enc);
        }
        Ok(Self { forward, inverse })
    }

    fn map_text(text: &str, table: &BTreeMap<String, String>, to_foreign: bool) -> Option<String> {
        let words: Option<Vec<String>> = text
            .split(' ')
            .map(|tok| {
                let mut core = tok.to_string();
                let mut tail = None;
                if let Some(last) = core.chars().last() {
                    let hit =
                        PUNCTUATION
                            .iter()
                            .find(|(en, fo)| if to_foreign { *en == last } else { *fo == last });
                    if let Some((en, fo)) = hit {
                        core.pop();
                        tail = Some(if to_foreign { *fo } else { *en });
                    }
                }
                let mut mapped = table.get(&core)?.clone();
                mapped.extend(tail);
                Some(mapped)
            })
            .collect();
        words.map(|w| w.join(" "))
    }

    pub fn encipher(&self, text: &str) -> Option<String> {
        Self::map_text(text, &self.forward, true)
    }

    pub fn decipher(&self, text: &str) -> Option<String> {
        Self::map_text(text, &self.inverse, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CipherCorpusConfig {
    pub vocab: Vec<String>,
    pub n_pairs: usize,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a pair holds two sentences rather than one.
    pub two_sentence_prob: f64,
}

impl Default for CipherCorpusConfig {
    fn default() -> Self {
        Self {
            vocab: default_vocab(),
            n_pairs: 2_756,
            seed: 0,
            min_words: 4,
            max_words: 9,
            two_sentence_prob: 0.3,
        }
    }
}

/// Built-in English word list for the synthetic corpus.
pub fn default_vocab() -> Vec<String> {
    const WORDS: &str =
        "the a one two three four five red blue green black white old new big small \
        long short happy quiet busy early late cold warm dark bright soft hard fast slow \
        cat dog bird fish horse cow goat farmer teacher doctor child mother father friend \
        king queen student driver baker singer river mountain forest garden village city \
        school market house road bridge boat train car book letter song story picture \
        apple bread water rice milk tea coffee soup table chair window door lamp clock \
        morning evening night winter summer spring rain snow wind sun moon star \
        sees finds takes gives makes sells buys reads writes sings paints cleans opens \
        closes carries follows watches helps calls visits loves likes wants needs keeps \
        near under over behind beside inside with without from into across through \
        and but then also again today always never often soon here there slowly quickly";
    WORDS.split_whitespace().map(str::to_string).collect()
}

fn random_sentence(cfg: &CipherCorpusConfig, r: &mut impl Rng) -> String {
    let n = r.random_range(cfg.min_words..=cfg.max_words);
    let words: Vec<&str> = (0..n)
        .map(|_| cfg.vocab[r.random_range(0..cfg.vocab.len())].as_str())
        .collect();
    let end = match r.random_range(0..10) {
        0 => '?',
        1 => '!',
        _ => '.',
    };
    format!("{}{end}", words.join(" "))
}

/// `n_pairs` distinct pairs whose source is the word-by-word encipherment of
/// the English target.
pub fn generate_cipher_corpus(cfg: &CipherCorpusConfig) -> Result<(Vec<SentencePair>, CipherMap)> {
    if cfg.vocab.is_empty() {
        return Err(Error::Config("cipher vocabulary is empty".into()));
    }
    if cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::Config("need 0 < min_words <= max_words".into()));
    }
    let map = CipherMap::new(&cfg.vocab, cfg.seed)?;
    let mut r = rng::stream(cfg.seed, "cipher/corpus");
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut attempts = 0usize;
    while pairs.len() < cfg.n_pairs {
        attempts += 1;
        if attempts > cfg.n_pairs * 100 + 1000 {
            return Err(Error::Config(
                "vocabulary too small for the requested number of distinct pairs".into(),
            ));
        }
        let mut target = random_sentence(cfg, &mut r);
        if r.random_bool(cfg.two_sentence_prob.clamp(0.0, 1.0)) {
            target = format!("{target} {}", random_sentence(cfg, &mut r));
        }
        if char_len(&target) < MIN_SOURCE_CHARS || !seen.insert(target.clone()) {
            continue;
        }
        let source = map
            .encipher(&target)
            .expect("generated from the cipher vocabulary");
        pairs.push(SentencePair::new(
            format!("cipher-{}-{:06}", cfg.seed, pairs.len()),
            source,
            target,
        ));
    }
    Ok((pairs, map))
}

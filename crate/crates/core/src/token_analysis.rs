//! Tokenization inflation: tokens per character, source/target inflation
//! ratios and what a sentence leaves of a context window.

use serde::{Deserialize, Serialize};

use crate::data::SentencePair;
use crate::models::{FrozenDecoder, Tokenizer};
use crate::tensor::{l2_norm, NORM_EPS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextStat {
    pub token_count: usize,
    /// Unicode scalar values of the raw text.
    pub chars: usize,
    pub tokens_per_char: f64,
}

/// `None` for empty text.
pub fn measure_text(text: &str, tokenizer: &dyn Tokenizer) -> Option<TextStat> {
    let chars = text.chars().count();
    if chars == 0 {
        return None;
    }
    let token_count = tokenizer.encode(text).len();
    Some(TextStat {
        token_count,
        chars,
        tokens_per_char: token_count as f64 / chars as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInflation {
    pub id: String,
    pub source: TextStat,
    pub target: TextStat,
    /// `source_tokens / target_tokens`.
    pub inflation_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Linear interpolation between closest ranks.
    pub p95: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: percentile(&v, 0.5),
            p95: percentile(&v, 0.95),
        })
    }
}

/// Percentile `q ∈ [0, 1]` of sorted values, interpolating at `q·(n−1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    pub rows: Vec<PairInflation>,
    /// Pairs dropped because one side was empty.
    pub excluded: usize,
    pub inflation_ratio: Aggregate,
    pub source_tokens_per_char: Aggregate,
    pub target_tokens_per_char: Aggregate,
}

pub fn measure_inflation(
    pairs: &[SentencePair],
    tokenizer: &dyn Tokenizer,
) -> Result<InflationReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut excluded = 0;
    for p in pairs {
        match (
            measure_text(&p.source, tokenizer),
            measure_text(&p.target, tokenizer),
        ) {
            (Some(source), Some(target)) => rows.push(PairInflation {
                id: p.id.clone(),
                inflation_ratio: source.token_count as f64 / target.token_count as f64,
                source,
                target,
            }),
            _ => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("token analysis: excluded {excluded} pairs with empty text");
    }
    let agg =
        |f: &dyn Fn(&PairInflation) -> f64| Aggregate::of(&rows.iter().map(f).collect::<Vec<_>>());
    let (Some(inflation_ratio), Some(src), Some(tgt)) = (
        agg(&|r| r.inflation_ratio),
        agg(&|r| r.source.tokens_per_char),
        agg(&|r| r.target.tokens_per_char),
    ) else {
        return Err(Error::EmptyDataset);
    };
    Ok(InflationReport {
        rows,
        excluded,
        inflation_ratio,
        source_tokens_per_char: src,
        target_tokens_per_char: tgt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub remaining: usize,
    pub overflow: bool,
}

/// `context_limit − token_count`, floored at zero.
pub fn context_budget(token_count: usize, context_limit: usize) -> Result<ContextBudget> {
    if context_limit == 0 {
        return Err(Error::Config("context limit must be positive".into()));
    }
    Ok(ContextBudget {
        remaining: context_limit.saturating_sub(token_count),
        overflow: token_count > context_limit,
    })
}

/// One character of the input and the token positions covering its bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTokens {
    pub ch: char,
    pub tokens: Vec<usize>,
}

impl CharTokens {
    /// The character is split over more than one token.
    pub fn is_split(&self) -> bool {
        self.tokens.len() > 1
    }
}

/// Maps tokens back onto characters through their raw bytes. Fails when the
/// token bytes do not spell the text (e.g. a normalizing tokenizer).
pub fn annotate_chars(text: &str, tokenizer: &dyn Tokenizer) -> Result<Vec<CharTokens>> {
    let ids = tokenizer.encode(text);
    let mut byte_owner = Vec::with_capacity(text.len());
    for (pos, &id) in ids.iter().enumerate() {
        byte_owner.extend(std::iter::repeat_n(pos, tokenizer.token_bytes(id).len()));
    }
    let spelled: Vec<u8> = ids
        .iter()
        .flat_map(|&id| tokenizer.token_bytes(id))
        .collect();
    if spelled != text.as_bytes() {
        return Err(Error::Tokenizer(
            "token bytes do not reproduce the text".into(),
        ));
    }
    Ok(text
        .char_indices()
        .map(|(start, ch)| {
            let mut tokens: Vec<usize> = byte_owner[start..start + ch.len_utf8()].to_vec();
            tokens.dedup();
            CharTokens { ch, tokens }
        })
        .collect())
}

/// Per-layer cosine between the mean hidden states of two token sequences.
/// Entry `l` compares block `l`'s outputs; the last entry is the final norm.
pub fn layer_cosines(decoder: &FrozenDecoder, a: &[usize], b: &[usize]) -> Result<Vec<f64>> {
    let sa = decoder.forward_hidden(&decoder.embed(a)?)?;
    let sb = decoder.forward_hidden(&decoder.embed(b)?)?;
    let cos = |x: &crate::tensor::Matrix, y: &crate::tensor::Matrix| {
        let mx = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let my = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        mx.dot(&my) / (l2_norm(mx.view()) * l2_norm(my.view())).max(NORM_EPS)
    };
    let mut out: Vec<f64> = sa
        .layers
        .iter()
        .zip(&sb.layers)
        .map(|(x, y)| cos(x, y))
        .collect();
    out.push(cos(&sa.hidden, &sb.hidden));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_toy_models, ToyModelConfig};
    use proptest::prelude::*;

    fn tok() -> crate::models::CharTokenizer {
        crate::models::decoder_tokenizer(8)
    }

    #[test]
    fn ascii_is_one_token_per_char() {
        let s = measure_text("Hello world", &tok()).unwrap();
        assert_eq!(s.token_count, 11);
        assert_eq!(s.tokens_per_char, 1.0);
        assert!(measure_text("", &tok()).is_none());
    }

    #[test]
    fn identical_pair_has_unit_ratio() {
        let p = SentencePair::new("a", "same text", "same text");
        let r = measure_inflation(&[p], &tok()).unwrap();
        assert_eq!(r.rows[0].inflation_ratio, 1.0);
    }

    #[test]
    fn empty_sides_are_excluded() {
        let pairs = [
            SentencePair::new("a", "", "x"),
            SentencePair::new("b", "ab", "a"),
        ];
        let r = measure_inflation(&pairs, &tok()).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.rows.len(), 1);
        assert!(measure_inflation(&pairs[..1], &tok()).is_err());
    }

    #[test]
    fn khmer_is_inflated_by_byte_fallback() {
        // Each Khmer code point is three UTF-8 bytes, hence three tokens.
        let s = measure_text("\u{1780}\u{1781}\u{1782}", &tok()).unwrap();
        assert_eq!(s.token_count, 9);
        assert_eq!(s.tokens_per_char, 3.0);
    }

    #[test]
    fn aggregates_match_hand_recompute() {
        // Twenty pairs: target is always 4 ASCII chars, source length 1..=20.
        let pairs: Vec<SentencePair> = (1..=20)
            .map(|n| SentencePair::new(format!("p{n}"), "x".repeat(n), "abcd"))
            .collect();
        let r = measure_inflation(&pairs, &tok()).unwrap();
        // ratios n/4 for n = 1..=20.
        assert!((r.inflation_ratio.mean - 10.5 / 4.0).abs() < 1e-12);
        assert!((r.inflation_ratio.median - 10.5 / 4.0).abs() < 1e-12);
        // position 0.95·19 = 18.05 → 19 + 0.05·(20 − 19) = 19.05.
        assert!((r.inflation_ratio.p95 - 19.05 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn budget_examples() {
        assert_eq!(
            context_budget(130, 2048).unwrap(),
            ContextBudget {
                remaining: 1918,
                overflow: false
            }
        );
        assert_eq!(
            context_budget(2048, 2048).unwrap(),
            ContextBudget {
                remaining: 0,
                overflow: false
            }
        );
        assert_eq!(
            context_budget(3000, 2048).unwrap(),
            ContextBudget {
                remaining: 0,
                overflow: true
            }
        );
        assert!(context_budget(1, 0).is_err());
    }

    #[test]
    fn annotation_marks_split_characters() {
        let ann = annotate_chars("a\u{1780}b", &tok()).unwrap();
        assert_eq!(ann.len(), 3);
        assert_eq!(ann[0].tokens, vec![0]);
        assert_eq!(ann[1].tokens, vec![1, 2, 3]);
        assert!(ann[1].is_split());
        assert_eq!(ann[2].tokens, vec![4]);
    }

    #[test]
    fn layer_cosines_of_identical_text_are_one() {
        let m = build_toy_models(&ToyModelConfig::default()).unwrap();
        let ids = m.tokenizer.encode("same words");
        let c = layer_cosines(&m.decoder, &ids, &ids).unwrap();
        assert_eq!(c.len(), m.decoder.config().layers + 1);
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn report_is_order_invariant(lens in proptest::collection::vec((1usize..30, 1usize..30), 1..20), seed in any::<u64>()) {
            let pairs: Vec<SentencePair> = lens
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| SentencePair::new(format!("p{i}"), "\u{1780}".repeat(a), "e".repeat(b)))
                .collect();
            let mut shuffled = pairs.clone();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = measure_inflation(&pairs, &tok()).unwrap();
            let b = measure_inflation(&shuffled, &tok()).unwrap();
            prop_assert!((a.inflation_ratio.mean - b.inflation_ratio.mean).abs() < 1e-12);
            prop_assert_eq!(a.inflation_ratio.median, b.inflation_ratio.median);
            prop_assert_eq!(a.inflation_ratio.p95, b.inflation_ratio.p95);
            for r in &a.rows {
                prop_assert_eq!(r.source.tokens_per_char, r.source.token_count as f64 / r.source.chars as f64);
                prop_assert!(r.inflation_ratio > 0.0);
            }
        }
    }
}

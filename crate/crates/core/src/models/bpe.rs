//! Byte-level BPE loader (GPT-2 / LLaMA-3 family).
//!
//! Accepts either a Hugging Face `tokenizer.json` whose model is byte-level
//! BPE, or a `vocab.json` + `merges.txt` pair. Only used for token counting
//! in the inflation analysis, so there is no training and no normalizer
//! support; text is pre-split with the family's regex and then merged by
//! rank. Round-trips are byte-exact.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde_json::Value;

use super::tokenizer::Tokenizer;
use crate::{Error, Result};

/// Pre-tokenization pattern used by LLaMA-3 tokenizers.
pub const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";
/// Pre-tokenization pattern used by GPT-2 tokenizers.
pub const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// GPT-2's reversible byte → printable-char table.
fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0u32..256 {
        let printable =
            (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1")
        } else {
            n += 1;
            char::from_u32(255 + n).expect("valid scalar")
        };
    }
    table
}

pub struct BpeTokenizer {
    vocab: HashMap<String, usize>,
    id_to_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(String, String), usize>,
    added: Vec<(String, usize)>,
    pattern: Regex,
    byte_chars: [char; 256],
}

impl std::fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("vocab_size", &self.id_to_bytes.len())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

fn find_regex(v: &Value) -> Option<String> {
    match v {
        Value::Object(map) => {
            if let Some(Value::Object(p)) = map.get("pattern") {
                if let Some(Value::String(r)) = p.get("Regex") {
                    return Some(r.clone());
                }
            }
            map.values().find_map(find_regex)
        }
        Value::Array(items) => items.iter().find_map(find_regex),
        _ => None,
    }
}

fn parse_merges(v: &Value) -> Result<Vec<(String, String)>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::Tokenizer("`merges` must be an array".into()))?;
    items
        .iter()
        .map(|m| match m {
            Value::String(s) => s
                .split_once(' ')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Tokenizer(format!("bad merge `{s}`"))),
            Value::Array(pair) if pair.len() == 2 => match (&pair[0], &pair[1]) {
                (Value::String(a), Value::String(b)) => Ok((a.clone(), b.clone())),
                _ => Err(Error::Tokenizer("bad merge pair".into())),
            },
            _ => Err(Error::Tokenizer("bad merge entry".into())),
        })
        .collect()
}

impl BpeTokenizer {
    pub fn new(
        vocab: HashMap<String, usize>,
        merges: Vec<(String, String)>,
        added: Vec<(String, usize)>,
        pattern: &str,
    ) -> Result<Self> {
        let byte_chars = byte_to_unicode();
        let mut inverse: HashMap<char, u8> = HashMap::new();
        for (b, c) in byte_chars.iter().enumerate() {
            inverse.insert(*c, b as u8);
        }
        let size = vocab
            .values()
            .chain(added.iter().map(|(_, id)| id))
            .max()
            .map_or(0, |m| m + 1);
        let mut id_to_bytes = vec![Vec::new(); size];
        for (tok, &id) in &vocab {
            id_to_bytes[id] = tok
                .chars()
                .map(|c| inverse.get(&c).copied().unwrap_or(b'?'))
                .collect();
        }
        for (tok, id) in &added {
            id_to_bytes[*id] = tok.as_bytes().to_vec();
        }
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(r, pair)| (pair, r))
            .collect();
        let pattern = Regex::new(pattern).map_err(|e| Error::Tokenizer(e.to_string()))?;
        let mut added = added;
        added.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Ok(Self {
            vocab,
            id_to_bytes,
            ranks,
            added,
            pattern,
            byte_chars,
        })
    }

    /// Loads a Hugging Face `tokenizer.json` with a byte-level BPE model.
    pub fn from_tokenizer_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root: Value = serde_json::from_str(&text)?;
        let model = root
            .get("model")
            .ok_or_else(|| Error::Tokenizer("missing `model`".into()))?;
        if let Some(t) = model.get("type").and_then(Value::as_str) {
            if t != "BPE" {
                return Err(Error::Tokenizer(format!("unsupported model type `{t}`")));
            }
        }
        let vocab: HashMap<String, usize> = serde_json::from_value(
            model
                .get("vocab")
                .cloned()
                .ok_or_else(|| Error::Tokenizer("missing `model.vocab`".into()))?,
        )?;
        let merges = parse_merges(model.get("merges").unwrap_or(&Value::Array(vec![])))?;
        let added = root
            .get("added_tokens")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|t| {
                        Some((
                            t.get("content")?.as_str()?.to_string(),
                            t.get("id")?.as_u64()? as usize,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let pattern = root
            .get("pre_tokenizer")
            .and_then(find_regex)
            .unwrap_or_else(|| LLAMA3_PATTERN.to_string());
        Self::new(vocab, merges, added, &pattern)
    }

    /// Loads GPT-2 style `vocab.json` + `merges.txt`.
    pub fn from_vocab_merges(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        let vocab: HashMap<String, usize> = serde_json::from_str(&std::fs::read_to_string(vocab)?)?;
        let merges = std::fs::read_to_string(merges)?
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::Tokenizer(format!("bad merge line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, merges, Vec::new(), GPT2_PATTERN)
    }

    fn bpe_piece(&self, piece: &str, out: &mut Vec<usize>) {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_chars[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols.splice(i..i + 2, [merged]);
        }
        for s in symbols {
            match self.vocab.get(&s) {
                Some(&id) => out.push(id),
                // Unreachable for a consistent vocab; spell it bytewise.
                None => out.extend(
                    s.chars()
                        .filter_map(|c| self.vocab.get(&c.to_string()).copied()),
                ),
            }
        }
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<usize>) {
        for m in self.pattern.find_iter(text) {
            match m {
                Ok(m) => self.bpe_piece(m.as_str(), out),
                Err(_) => {
                    self.bpe_piece(text, out);
                    return;
                }
            }
        }
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some((tok, id)) = self
                .added
                .iter()
                .find(|(t, _)| !t.is_empty() && rest.starts_with(t.as_str()))
            {
                self.encode_plain(&text[start..i], &mut out);
                out.push(*id);
                i += tok.len();
                start = i;
            } else {
                i += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
        self.encode_plain(&text[start..], &mut out);
        out
    }

    fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&id| self.token_bytes(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        self.id_to_bytes.len()
    }

    fn token_bytes(&self, id: usize) -> Vec<u8> {
        self.id_to_bytes.get(id).cloned().unwrap_or_default()
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        self.added
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, id)| *id)
            .or_else(|| self.vocab.get(token).copied())
    }
}

//! Tokenizer abstraction and the deterministic character-level toy tokenizer.

use std::collections::HashMap;

/// Reserved marker whose decoder hidden state is the alignment target.
pub const FOREIGN_EMB: &str = "<foreign_emb>";

pub fn slot_token(k: usize) -> String {
    format!("<f{k}>")
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
    /// Raw bytes a token stands for; used to map tokens back onto characters.
    fn token_bytes(&self, id: usize) -> Vec<u8>;
    fn token_id(&self, token: &str) -> Option<usize>;
}

/// Character tokenizer: special tokens, then 256 byte-fallback tokens, then
/// one token per alphabet character. Characters outside the alphabet are
/// spelled as their UTF-8 bytes, which is what inflates foreign scripts.
///
/// `decode(encode(t)) == t` for every string: byte-fallback tokens carry the
/// exact UTF-8 bytes, so there is no whitespace normalization.
#[derive(Clone, Debug)]
pub struct CharTokenizer {
    specials: Vec<String>,
    alphabet: Vec<char>,
    char_ids: HashMap<char, usize>,
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

impl CharTokenizer {
    /// `alphabet` characters get their own token (duplicates are ignored);
    /// `slots` reserves `<f0>`…`<f{slots-1}>`.
    pub fn new(alphabet: &str, slots: usize) -> Self {
        let mut specials: Vec<String> = [PAD, BOS, EOS, UNK, FOREIGN_EMB]
            .iter()
            .map(|s| s.to_string())
            .collect();
        specials.extend((0..slots).map(slot_token));
        let mut chars = Vec::new();
        let mut char_ids = HashMap::new();
        let base = specials.len() + 256;
        for ch in alphabet.chars() {
            if let std::collections::hash_map::Entry::Vacant(e) = char_ids.entry(ch) {
                e.insert(base + chars.len());
                chars.push(ch);
            }
        }
        Self {
            specials,
            alphabet: chars,
            char_ids,
        }
    }

    /// Printable ASCII plus newline.
    pub fn ascii_alphabet() -> String {
        let mut s: String = (0x20u8..0x7f).map(char::from).collect();
        s.push('\n');
        s
    }

    pub fn num_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn special_ids(&self) -> impl Iterator<Item = usize> + '_ {
        0..self.specials.len()
    }

    fn byte_id(&self, b: u8) -> usize {
        self.specials.len() + b as usize
    }

    fn match_special(&self, rest: &str) -> Option<(usize, usize)> {
        if !rest.starts_with('<') {
            return None;
        }
        self.specials
            .iter()
            .enumerate()
            .filter(|(_, s)| rest.starts_with(s.as_str()))
            .max_by_key(|(_, s)| s.len())
            .map(|(i, s)| (i, s.len()))
    }
}

impl Tokenizer for CharTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len());
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some((id, len)) = self.match_special(rest) {
                ids.push(id);
                i += len;
                continue;
            }
            let ch = rest.chars().next().expect("non-empty remainder");
            match self.char_ids.get(&ch) {
                Some(&id) => ids.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    ids.extend(ch.encode_utf8(&mut buf).bytes().map(|b| self.byte_id(b)));
                }
            }
            i += ch.len_utf8();
        }
        ids
    }

    fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend(self.token_bytes(id));
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        self.specials.len() + 256 + self.alphabet.len()
    }

    fn token_bytes(&self, id: usize) -> Vec<u8> {
        let ns = self.specials.len();
        if id < ns {
            self.specials[id].as_bytes().to_vec()
        } else if id < ns + 256 {
            vec![(id - ns) as u8]
        } else if let Some(ch) = self.alphabet.get(id - ns - 256) {
            ch.to_string().into_bytes()
        } else {
            UNK.as_bytes().to_vec()
        }
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        if let Some(i) = self.specials.iter().position(|s| s == token) {
            return Some(i);
        }
        let mut chars = token.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => self.char_ids.get(&c).copied(),
            _ => None,
        }
    }
}

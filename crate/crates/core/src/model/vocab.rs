//! Word-level vocabulary with byte fallback.
//!
//! Text is cut into pieces: an optional single leading space followed by an
//! alphanumeric run or one other character, or a lone whitespace character.
//! Known pieces map to one id; anything else is spelled out as UTF-8 byte
//! tokens, so `decode(encode(t)) == t` for every string.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const BYTE_BASE: u32 = 4;
pub const N_RESERVED: usize = 4 + 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

fn reserved_tokens() -> Vec<String> {
    let mut t: Vec<String> = ["<pad>", "<bos>", "<eos>", "<mask>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
    t
}

/// Split text into pieces; concatenating the pieces restores the input.
pub fn pieces(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let start = i;
        let c = chars[i].1;
        if c == ' ' && i + 1 < n && !chars[i + 1].1.is_whitespace() {
            i += 1;
        } else if c.is_whitespace() {
            out.push(&text[byte_at(start)..byte_at(i + 1)]);
            i += 1;
            continue;
        }
        if chars[i].1.is_alphanumeric() {
            while i < n && chars[i].1.is_alphanumeric() {
                i += 1;
            }
        } else {
            i += 1;
        }
        out.push(&text[byte_at(start)..byte_at(i)]);
    }
    out
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Build from public text only. Pieces are ranked by descending frequency,
    /// ties broken lexicographically; single-byte pieces are left to the byte
    /// tokens since they would not shorten anything.
    pub fn build<S: AsRef<str>>(
        public_sources: impl IntoIterator<Item = S>,
        max_size: usize,
    ) -> Result<Self, ModelError> {
        if max_size <= N_RESERVED {
            return Err(ModelError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for src in public_sources {
            for p in pieces(src.as_ref()) {
                if p.len() > 1 {
                    *counts.entry(p.to_string()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = reserved_tokens();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - N_RESERVED)
                .map(|(p, _)| p),
        );
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < BYTE_BASE
    }

    /// Encode one piece (or any string) without further splitting.
    pub fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        match self.index.get(piece) {
            Some(&id) if id as usize >= N_RESERVED => out.push(id),
            _ => out.extend(piece.bytes().map(|b| BYTE_BASE + b as u32)),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for p in pieces(text) {
            self.encode_piece(p, &mut out);
        }
        out
    }

    /// Special tokens decode to nothing; byte runs are reassembled as UTF-8
    /// (lossily, should an arbitrary id sequence split a character).
    pub fn decode(&self, ids: &[u32]) -> Result<String, ModelError> {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(ModelError::InvalidTokenId(id, self.tokens.len()));
            }
            if (BYTE_BASE..N_RESERVED as u32).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut out);
            if id as usize >= N_RESERVED {
                out.push_str(&self.tokens[id as usize]);
            }
        }
        flush(&mut bytes, &mut out);
        Ok(out)
    }
}

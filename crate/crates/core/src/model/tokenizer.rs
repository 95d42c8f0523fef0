// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer compatible with the GPT-2 `vocab.json` /
//! `merges.txt` tables.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, every piece is
//! mapped byte-by-byte onto printable unicode characters, and merges are
//! applied lowest rank first until none applies. The `<|endoftext|>` string
//! is recognized as the special end-of-text token when the vocabulary has it.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const END_OF_TEXT: &str = "<|endoftext|>";

const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The reversible byte -> printable char table used by GPT-2.
fn byte_to_char_table() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(u32::from('¡')..=u32::from('¬'))
        .chain(u32::from('®')..=u32::from('ÿ'))
        .collect();
    let mut chars: Vec<u32> = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("table chars are valid scalar values");
    }
    table
}

/// The 256 single-byte tokens, id == byte value.
pub(crate) fn byte_level_vocab() -> HashMap<String, TokenId> {
    byte_to_char_table()
        .iter()
        .enumerate()
        .map(|(b, c)| (c.to_string(), b as TokenId))
        .collect()
}

/// Vocabulary and merge rules.
#[derive(Debug, Clone)]
pub struct TokenizerTables {
    encoder: HashMap<String, TokenId>,
    /// Raw bytes of every token, indexed by id.
    token_bytes: Vec<Vec<u8>>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    end_of_text: Option<TokenId>,
    pretokenizer: Regex,
}

impl TokenizerTables {
    pub fn new(vocab: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = vocab.len();
        let byte_to_char = byte_to_char_table();
        let char_to_byte: HashMap<char, u8> = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, c)| (*c, b as u8))
            .collect();

        let mut token_bytes: Vec<Option<Vec<u8>>> = vec![None; n];
        for (token, &id) in &vocab {
            let slot = token_bytes.get_mut(id as usize).ok_or_else(|| {
                Error::SchemaViolation(format!(
                    "token id {id} for {token:?} is outside [0, {n})"
                ))
            })?;
            if slot.is_some() {
                return Err(Error::SchemaViolation(format!("token id {id} assigned twice")));
            }
            let bytes = if token == END_OF_TEXT {
                token.as_bytes().to_vec()
            } else {
                token
                    .chars()
                    .map(|c| {
                        char_to_byte.get(&c).copied().ok_or_else(|| {
                            Error::SchemaViolation(format!(
                                "token {token:?} contains non byte-level char {c:?}"
                            ))
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?
            };
            *slot = Some(bytes);
        }
        // n distinct ids, all < n: the map is a bijection onto [0, n)
        let token_bytes = token_bytes.into_iter().map(Option::unwrap).collect();

        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::SchemaViolation(format!(
                    "duplicate merge rule {} {}",
                    pair.0, pair.1
                )));
            }
        }

        let end_of_text = vocab.get(END_OF_TEXT).copied();
        Ok(TokenizerTables {
            encoder: vocab,
            token_bytes,
            merges,
            ranks,
            byte_to_char,
            end_of_text,
            pretokenizer: Regex::new(PRETOKENIZE).expect("static pattern compiles"),
        })
    }

    /// Parse `vocab.json` and `merges.txt` contents.
    pub fn from_strings(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let vocab: HashMap<String, TokenId> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::SchemaViolation(format!("vocab.json: {e}")))?;
        let mut merges = Vec::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if (lineno == 0 && line.starts_with("#version")) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::SchemaViolation(format!(
                        "merges.txt line {}: expected two space-separated symbols",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(vocab, merges)
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::MissingArtifact(path));
            }
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Self::from_strings(&read("vocab.json")?, &read("merges.txt")?)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn end_of_text(&self) -> Option<TokenId> {
        self.end_of_text
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.encoder.get(token).copied()
    }

    /// Raw bytes a token decodes to.
    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        self.token_bytes
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownToken {
                id,
                vocab_size: self.vocab_size(),
            })
    }

    /// The vocabulary key of a token (byte-level remapped form).
    pub fn token_string(&self, id: TokenId) -> Result<String> {
        let bytes = self.token_bytes(id)?;
        if Some(id) == self.end_of_text {
            return Ok(END_OF_TEXT.to_string());
        }
        Ok(bytes.iter().map(|b| self.byte_to_char[*b as usize]).collect())
    }

    /// Encode text into token ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        match self.end_of_text {
            Some(eot) => {
                let mut segments = text.split(END_OF_TEXT).peekable();
                while let Some(seg) = segments.next() {
                    self.encode_ordinary(seg, &mut ids);
                    if segments.peek().is_some() {
                        ids.push(eot);
                    }
                }
            }
            None => self.encode_ordinary(text, &mut ids),
        }
        ids
    }

    fn encode_ordinary(&self, text: &str, out: &mut Vec<TokenId>) {
        for piece in self.pretokenizer.find_iter(text) {
            // the pattern has no catastrophic constructs; errors only on backtrack limits
            let piece = piece.expect("pre-tokenizer backtrack limit").as_str();
            let symbols: Vec<String> = piece
                .bytes()
                .map(|b| self.byte_to_char[b as usize].to_string())
                .collect();
            for symbol in self.bpe(symbols) {
                // every single byte and every merge product is in a well-formed vocab
                match self.encoder.get(&symbol) {
                    Some(&id) => out.push(id),
                    None => out.extend(symbol.chars().filter_map(|c| {
                        self.encoder.get(c.encode_utf8(&mut [0; 4]) as &str).copied()
                    })),
                }
            }
        }
    }

    fn bpe(&self, mut word: Vec<String>) -> Vec<String> {
        while word.len() > 1 {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && &word[i] == left && &word[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Decode ids to text; invalid UTF-8 byte runs become U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Build a [`TokenSequence`] with per-token texts and byte spans.
    pub fn sequence(&self, ids: Vec<TokenId>) -> Result<TokenSequence> {
        let mut texts = Vec::with_capacity(ids.len());
        let mut offsets = Vec::with_capacity(ids.len());
        let mut bytes = Vec::new();
        for &id in &ids {
            let tb = self.token_bytes(id)?;
            texts.push(String::from_utf8_lossy(tb).into_owned());
            offsets.push(bytes.len()..bytes.len() + tb.len());
            bytes.extend_from_slice(tb);
        }
        Ok(TokenSequence {
            ids,
            texts,
            offsets,
            bytes,
        })
    }
}

/// Token ids with their decoded strings.
///
/// `offsets` are byte ranges into the concatenated token bytes, which for an
/// encoded prompt are exactly the UTF-8 bytes of that prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub texts: Vec<String>,
    offsets: Vec<Range<usize>>,
    bytes: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }

    pub fn offsets(&self) -> &[Range<usize>] {
        &self.offsets
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// 0-based index of the token whose byte span contains `byte`.
    pub fn token_at_byte(&self, byte: usize) -> Option<usize> {
        self.offsets.iter().position(|r| r.contains(&byte))
    }

    /// The sub-sequence `range` (0-based token indices).
    pub fn slice(&self, range: Range<usize>) -> TokenSequence {
        let base = self.offsets.get(range.start).map_or(0, |r| r.start);
        let end = if range.end > range.start {
            self.offsets[range.end - 1].end
        } else {
            base
        };
        TokenSequence {
            ids: self.ids[range.clone()].to_vec(),
            texts: self.texts[range.clone()].to_vec(),
            offsets: self.offsets[range]
                .iter()
                .map(|r| r.start - base..r.end - base)
                .collect(),
            bytes: self.bytes[base..end].to_vec(),
        }
    }
}

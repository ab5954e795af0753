use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backbone::ModelConfig;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";

/// Words the hard template needs; always kept in the vocabulary.
pub const TEMPLATE_WORDS: [&str; 3] = ["it", "was", "."];

/// Lowercasing whitespace-and-punctuation tokenizer with a frequency-capped
/// vocabulary. Ids 0..3 are reserved; reserved tokens are never produced
/// when encoding plain text (angle brackets split into their own tokens).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "TokenizerFile", from = "TokenizerFile")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        TokenizerFile { vocab: t.vocab }
    }
}

impl From<TokenizerFile> for Tokenizer {
    fn from(f: TokenizerFile) -> Self {
        Tokenizer::from_vocab(f.vocab)
    }
}

/// Splits into lowercase word and single-character punctuation tokens.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let ch = ch.to_lowercase().next().unwrap_or(ch);
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`, capped at `max_vocab` entries
    /// including the reserved ids. `forced` words (e.g. verbalizer tokens)
    /// are always included, as are the template words. Remaining slots go
    /// to the most frequent tokens; ties break lexicographically so the
    /// build is deterministic.
    pub fn build<S: AsRef<str>>(texts: &[S], max_vocab: usize, forced: &[&str]) -> Result<Tokenizer> {
        let mut vocab: Vec<String> =
            vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), MASK_TOKEN.to_string()];
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, v) in vocab.iter().enumerate() {
            seen.insert(v.clone(), i);
        }
        for w in TEMPLATE_WORDS.iter().copied().chain(forced.iter().copied()) {
            let toks = split_text(w);
            if toks.len() != 1 {
                return Err(Error::config(format!(
                    "forced vocabulary entry {w:?} is not a single token"
                )));
            }
            let tok = toks.into_iter().next().unwrap();
            if !seen.contains_key(&tok) {
                seen.insert(tok.clone(), vocab.len());
                vocab.push(tok);
            }
        }
        if max_vocab < vocab.len() {
            return Err(Error::config(format!(
                "max_vocab {max_vocab} below the {} reserved and forced entries",
                vocab.len()
            )));
        }

        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in split_text(t.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !seen.contains_key(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked.into_iter().take(max_vocab - vocab.len()) {
            seen.insert(tok.clone(), vocab.len());
            vocab.push(tok);
        }
        Ok(Tokenizer { index: seen, vocab })
    }

    pub fn from_vocab(vocab: Vec<String>) -> Tokenizer {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn token_id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    /// Unknown words map to `UNK_ID`; reserved tokens are never emitted.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_text(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

/// A templated classification input: token ids with exactly one mask slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatedInput {
    pub ids: Vec<usize>,
    pub mask_pos: usize,
}

/// Appends the hard template `it was <mask> .` and truncates the input
/// from the right so that prompt plus input fit in `max_seq_len`. The
/// template suffix is always preserved.
pub fn apply_template(text: &str, tok: &Tokenizer, cfg: &ModelConfig) -> Result<TemplatedInput> {
    let budget = cfg
        .max_seq_len
        .checked_sub(cfg.prompt_len)
        .ok_or_else(|| Error::config("prompt_len exceeds max_seq_len"))?;
    if budget < 4 {
        return Err(Error::config(format!(
            "no room for the template: max_seq_len {} minus prompt_len {} leaves {budget} < 4",
            cfg.max_seq_len, cfg.prompt_len
        )));
    }
    let it = tok
        .token_id("it")
        .ok_or_else(|| Error::config("vocabulary is missing template word 'it'"))?;
    let was = tok
        .token_id("was")
        .ok_or_else(|| Error::config("vocabulary is missing template word 'was'"))?;
    let dot = tok
        .token_id(".")
        .ok_or_else(|| Error::config("vocabulary is missing template word '.'"))?;

    let mut ids = tok.encode(text);
    ids.truncate(budget - 4);
    let mask_pos = ids.len() + 2;
    ids.extend_from_slice(&[it, was, MASK_ID, dot]);
    Ok(TemplatedInput { ids, mask_pos })
}

//! Word-level tokenization, vocabulary and fixed-size windows.
//!
//! Tokens are maximal runs of alphanumeric characters, lowercased.
//! Character spans are byte offsets into the original text, so
//! `&text[start..end]` is always the token's source substring.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const DEFAULT_WINDOW: usize = 128;
pub const DEFAULT_MAX_TOKENS: usize = 10_000;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased alphanumeric runs with their byte spans.
pub fn word_tokens(text: &str) -> Vec<WordToken> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(WordToken {
                    text: text[s..i].to_lowercase(),
                    start: s,
                    end: i,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(WordToken {
            text: text[s..].to_lowercase(),
            start: s,
            end: text.len(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary; ties broken lexicographically. Tokens
    /// below `min_count` are left out (they tokenize to UNK). `max_size`
    /// includes the two reserved entries.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_count: usize,
    ) -> Result<Self, TextError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for text in texts {
            docs += 1;
            for tok in word_tokens(text) {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(max_size.saturating_sub(2)).map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, ids }
    }

    /// Builds from an explicit id-ordered token list, checking reserved ids.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN) {
            return Err(TextError::Format {
                line: 1,
                message: "ids 0 and 1 must be [PAD] and [UNK]".into(),
            });
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(TextError::Format {
                line: 0,
                message: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn parse_tsv(content: &str) -> Result<Self, TextError> {
        let mut tokens = Vec::new();
        for (idx, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| TextError::Format {
                line: idx + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| TextError::Format {
                line: idx + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(TextError::Format {
                    line: idx + 1,
                    message: format!("ids must be dense and ascending, got {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        Self::from_token_list(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDocument {
    pub token_ids: Vec<u32>,
    pub char_spans: Vec<(usize, usize)>,
    /// Each of length `window`; the last one is PAD-padded.
    pub windows: Vec<Vec<u32>>,
    pub window: usize,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Token ids recovered from the windows with PAD removed.
    pub fn unpadded(&self) -> Vec<u32> {
        self.windows.iter().flatten().copied().filter(|&t| t != PAD_ID).collect()
    }

    /// Builds a document from raw ids (used by tests and tools).
    pub fn from_ids(token_ids: Vec<u32>, window: usize) -> Self {
        let spans = (0..token_ids.len()).map(|i| (i, i + 1)).collect();
        Self::assemble(token_ids, spans, window)
    }

    fn assemble(token_ids: Vec<u32>, char_spans: Vec<(usize, usize)>, window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        let windows = if token_ids.is_empty() {
            vec![vec![PAD_ID; window]]
        } else {
            token_ids
                .chunks(window)
                .map(|c| {
                    let mut w = c.to_vec();
                    w.resize(window, PAD_ID);
                    w
                })
                .collect()
        };
        TokenizedDocument {
            token_ids,
            char_spans,
            windows,
            window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub window: usize,
    pub max_tokens: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            window: DEFAULT_WINDOW,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, cfg: TokenizerConfig) -> TokenizedDocument {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for tok in word_tokens(text).into_iter().take(cfg.max_tokens) {
        ids.push(vocab.id(&tok.text));
        spans.push((tok.start, tok.end));
    }
    TokenizedDocument::assemble(ids, spans, cfg.window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_vocab() {
        let v = Vocabulary::build(["pain pain fever"], 100, 1).unwrap();
        assert!(v.contains("pain") && v.contains("fever"));
        assert_eq!(v.id("pain"), 2);
        assert_eq!(v.id("fever"), 3);
        assert_eq!(v.id("cough"), UNK_ID);

        let v3 = Vocabulary::build(["pain pain fever"], 100, 3).unwrap();
        let doc = tokenize("pain pain fever", &v3, TokenizerConfig::default());
        assert_eq!(doc.token_ids, vec![UNK_ID, UNK_ID, UNK_ID]);
        let v2 = Vocabulary::build(["pain pain fever"], 100, 2).unwrap();
        assert_eq!(tokenize("fever", &v2, TokenizerConfig::default()).token_ids, vec![UNK_ID]);

        assert!(matches!(Vocabulary::build(Vec::<&str>::new(), 10, 1), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn vocab_is_deterministic_with_lexicographic_ties() {
        let texts = ["b a c", "c a b", "d"];
        let v1 = Vocabulary::build(texts, 100, 1).unwrap();
        let v2 = Vocabulary::build(texts, 100, 1).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(&v1.tokens()[2..], &["a", "b", "c", "d"]);
        let small = Vocabulary::build(texts, 4, 1).unwrap();
        assert_eq!(small.tokens(), &["[PAD]", "[UNK]", "a", "b"]);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::build(["Heart failure, with edema. Heart!"], 100, 1).unwrap();
        let back = Vocabulary::parse_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert!(Vocabulary::parse_tsv("a\t0\n").is_err());
        assert!(Vocabulary::parse_tsv("[PAD]\t0\n[UNK]\t2\n").is_err());
    }

    #[test]
    fn windows() {
        let text = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let v = Vocabulary::build([text.as_str()], 1000, 1).unwrap();
        let doc = tokenize(&text, &v, TokenizerConfig::default());
        assert_eq!(doc.windows.len(), 3);
        assert_eq!(doc.windows[2].iter().filter(|&&t| t == PAD_ID).count(), 84);

        let empty = tokenize("", &v, TokenizerConfig::default());
        assert_eq!(empty.len(), 0);
        assert_eq!(empty.windows, vec![vec![PAD_ID; 128]]);

        let long = vec!["w1"; 12_000].join(" ");
        let doc = tokenize(&long, &v, TokenizerConfig::default());
        assert_eq!(doc.len(), 10_000);
        assert_eq!(doc.windows.len(), 79);
    }

    #[test]
    fn punctuation_and_case() {
        let toks = word_tokens("BMI 34.5kg/m2, Type-2 diabetes! Bæk");
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["bmi", "34", "5kg", "m2", "type", "2", "diabetes", "bæk"]);
    }

    proptest! {
        #[test]
        fn spans_and_windows_reconstruct(text in "[a-zA-Z0-9 ,.;:æøå!-]{0,400}", window in 1usize..40) {
            let v = Vocabulary::build([text.as_str()], 50, 1).unwrap();
            let doc = tokenize(&text, &v, TokenizerConfig { window, max_tokens: 10_000 });
            let words = word_tokens(&text);
            prop_assert_eq!(doc.len(), words.len());
            for (i, &(s, e)) in doc.char_spans.iter().enumerate() {
                prop_assert_eq!(text[s..e].to_lowercase(), words[i].text.clone());
                if i > 0 {
                    prop_assert!(doc.char_spans[i - 1].1 <= s);
                }
            }
            let expected = doc.len().max(1).div_ceil(window);
            prop_assert_eq!(doc.windows.len(), expected);
            prop_assert!(doc.windows.iter().all(|w| w.len() == window));
            prop_assert_eq!(doc.unpadded(), doc.token_ids.clone());
        }
    }
}

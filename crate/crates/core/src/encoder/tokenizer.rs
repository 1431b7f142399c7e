//! Word-level tokenizer: lowercasing, punctuation splitting and whitespace
//! segmentation, with a corpus-built vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Byte spans of the tokens in `text`. Special markers such as `<cls>` are
/// single tokens; any other non-alphanumeric, non-space character stands
/// alone; alphanumeric runs form words.
pub fn word_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c == '<' {
            if let Some(sp) = SPECIALS.iter().find(|sp| text[i..].starts_with(**sp)) {
                if let Some(ws) = word_start.take() {
                    spans.push(ws..i);
                }
                spans.push(i..i + sp.len());
                while iter.peek().is_some_and(|(j, _)| *j < i + sp.len()) {
                    iter.next();
                }
                continue;
            }
        }
        if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(ws) = word_start.take() {
            spans.push(ws..i);
        }
        if !c.is_whitespace() {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(ws) = word_start {
        spans.push(ws..text.len());
    }
    spans
}

/// Lowercased token strings of `text`.
pub fn split_words(text: &str) -> Vec<String> {
    word_spans(text).into_iter().map(|r| text[r].to_lowercase()).collect()
}

pub fn count_tokens(text: &str) -> usize {
    word_spans(text).len()
}

/// Longest prefix of `text` holding at most `budget` tokens.
pub fn truncate_tokens(text: &str, budget: usize) -> &str {
    let spans = word_spans(text);
    if spans.len() <= budget {
        return text;
    }
    if budget == 0 {
        return "";
    }
    &text[..spans[budget - 1].end]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut t = Tokenizer { tokens: Vec::new(), index: HashMap::new() };
        for sp in SPECIALS {
            t.add(sp);
        }
        t
    }
}

impl Tokenizer {
    /// Vocabulary over every token of `corpus`, in first-seen order after the specials.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut t = Tokenizer::default();
        for text in corpus {
            for w in split_words(text) {
                t.add(&w);
            }
        }
        t
    }

    fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Extends the vocabulary with the tokens of `text`.
    pub fn extend(&mut self, text: &str) {
        for w in split_words(text) {
            self.add(&w);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token ids of `text`; unknown words map to `<unk>`. Sequences longer
    /// than `max_len` are cut, keeping a trailing `<sep>` if there was one.
    /// Empty text yields a single `<unk>`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK_ID)).collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        if ids.len() > max_len {
            let ends_with_sep = ids.last() == Some(&SEP_ID);
            ids.truncate(max_len);
            if ends_with_sep && max_len > 0 {
                ids[max_len - 1] = SEP_ID;
            }
        }
        ids
    }

    /// One token per line, line number = id.
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut t = Tokenizer { tokens: Vec::new(), index: HashMap::new() };
        for line in r.lines() {
            let line = line?;
            t.add(line.trim_end_matches('\r'));
        }
        for (i, sp) in SPECIALS.iter().enumerate() {
            if t.tokens.get(i).map(String::as_str) != Some(*sp) {
                return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "vocabulary must start with the special tokens"));
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_specials() {
        assert_eq!(
            split_words("<cls> Virtue Party, Turkey <sep>"),
            vec!["<cls>", "virtue", "party", ",", "turkey", "<sep>"]
        );
        assert_eq!(split_words("a|b"), vec!["a", "|", "b"]);
        assert_eq!(split_words("x<sep>y"), vec!["x", "<sep>", "y"]);
        assert_eq!(split_words("a < b"), vec!["a", "<", "b"]);
    }

    #[test]
    fn encodes_known_words() {
        let tok = Tokenizer::build(["a b"]);
        let ids = tok.encode("<cls> a b <sep>", 16);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(ids[3], SEP_ID);
    }

    #[test]
    fn unknown_word_is_unk() {
        let tok = Tokenizer::build(["a"]);
        assert_eq!(tok.encode("zebra", 8), vec![UNK_ID]);
        assert_eq!(tok.encode("", 8), vec![UNK_ID]);
    }

    #[test]
    fn deterministic() {
        let tok = Tokenizer::build(["the cat sat", "on the mat"]);
        assert_eq!(tok.encode("The mat, the cat", 32), tok.encode("The mat, the cat", 32));
    }

    #[test]
    fn truncation_keeps_trailing_sep() {
        let tok = Tokenizer::build(["a b c d"]);
        let ids = tok.encode("<cls> a b c d <sep>", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[3], SEP_ID);
        assert_eq!(ids[0], CLS_ID);
    }

    #[test]
    fn truncate_tokens_cuts_at_boundaries() {
        assert_eq!(truncate_tokens("Virtue Party, Turkey", 3), "Virtue Party,");
        assert_eq!(truncate_tokens("one two", 5), "one two");
        assert_eq!(count_tokens("Virtue Party, Turkey"), 4);
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = Tokenizer::build(["alpha beta", "gamma"]);
        let mut buf = Vec::new();
        tok.save(&mut buf).unwrap();
        let back = Tokenizer::load(buf.as_slice()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(String::from_utf8(buf).unwrap().lines().next(), Some(PAD));
    }
}

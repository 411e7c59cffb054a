//! Character-level byte-pair-merge tokenizer learned from the label corpus.
//!
//! Text is pre-split into chunks that start at a whitespace run following a
//! non-whitespace character (`"red fox"` → `"red"`, `" fox"`); merges never
//! cross chunk boundaries. A merge joins any adjacent pair whose
//! concatenation equals the merged token, so the ordered token list alone
//! determines encoding and the vocabulary file needs no separate merge table.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{KonError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Text token → id, excluding the reserved ids.
    index: HashMap<String, usize>,
}

fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Vocabulary {
    /// Learns merges greedily by pair frequency (ties broken by the lower id
    /// pair) until `target_size` tokens exist or no pair remains.
    pub fn build(corpus: &[&str], target_size: usize) -> Result<Self> {
        let mut chars: Vec<char> = corpus.iter().flat_map(|s| s.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        if target_size <= RESERVED.len() + chars.len() {
            return Err(KonError::Config(format!(
                "vocabulary size {target_size} must exceed {} reserved + {} distinct characters",
                RESERVED.len(),
                chars.len()
            )));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for c in chars {
            index.insert(c.to_string(), tokens.len());
            tokens.push(c.to_string());
        }

        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for ch in chunks(text) {
                *words.entry(ch).or_default() += 1;
            }
        }
        let mut segs: Vec<(Vec<usize>, usize)> = words
            .into_iter()
            .map(|(w, n)| (w.chars().map(|c| index[&c.to_string()]).collect(), n))
            .collect();

        while tokens.len() < target_size {
            let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
            for (seg, n) in &segs {
                for w in seg.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += n;
                }
            }
            let Some((&(a, b), _)) = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            else {
                break;
            };
            let merged = format!("{}{}", tokens[a], tokens[b]);
            let id = match index.get(&merged) {
                Some(&id) => id,
                None => {
                    index.insert(merged.clone(), tokens.len());
                    tokens.push(merged.clone());
                    tokens.len() - 1
                }
            };
            for (seg, _) in &mut segs {
                merge_into(seg, id, &merged, &tokens);
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Encodes text; characters outside the vocabulary map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for ch in chunks(text) {
            let mut seg: Vec<usize> = ch
                .chars()
                .map(|c| self.index.get(c.encode_utf8(&mut [0; 4]) as &str).copied().unwrap_or(UNK))
                .collect();
            loop {
                // lowest-id merged token formed by an adjacent pair
                let best = seg
                    .windows(2)
                    .filter(|w| w[0] != UNK && w[1] != UNK)
                    .filter_map(|w| {
                        let s = format!("{}{}", self.tokens[w[0]], self.tokens[w[1]]);
                        self.index.get(&s).copied()
                    })
                    .min();
                match best {
                    Some(id) => merge_into(&mut seg, id, &self.tokens[id], &self.tokens),
                    None => break,
                }
            }
            out.extend(seg);
        }
        out
    }

    /// Concatenates token text; reserved tokens contribute nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .map(|&i| self.tokens[i].as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| KonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KonError::io(path, e))?;
        let tokens: Vec<String> = text
            .strip_suffix('\n')
            .unwrap_or(&text)
            .split('\n')
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(KonError::Config(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            if index.insert(t.clone(), i).is_some() {
                return Err(KonError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

fn merge_into(seg: &mut Vec<usize>, id: usize, merged: &str, tokens: &[String]) {
    let mut i = 0;
    while i + 1 < seg.len() {
        let (a, b) = (&tokens[seg[i]], &tokens[seg[i + 1]]);
        if seg[i] >= RESERVED.len()
            && seg[i + 1] >= RESERVED.len()
            && a.len() + b.len() == merged.len()
            && merged.starts_with(a.as_str())
            && merged.ends_with(b.as_str())
        {
            seg[i] = id;
            seg.remove(i + 1);
        }
        i += 1;
    }
}

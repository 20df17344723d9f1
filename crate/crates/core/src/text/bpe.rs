//! Lower-cased byte-level byte-pair encoding.
//!
//! Text is lower-cased and whitespace-collapsed, split into words (each word after
//! the first carries its leading space), and each word is mapped byte by byte onto
//! printable characters. Merges from an ordered list are then applied greedily by
//! rank. Ids `0..256` are the raw bytes, `256 + r` is the token produced by merge
//! `r`, and BOS/EOS follow the merges.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fileio::read_text;

pub const CONTEXT_LEN: usize = 76;
pub const VOCAB_CAPACITY: usize = 49_152;

/// The reversible byte-to-character table used by byte-level BPE: printable
/// Latin-1 bytes map to themselves, the rest to code points from U+0100 upward.
pub fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let printable = (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let cp = if printable {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(cp).unwrap();
    }
    table
}

pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Words of normalized text as byte-level symbol strings.
fn pre_tokenize(text: &str, alphabet: &[char; 256]) -> Vec<Vec<String>> {
    let norm = normalize(text);
    norm.split(' ')
        .filter(|w| !w.is_empty())
        .enumerate()
        .map(|(i, w)| {
            let mut bytes = Vec::with_capacity(w.len() + 1);
            if i > 0 {
                bytes.push(b' ');
            }
            bytes.extend_from_slice(w.as_bytes());
            bytes.iter().map(|&b| alphabet[b as usize].to_string()).collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    alphabet: [char; 256],
    byte_of: HashMap<char, u8>,
}

const DEFAULT_MERGES: &str = include_str!("../../assets/merges.txt");

impl Default for BpeVocab {
    /// The merges trained on the bundled class-description catalog.
    fn default() -> Self {
        BpeVocab::from_merges(DEFAULT_MERGES).expect("bundled merges file is valid")
    }
}

impl BpeVocab {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        if merges.len() + 258 > VOCAB_CAPACITY {
            return Err(Error::Config(format!(
                "{} merges exceed the vocabulary capacity {VOCAB_CAPACITY}",
                merges.len()
            )));
        }
        let alphabet = byte_alphabet();
        let mut id_to_token: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut ranks = HashMap::new();
        for (r, (a, b)) in merges.iter().enumerate() {
            let tok = format!("{a}{b}");
            token_to_id.entry(tok.clone()).or_insert(256 + r);
            id_to_token.push(tok);
            ranks.entry((a.clone(), b.clone())).or_insert(r);
        }
        id_to_token.push("<bos>".into());
        id_to_token.push("<eos>".into());
        let byte_of = alphabet.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(BpeVocab {
            merges,
            ranks,
            token_to_id,
            id_to_token,
            alphabet,
            byte_of,
        })
    }

    /// Parse a merges file: one space-separated pair per non-empty line, rank = line order.
    pub fn from_merges(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(Error::Data(format!("merges line {}: expected two symbols", ln + 1))),
            }
        }
        Self::new(merges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_merges(&read_text(path)?)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn bos(&self) -> usize {
        self.id_to_token.len() - 2
    }

    pub fn eos(&self) -> usize {
        self.id_to_token.len() - 1
    }

    fn bpe_word(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    /// Token strings of `text` without BOS/EOS.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        pre_tokenize(text, &self.alphabet)
            .into_iter()
            .flat_map(|w| self.bpe_word(w))
            .collect()
    }

    /// `[BOS, tokens…, EOS]`, truncated to the context length with EOS kept last.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![self.bos()];
        ids.extend(self.tokenize(text).iter().map(|t| self.token_to_id[t]));
        ids.truncate(CONTEXT_LEN - 1);
        ids.push(self.eos());
        ids
    }

    /// Inverse of [`BpeVocab::encode`]; special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id >= self.bos() {
                continue;
            }
            for ch in self.id_to_token[id].chars() {
                bytes.push(self.byte_of[&ch]);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Learn up to `max_merges` merges from `corpus`, always merging the most
/// frequent adjacent pair (ties go to the lexicographically smallest pair) and
/// stopping once no pair occurs twice.
pub fn train_merges(corpus: &[&str], max_merges: usize) -> Vec<(String, String)> {
    let alphabet = byte_alphabet();
    let mut words: HashMap<Vec<String>, usize> = HashMap::new();
    for text in corpus {
        for w in pre_tokenize(text, &alphabet) {
            *words.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
    words.sort();
    let mut merges = Vec::new();
    while merges.len() < max_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        for (w, _) in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut w[i]));
                    i += 1;
                }
            }
            *w = out;
        }
        merges.push((a, b));
    }
    merges
}

/// Serialize merges in the on-disk format.
pub fn merges_to_string(merges: &[(String, String)]) -> String {
    merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BpeVocab {
        BpeVocab::from_merges("l o\nlo w\ne r\n").unwrap()
    }

    #[test]
    fn alphabet_is_a_bijection() {
        let a = byte_alphabet();
        let set: std::collections::HashSet<char> = a.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(a[b'a' as usize], 'a');
        assert_eq!(a[b' ' as usize], 'Ġ');
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let v = tiny();
        assert_eq!(v.encode(""), vec![v.bos(), v.eos()]);
        assert_eq!(v.encode("   \t "), vec![v.bos(), v.eos()]);
    }

    #[test]
    fn lower_casing() {
        let v = BpeVocab::default();
        assert_eq!(v.encode("ROADS"), v.encode("roads"));
    }

    #[test]
    fn merge_trace_on_low_lower() {
        let v = tiny();
        // "low":    l o w     -> lo w    -> low
        // " lower": Ġ l o w e r -> Ġ lo w e r -> Ġ low e r -> Ġ low er
        assert_eq!(v.tokenize("low lower"), ["low", "Ġ", "low", "er"]);
        let ids = v.encode("low lower");
        assert_eq!(ids, vec![v.bos(), 257, b' ' as usize, 257, 258, v.eos()]);
        assert_eq!(v.decode(&ids), "low lower");
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let v = tiny();
        let long = "x ".repeat(200);
        let ids = v.encode(&long);
        assert_eq!(ids.len(), CONTEXT_LEN);
        assert_eq!(*ids.last().unwrap(), v.eos());
        assert_eq!(ids[0], v.bos());
    }

    #[test]
    fn non_ascii_round_trips() {
        let v = BpeVocab::default();
        let s = "grüne bäume, 木";
        assert_eq!(v.decode(&v.encode(s)), normalize(s));
    }

    #[test]
    fn bad_merges_line() {
        assert!(BpeVocab::from_merges("a b c\n").is_err());
        assert!(BpeVocab::from_merges("ab\n").is_err());
    }

    #[test]
    fn trainer_merges_most_frequent_pair_first() {
        let merges = train_merges(&["aaa aaa ab"], 10);
        assert_eq!(merges[0], ("a".to_string(), "a".to_string()));
        let v = BpeVocab::new(merges).unwrap();
        assert_eq!(v.decode(&v.encode("aaa ab")), "aaa ab");
    }

    #[test]
    fn bundled_merges_match_trainer() {
        let texts = crate::text::build_class_texts(&Default::default(), Default::default());
        let corpus: Vec<&str> = texts.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(merges_to_string(&train_merges(&corpus, 2048)), DEFAULT_MERGES);
    }
}

//! Vocabulary, latent space, corpus files and TF-IDF keywords.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<s>", "</s>"];

/// A whitespace-tokenized query/response pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub query: Vec<String>,
    pub response: Vec<String>,
}

impl TextPair {
    pub fn new(query: &str, response: &str) -> Self {
        Self {
            query: query.split_whitespace().map(str::to_owned).collect(),
            response: response.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn query_text(&self) -> String {
        self.query.join(" ")
    }

    pub fn response_text(&self) -> String {
        self.response.join(" ")
    }
}

/// Token/id bijection with reserved ids `0..4` and corpus frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    freq: Vec<u64>,
    index: HashMap<String, usize>,
    coverage: Option<f64>,
}

impl Vocab {
    fn from_counts(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_SPECIAL];
        for (t, f) in entries {
            tokens.push(t);
            freq.push(f);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            freq,
            index,
            coverage: None,
        })
    }

    /// Keeps the `max_size` most frequent tokens (ties broken lexicographically).
    pub fn build(pairs: &[TextPair], max_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut total = 0u64;
        for p in pairs {
            for t in p.query.iter().chain(&p.response) {
                *counts.entry(t.as_str()).or_default() += 1;
                total += 1;
            }
        }
        let mut sorted: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        sorted.truncate(max_size);
        let kept: u64 = sorted.iter().map(|e| e.1).sum();
        let mut vocab = Self::from_counts(sorted.into_iter().map(|(t, f)| (t.to_owned(), f)).collect())?;
        vocab.coverage = Some(if total == 0 { 0.0 } else { kept as f64 / total as f64 });
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fraction of corpus token occurrences kept, when built from a corpus.
    pub fn coverage(&self) -> Option<f64> {
        self.coverage
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Maps tokens to ids, sending unknown tokens to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// `token<TAB>frequency` per non-special token, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in NUM_SPECIAL..self.len() {
            writeln!(out, "{}\t{}", self.tokens[i], self.freq[i]).unwrap();
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let Some((tok, f)) = line.split_once('\t') else {
                return Err(Error::parse(path, i + 1, "expected `token<TAB>frequency`"));
            };
            let f = f
                .parse()
                .map_err(|e| Error::parse(path, i + 1, format!("bad frequency: {e}")))?;
            entries.push((tok.to_owned(), f));
        }
        Self::from_counts(entries).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_utf8(path)?, path)
    }
}

/// Which vocabulary words form the latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRestriction {
    All,
    TopK(usize),
}

/// Ordered latent ids: non-special vocabulary ids by descending frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSpace {
    ids: Vec<usize>,
}

impl LatentSpace {
    pub fn new(vocab: &Vocab, restriction: LatentRestriction) -> Result<Self> {
        let mut ids: Vec<usize> = (NUM_SPECIAL..vocab.len()).collect();
        ids.sort_by(|&a, &b| {
            vocab
                .freq(b)
                .cmp(&vocab.freq(a))
                .then_with(|| vocab.token(a).cmp(vocab.token(b)))
        });
        if let LatentRestriction::TopK(k) = restriction {
            if k == 0 {
                return Err(Error::invalid("latent top-k must be positive"));
            }
            if k > ids.len() {
                return Err(Error::invalid(format!(
                    "latent top-k = {k} exceeds {} non-special words",
                    ids.len()
                )));
            }
            ids.truncate(k);
        }
        if ids.is_empty() {
            return Err(Error::invalid("latent space is empty"));
        }
        Ok(Self { ids })
    }

    /// Wraps an explicit id list (used for abstract latent indices).
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("latent space is empty"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

/// An encoded training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub query: Vec<usize>,
    pub response: Vec<usize>,
    pub keyword: Option<usize>,
}

impl Example {
    pub fn encode(pair: &TextPair, vocab: &Vocab) -> Result<Self> {
        if pair.query.is_empty() || pair.response.is_empty() {
            return Err(Error::invalid("query and response must be non-empty"));
        }
        Ok(Self {
            query: vocab.encode(&pair.query),
            response: vocab.encode(&pair.response),
            keyword: None,
        })
    }
}

pub fn encode_all(pairs: &[TextPair], vocab: &Vocab) -> Result<Vec<Example>> {
    pairs.iter().map(|p| Example::encode(p, vocab)).collect()
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((q, r)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `query<TAB>response`"));
        };
        if r.contains('\t') {
            return Err(Error::parse(path, i + 1, "more than one tab"));
        }
        let pair = TextPair::new(q, r);
        if pair.query.is_empty() || pair.response.is_empty() {
            return Err(Error::parse(path, i + 1, "empty query or response"));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::parse(path, 0, "corpus is empty"));
    }
    Ok(pairs)
}

pub fn corpus_to_text(pairs: &[TextPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        writeln!(out, "{}\t{}", p.query_text(), p.response_text()).unwrap();
    }
    out
}

/// Loads a `query<TAB>response` corpus, one pair per line.
pub fn load_corpus(path: &Path) -> Result<Vec<TextPair>> {
    parse_corpus(&read_utf8(path)?, path)
}

pub fn save_corpus(pairs: &[TextPair], path: &Path) -> Result<()> {
    write_atomic(path, corpus_to_text(pairs).as_bytes())
}

/// Side of each pair that keywords are extracted from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KeywordSource {
    #[default]
    Query,
    Response,
}

impl FromStr for KeywordSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(KeywordSource::Query),
            "response" => Ok(KeywordSource::Response),
            _ => Err(Error::invalid(format!(
                "unknown keyword source `{s}` (expected query or response)"
            ))),
        }
    }
}

/// One keyword per document: the latent-space token maximizing
/// `tf * log(N / df)`. Ties go to the higher term frequency, then the lower id.
/// With `smooth`, idf is `log((1 + N) / (1 + df)) + 1`.
pub fn tfidf_keywords(docs: &[&[usize]], latent: &LatentSpace, smooth: bool) -> Vec<Option<usize>> {
    let n = docs.len() as f64;
    let mut df: HashMap<usize, usize> = HashMap::new();
    for d in docs {
        let mut seen: Vec<usize> = d.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let in_latent: std::collections::HashSet<usize> = latent.ids().iter().copied().collect();
    docs.iter()
        .map(|d| {
            let mut tf: HashMap<usize, usize> = HashMap::new();
            for &t in d.iter().filter(|t| in_latent.contains(t)) {
                *tf.entry(t).or_default() += 1;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for (&t, &f) in &tf {
                let df = df[&t] as f64;
                let idf = if smooth { ((1.0 + n) / (1.0 + df)).ln() + 1.0 } else { (n / df).ln() };
                let s = f as f64 * idf;
                let better = match best {
                    None => true,
                    Some((bs, bf, bt)) => s > bs || (s == bs && (f > bf || (f == bf && t < bt))),
                };
                if better {
                    best = Some((s, f, t));
                }
            }
            best.map(|b| b.2)
        })
        .collect()
}

/// Attaches keywords to examples from the chosen side of each pair.
pub fn assign_keywords(examples: &mut [Example], latent: &LatentSpace, source: KeywordSource, smooth: bool) {
    let docs: Vec<&[usize]> = examples
        .iter()
        .map(|e| match source {
            KeywordSource::Query => e.query.as_slice(),
            KeywordSource::Response => e.response.as_slice(),
        })
        .collect();
    let kws = tfidf_keywords(&docs, latent, smooth);
    for (e, k) in examples.iter_mut().zip(kws) {
        e.keyword = k;
    }
}

/// One keyword token per line; an empty line marks a keywordless example.
pub fn save_keywords(keywords: &[Option<usize>], vocab: &Vocab, path: &Path) -> Result<()> {
    let mut out = String::new();
    for k in keywords {
        if let Some(k) = k {
            out.push_str(vocab.token(*k));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_keywords(path: &Path, vocab: &Vocab, latent: &LatentSpace) -> Result<Vec<Option<usize>>> {
    let text = read_utf8(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let tok = line.trim();
            if tok.is_empty() {
                return Ok(None);
            }
            match vocab.id(tok) {
                Some(id) if latent.contains(id) => Ok(Some(id)),
                _ => Err(Error::parse(path, i + 1, format!("keyword `{tok}` is not in the latent space"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(lines: &[(&str, &str)]) -> Vec<TextPair> {
        lines.iter().map(|(q, r)| TextPair::new(q, r)).collect()
    }

    #[test]
    fn tiny_vocab() {
        let v = Vocab::build(&pairs(&[("a b", "c")]), 10).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[..4], &SPECIAL_TOKENS.map(String::from));
        assert!(v.id("a").is_some() && v.id("b").is_some() && v.id("c").is_some());
        assert_eq!(v.coverage(), Some(1.0));
    }

    #[test]
    fn truncation_maps_rare_to_unk() {
        let v = Vocab::build(&pairs(&[("a a b", "a c")]), 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&["a", "b", "c"]), vec![4, UNK, UNK]);
        assert!((v.coverage().unwrap() - 3.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn latent_space_excludes_specials() {
        let v = Vocab::build(&pairs(&[("a a b", "a c c")]), 10).unwrap();
        let all = LatentSpace::new(&v, LatentRestriction::All).unwrap();
        assert_eq!(all.len(), v.len() - NUM_SPECIAL);
        assert!(all.ids().iter().all(|&i| !Vocab::is_special(i)));
        let top = LatentSpace::new(&v, LatentRestriction::TopK(1)).unwrap();
        assert_eq!(top.ids(), &[v.id("a").unwrap()]);
        assert!(LatentSpace::new(&v, LatentRestriction::TopK(0)).is_err());
        assert!(LatentSpace::new(&v, LatentRestriction::TopK(4)).is_err());
    }

    #[test]
    fn parses_unicode_pair() {
        let p = parse_corpus("你好 吗\t我 很 好\n", Path::new("c.tsv")).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].query.len(), 2);
        assert_eq!(p[0].response.len(), 3);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_corpus("a\tb\nno tab here\n", Path::new("c.tsv")).unwrap_err();
        assert!(err.to_string().contains("c.tsv:2"), "{err}");
        assert!(parse_corpus("", Path::new("c.tsv")).is_err());
        assert!(parse_corpus("a\t \n", Path::new("c.tsv")).is_err());
    }

    #[test]
    fn idf_zero_word_loses() {
        // docs: "a a b", "a c", "a d"
        let latent = LatentSpace::from_ids(vec![4, 5, 6, 7]).unwrap();
        let docs: Vec<Vec<usize>> = vec![vec![4, 4, 5], vec![4, 6], vec![4, 7]];
        let refs: Vec<&[usize]> = docs.iter().map(Vec::as_slice).collect();
        let kw = tfidf_keywords(&refs, &latent, false);
        assert_eq!(kw, vec![Some(5), Some(6), Some(7)]);
    }

    #[test]
    fn single_document_prefers_frequent_token() {
        let latent = LatentSpace::from_ids(vec![4, 5, 6]).unwrap();
        let doc = vec![6, 5, 6, 4];
        assert_eq!(tfidf_keywords(&[&doc], &latent, false), vec![Some(6)]);
    }

    #[test]
    fn keywordless_when_no_latent_token() {
        let latent = LatentSpace::from_ids(vec![9]).unwrap();
        let doc = vec![4, 5];
        assert_eq!(tfidf_keywords(&[&doc], &latent, true), vec![None]);
    }
}

//! Sentence-level BLEU, distinct-n and test-set evaluation.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::data::TextPair;
use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};

/// Replaces zero n-gram precisions.
pub const BLEU_EPS: f64 = 1e-9;

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

/// Cumulative BLEU-1..=`max_n` of one hypothesis against its references:
/// the geometric mean of clipped n-gram precisions (zero precisions replaced
/// by [`BLEU_EPS`]) times the brevity penalty. The reference length is the
/// closest one, ties going to the shorter.
pub fn bleu_n<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], refs: &[Vec<U>], max_n: usize) -> Result<Vec<f64>> {
    if max_n < 1 {
        return Err(Error::invalid("bleu: max_n must be at least 1"));
    }
    if hyp.is_empty() {
        return Err(Error::invalid("bleu: empty hypothesis"));
    }
    if refs.is_empty() {
        return Err(Error::invalid("bleu: no references"));
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };

    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let h = ngrams(hyp, n);
        let total: usize = h.values().sum();
        let mut max_ref: HashMap<&Vec<&str>, usize> = HashMap::new();
        let ref_grams: Vec<_> = refs.iter().map(|r| ngrams(r, n)).collect();
        for g in h.keys() {
            let m = ref_grams.iter().map(|rg| rg.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            max_ref.insert(g, m);
        }
        let matched: usize = h.iter().map(|(g, &cnt)| cnt.min(max_ref[g])).sum();
        let p = if matched == 0 || total == 0 { BLEU_EPS } else { matched as f64 / total as f64 };
        log_sum += p.ln();
        out.push(bp * (log_sum / n as f64).exp());
    }
    Ok(out)
}

/// Unique n-grams over total n-grams across all responses (0 when there are none).
pub fn distinct_n<T: AsRef<str>>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n != 1 && n != 2 {
        return Err(Error::invalid(format!("distinct-n supports n = 1 or 2, got {n}")));
    }
    if responses.is_empty() {
        return Err(Error::invalid("distinct-n: no responses"));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() >= n {
            for w in r.windows(n) {
                seen.insert(w.iter().map(AsRef::as_ref).collect());
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 })
}

/// One line of a generation output file.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedLine {
    pub query: String,
    /// Sampled latent token, `#i` for an abstract index, `-` for none.
    pub z: String,
    /// Cluster index or `-`.
    pub cluster: String,
    pub response: String,
    pub score: f64,
}

impl GeneratedLine {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.query, self.z, self.cluster, self.response, self.score)
    }
}

pub fn parse_generated(text: &str, path: &Path) -> Result<Vec<GeneratedLine>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::parse(path, i + 1, format!("expected 5 tab-separated fields, got {}", f.len())));
            }
            let score = f[4]
                .parse()
                .map_err(|e| Error::parse(path, i + 1, format!("bad score: {e}")))?;
            Ok(GeneratedLine {
                query: f[0].to_owned(),
                z: f[1].to_owned(),
                cluster: f[2].to_owned(),
                response: f[3].to_owned(),
                score,
            })
        })
        .collect()
}

pub fn load_generated(path: &Path) -> Result<Vec<GeneratedLine>> {
    parse_generated(&read_utf8(path)?, path)
}

pub fn save_generated(lines: &[GeneratedLine], path: &Path) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_line());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Test-set scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu_mean: [f64; 4],
    pub bleu_std: [f64; 4],
    pub distinct1: f64,
    pub distinct2: f64,
    pub queries: usize,
    pub responses: usize,
    /// Distinct response strings per query, summed over queries.
    pub unique_responses: usize,
}

impl EvalReport {
    pub fn distinct_per_query(&self) -> f64 {
        self.unique_responses as f64 / self.queries as f64
    }

    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in 0..4 {
            writeln!(out, "bleu{}_mean\t{}", n + 1, self.bleu_mean[n]).unwrap();
            writeln!(out, "bleu{}_std\t{}", n + 1, self.bleu_std[n]).unwrap();
        }
        writeln!(out, "distinct1\t{}", self.distinct1).unwrap();
        writeln!(out, "distinct2\t{}", self.distinct2).unwrap();
        writeln!(out, "queries\t{}", self.queries).unwrap();
        writeln!(out, "responses\t{}", self.responses).unwrap();
        writeln!(out, "unique_responses\t{}", self.unique_responses).unwrap();
        writeln!(out, "unique_per_query\t{}", self.distinct_per_query()).unwrap();
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in 0..4 {
            writeln!(f, "BLEU-{}     {:.4} ± {:.4}", n + 1, self.bleu_mean[n], self.bleu_std[n])?;
        }
        writeln!(f, "distinct-1 {:.4}", self.distinct1)?;
        writeln!(f, "distinct-2 {:.4}", self.distinct2)?;
        write!(
            f,
            "{} queries, {} responses, {} unique ({:.2} per query)",
            self.queries,
            self.responses,
            self.unique_responses,
            self.distinct_per_query()
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Scores generated responses against every reference response of the same
/// query. Each reference query needs at least one generated line and each
/// generated query must appear among the references.
pub fn evaluate(generated: &[GeneratedLine], references: &[TextPair]) -> Result<EvalReport> {
    let mut refs: HashMap<String, Vec<Vec<String>>> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for p in references {
        let q = p.query_text();
        if !refs.contains_key(&q) {
            order.push(q.clone());
        }
        refs.entry(q).or_default().push(p.response.clone());
    }
    let gen_queries: HashSet<&str> = generated.iter().map(|g| g.query.as_str()).collect();
    let unknown = generated.iter().filter(|g| !refs.contains_key(&g.query)).count();
    let uncovered = order.iter().filter(|q| !gen_queries.contains(q.as_str())).count();
    if generated.is_empty() || unknown > 0 || uncovered > 0 {
        return Err(Error::invalid(format!(
            "generated file ({} lines, {} queries) does not align with the reference corpus ({} lines, {} queries): \
             {unknown} generated lines have no reference, {uncovered} reference queries have no generation",
            generated.len(),
            gen_queries.len(),
            references.len(),
            order.len()
        )));
    }

    let mut per_n: [Vec<f64>; 4] = Default::default();
    let mut responses: Vec<Vec<&str>> = Vec::with_capacity(generated.len());
    let mut unique: HashSet<(&str, &str)> = HashSet::new();
    for g in generated {
        let hyp: Vec<&str> = g.response.split_whitespace().collect();
        let scores = if hyp.is_empty() { vec![0.0; 4] } else { bleu_n(&hyp, &refs[&g.query], 4)? };
        for n in 0..4 {
            per_n[n].push(scores[n]);
        }
        unique.insert((g.query.as_str(), g.response.as_str()));
        responses.push(hyp);
    }
    let mut bleu_mean = [0.0; 4];
    let mut bleu_std = [0.0; 4];
    for n in 0..4 {
        (bleu_mean[n], bleu_std[n]) = mean_std(&per_n[n]);
    }
    Ok(EvalReport {
        bleu_mean,
        bleu_std,
        distinct1: distinct_n(&responses, 1)?,
        distinct2: distinct_n(&responses, 2)?,
        queries: order.len(),
        responses: generated.len(),
        unique_responses: unique.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let s = toks("the cat sat on the mat");
        for b in bleu_n(&s, std::slice::from_ref(&s), 4).unwrap() {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_unigram_precisions() {
        assert!((bleu_n(&toks("a b c"), &[toks("a b d")], 1).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((bleu_n(&toks("a a a"), &[toks("a b")], 1).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let b = bleu_n(&toks("a b"), &[toks("a b c d")], 1).unwrap()[0];
        assert!((b - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bleu_rejects_bad_input() {
        assert!(bleu_n(&toks("a"), &[toks("a")], 0).is_err());
        assert!(bleu_n::<&str, &str>(&[], &[toks("a")], 1).is_err());
        assert!(bleu_n::<&str, &str>(&toks("a"), &[], 1).is_err());
    }

    #[test]
    fn distinct_hand_counts() {
        assert_eq!(distinct_n(&[toks("a b"), toks("c d")], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&[toks("a a"), toks("a b")], 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&[toks("a b c")], 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&[toks("a")], 2).unwrap(), 0.0);
        assert!(distinct_n(&[toks("a")], 3).is_err());
    }

    fn line(q: &str, r: &str) -> GeneratedLine {
        GeneratedLine {
            query: q.into(),
            z: "-".into(),
            cluster: "-".into(),
            response: r.into(),
            score: -1.0,
        }
    }

    #[test]
    fn verbatim_generation_is_perfect() {
        let refs = vec![TextPair::new("q1", "a b c d"), TextPair::new("q2", "e f g h i")];
        let gen = vec![line("q1", "a b c d"), line("q2", "e f g h i")];
        let r = evaluate(&gen, &refs).unwrap();
        for n in 0..4 {
            assert!((r.bleu_mean[n] - 1.0).abs() < 1e-12);
            assert!(r.bleu_std[n].abs() < 1e-12);
        }
    }

    #[test]
    fn identical_single_tokens_over_ten_queries() {
        let refs: Vec<TextPair> = (0..10).map(|i| TextPair::new(&format!("q{i}"), "x y")).collect();
        let gen: Vec<GeneratedLine> = (0..10).map(|i| line(&format!("q{i}"), "ok")).collect();
        let r = evaluate(&gen, &refs).unwrap();
        assert!((r.distinct1 - 0.1).abs() < 1e-15);
        for v in r.bleu_mean.iter().chain(&r.bleu_std).chain([&r.distinct1, &r.distinct2]) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn misalignment_reports_counts() {
        let refs = vec![TextPair::new("q1", "a"), TextPair::new("q2", "b"), TextPair::new("q3", "c")];
        let err = evaluate(&[line("q1", "a"), line("zz", "b")], &refs).unwrap_err().to_string();
        assert!(err.contains("2 lines") && err.contains("3 lines"), "{err}");
    }

    #[test]
    fn generated_round_trip() {
        let l = vec![line("a b", "c d")];
        let text: String = l.iter().map(|x| x.to_line() + "\n").collect();
        assert_eq!(parse_generated(&text, Path::new("g")).unwrap(), l);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..6).prop_map(|i| format!("w{i}")), 1..8)
    }

    proptest! {
        #[test]
        fn distinct_ignores_order(mut rs in prop::collection::vec(sentence(), 1..10), seed in any::<u64>()) {
            let before = (distinct_n(&rs, 1).unwrap(), distinct_n(&rs, 2).unwrap());
            crate::sampling::Rng::seed_from(seed).shuffle(&mut rs);
            prop_assert_eq!(before, (distinct_n(&rs, 1).unwrap(), distinct_n(&rs, 2).unwrap()));
            prop_assert!((0.0..=1.0).contains(&before.0) && (0.0..=1.0).contains(&before.1));
        }

        #[test]
        fn bleu_bounded_and_identity_is_one(h in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            let s = bleu_n(&h, &r, 4).unwrap();
            prop_assert!(s.iter().all(|x| (0.0..=1.0 + 1e-12).contains(x)));
            let own = bleu_n(&h, std::slice::from_ref(&h), 4).unwrap();
            for (n, x) in own.iter().enumerate() {
                if n < h.len() {
                    prop_assert!((x - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn bleu_weakly_decreasing_without_smoothing(h in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            let s = bleu_n(&h, &r, 4).unwrap();
            // Smoothing only enters once some order has no matches.
            let unsmoothed = s.iter().take_while(|&&x| x > 1e-6).count();
            for w in s[..unsmoothed].windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}

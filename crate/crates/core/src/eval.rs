//! Overlap metrics and corpus evaluation bucketed by session number.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{filter_session_openings, Corpus, MscExample, Vocabulary};
use crate::error::{HahtError, Result};
use crate::model::Model;
use crate::parallel::Workers;

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n with uniform weights, clipped counts and the brevity
/// penalty `min(1, exp(1 - r/c))`. Any zero precision gives 0.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(HahtError::Config(
            "BLEU needs at least one candidate".into(),
        ));
    }
    if candidates.len() != references.len() {
        return Err(HahtError::Config(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(HahtError::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (cand, reference) in candidates.iter().zip(references) {
        for k in 1..=n {
            let ref_counts = ngram_counts(reference, k);
            for (gram, count) in ngram_counts(cand, k) {
                matched[k - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[k - 1] += cand.len().saturating_sub(k - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    Ok(bp * log_p.exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Anything that can answer an example with a token sequence.
pub trait Responder: Sync {
    fn respond(&self, ex: &MscExample, max_len: usize) -> Result<Vec<String>>;
}

impl Responder for Model {
    fn respond(&self, ex: &MscExample, max_len: usize) -> Result<Vec<String>> {
        Model::respond(self, ex, max_len)
    }
}

/// Decodes with beam search instead of greedily.
#[derive(Debug, Clone, Copy)]
pub struct Beam<'m> {
    pub model: &'m Model,
    pub width: usize,
}

impl Responder for Beam<'_> {
    fn respond(&self, ex: &MscExample, max_len: usize) -> Result<Vec<String>> {
        let prepared = self.model.prepare(ex)?;
        let out = self.model.beam_decode(&prepared, max_len, self.width)?;
        Ok(self.model.vocab.decode(&out.ids))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScores {
    pub bleu2: f64,
    pub bleu3: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub opening_only: bool,
    /// Keyed by session number, plus `"all"`.
    pub buckets: BTreeMap<String, BucketScores>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

fn reference(ex: &MscExample) -> Vec<String> {
    ex.response.tokens.clone()
}

fn bucket_scores(pairs: &[(&Vec<String>, Vec<String>)]) -> Result<BucketScores> {
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| (*c).clone()).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let rouge = pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / pairs.len() as f64;
    Ok(BucketScores {
        bleu2: bleu_n(&cands, &refs, 2)?,
        bleu3: bleu_n(&cands, &refs, 3)?,
        rouge_l: rouge,
        count: pairs.len(),
    })
}

/// Scores predictions (aligned with `corpus.examples`) per session number.
pub fn score_predictions(
    corpus: &Corpus,
    predictions: &[Vec<String>],
    opening_only: bool,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(HahtError::EmptyCorpus);
    }
    assert_eq!(
        corpus.len(),
        predictions.len(),
        "one prediction per example"
    );
    let mut groups: BTreeMap<usize, Vec<(&Vec<String>, Vec<String>)>> = BTreeMap::new();
    for (ex, pred) in corpus.examples.iter().zip(predictions) {
        groups
            .entry(ex.session_number())
            .or_default()
            .push((pred, reference(ex)));
    }
    let mut buckets = BTreeMap::new();
    for (session, pairs) in &groups {
        buckets.insert(session.to_string(), bucket_scores(pairs)?);
    }
    let all: Vec<(&Vec<String>, Vec<String>)> = corpus
        .examples
        .iter()
        .zip(predictions)
        .map(|(ex, p)| (p, reference(ex)))
        .collect();
    buckets.insert("all".to_string(), bucket_scores(&all)?);
    Ok(MetricsReport {
        opening_only,
        buckets,
    })
}

/// Greedy responses for every example, in corpus order.
pub fn decode_corpus(
    responder: &dyn Responder,
    corpus: &Corpus,
    max_len: usize,
    workers: &Workers,
) -> Result<Vec<Vec<String>>> {
    workers
        .map(&corpus.examples, |ex| responder.respond(ex, max_len))
        .into_iter()
        .collect()
}

/// The examples actually evaluated for a given `opening_only` flag.
pub fn evaluation_subset(corpus: &Corpus, opening_only: bool) -> Corpus {
    if opening_only {
        filter_session_openings(corpus)
    } else {
        corpus.clone()
    }
}

pub fn evaluate_corpus(
    responder: &dyn Responder,
    corpus: &Corpus,
    opening_only: bool,
    max_len: usize,
    workers: &Workers,
) -> Result<MetricsReport> {
    let subset = evaluation_subset(corpus, opening_only);
    let predictions = decode_corpus(responder, &subset, max_len, workers)?;
    score_predictions(&subset, &predictions, opening_only)
}

/// Response tokens that occur in the history but not in the current context.
pub fn history_exclusive_tokens(ex: &MscExample) -> HashSet<&str> {
    let history: HashSet<&str> = ex
        .history_utterances()
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    let context: HashSet<&str> = ex
        .context
        .utterances
        .iter()
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    ex.response
        .tokens
        .iter()
        .map(String::as_str)
        .filter(|t| history.contains(t) && !context.contains(t))
        .collect()
}

/// Fraction of history-exclusive reference tokens that the predictions
/// reproduce. `None` when the corpus has no such tokens.
pub fn history_token_recall(corpus: &Corpus, predictions: &[Vec<String>]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ex, pred) in corpus.examples.iter().zip(predictions) {
        let wanted = history_exclusive_tokens(ex);
        let produced: HashSet<&str> = pred.iter().map(String::as_str).collect();
        total += wanted.len();
        hits += wanted.iter().filter(|t| produced.contains(*t)).count();
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Teacher-forced next-token accuracy over a corpus.
pub fn teacher_forced_accuracy(model: &Model, corpus: &Corpus, workers: &Workers) -> Result<f64> {
    let prepared: Vec<_> = corpus
        .examples
        .iter()
        .map(|ex| model.prepare(ex))
        .collect::<Result<_>>()?;
    let prepared: Vec<_> = prepared
        .into_iter()
        .filter(|p| !p.targets.iter().all(|&t| Vocabulary::is_reserved(t)))
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for r in workers.map(&prepared, |p| model.teacher_forced_accuracy(p)) {
        let (h, t) = r?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(HahtError::EmptyCorpus);
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Session, Split, Utterance};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        let c = vec![toks("the cat sat")];
        assert_eq!(bleu_n(&c, &c, 2).unwrap(), 1.0);
        assert_eq!(
            bleu_n(&[toks("the the the")], &[toks("the cat")], 2).unwrap(),
            0.0
        );
        let short = bleu_n(&[toks("the cat")], &[toks("the cat sat")], 2).unwrap();
        assert!((short - (-0.5f64).exp()).abs() < 1e-15);
        assert!((short - 0.6065).abs() < 5e-5);
        assert!(bleu_n(&[], &[], 2).is_err());
        assert_eq!(bleu_n(&[vec![]], &[toks("a b")], 2).unwrap(), 0.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        // p1 = 1/3 once "the" is clipped to its single reference count.
        let b1 = bleu_n(&[toks("the the the")], &[toks("the cat")], 1).unwrap();
        assert!((b1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        assert!((rouge_l(&toks("a b c d"), &toks("a c d")) - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l(&[], &toks("a")), 0.0);
    }

    fn ex(m: usize, response: &str) -> MscExample {
        MscExample {
            history: (0..m)
                .map(|_| Session::new(vec![Utterance::user("my dog is rex")]))
                .collect(),
            context: Session::new(vec![Utterance::user("what is my dog ?")]),
            response: Utterance::assistant(response),
        }
    }

    struct Echo;

    impl Responder for Echo {
        fn respond(&self, ex: &MscExample, _: usize) -> Result<Vec<String>> {
            Ok(ex.response.tokens.clone())
        }
    }

    #[test]
    fn bucket_bookkeeping_and_perfect_responder() {
        let mut examples: Vec<MscExample> = (0..10)
            .map(|i| ex(1, &format!("rex is {i} years old")))
            .collect();
        examples.extend((0..5).map(|i| ex(2, &format!("your dog rex likes {i}"))));
        let corpus = Corpus::new(examples, Split::Test);
        let report = evaluate_corpus(&Echo, &corpus, false, 20, &Workers::new(1)).unwrap();
        let keys: Vec<&str> = report.buckets.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["2", "3", "all"]);
        assert_eq!(report.buckets["2"].count, 10);
        assert_eq!(report.buckets["3"].count, 5);
        assert_eq!(report.buckets["all"].count, 15);
        for s in report.buckets.values() {
            assert_eq!((s.bleu2, s.bleu3, s.rouge_l), (1.0, 1.0, 1.0));
        }
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["opening_only"], false);
        assert_eq!(json["buckets"]["all"]["count"], 15);
        assert!(json["buckets"]["2"]["rougeL"].is_number());
    }

    #[test]
    fn history_exclusive_recall() {
        let e = ex(1, "your dog is rex");
        let wanted = history_exclusive_tokens(&e);
        assert_eq!(wanted, HashSet::from(["rex"]));
        let corpus = Corpus::new(vec![e.clone(), e], Split::Test);
        let preds = vec![toks("rex"), toks("nope")];
        assert_eq!(history_token_recall(&corpus, &preds), Some(0.5));
        let plain = Corpus::new(vec![ex(0, "hello")], Split::Test);
        assert_eq!(history_token_recall(&plain, &[toks("hello")]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn scores_are_bounded(
            a in prop::collection::vec(0u8..6, 0..12),
            b in prop::collection::vec(0u8..6, 1..12),
        ) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            for n in 1..=4 {
                let s = bleu_n(&[a.clone()], &[b.clone()], n).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
        }

        #[test]
        fn reference_beats_unknown_tokens(
            refs in prop::collection::vec(prop::collection::vec(0u8..8, 1..10), 1..6),
        ) {
            let refs: Vec<Vec<String>> = refs.iter().map(|r| r.iter().map(|x| x.to_string()).collect()).collect();
            let unk: Vec<Vec<String>> = refs.iter().map(|r| vec!["<unk>".to_string(); r.len()]).collect();
            for n in 1..=4 {
                prop_assert!(bleu_n(&refs, &refs, n).unwrap() >= bleu_n(&unk, &refs, n).unwrap());
            }
        }
    }
}

//! Caption and QA metrics (BLEU-4, ROUGE-L, CIDEr-D, a synonym-free METEOR,
//! exact match) and the POPE object-hallucination protocol.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_forge::LabelStats;
use crate::error::{Error, Result};
use crate::language_model::split_words;

pub const BLEU_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub prediction: String,
    pub references: Vec<String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Data(format!("record {} has no references", self.sample_id)));
        }
        Ok(())
    }
}

/// Lowercased word tokens with punctuation dropped.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and totals for n = 1..=4, plus hypothesis and
/// closest reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of(pred: &str, refs: &[String]) -> Self {
        let hyp = metric_tokens(pred);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| metric_tokens(r)).collect();
        let mut st = BleuStats {
            hyp_len: hyp.len(),
            ..Default::default()
        };
        // closest reference length, shorter wins ties
        st.ref_len = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let h = ngrams(&hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] = h.values().sum();
            st.matches[n - 1] = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        }
        st
    }

    fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of modified precisions times brevity penalty. Zero
    /// matches (or no n-grams at all) count as precision `BLEU_EPS`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| {
                let p = if self.matches[i] == 0 || self.totals[i] == 0 {
                    BLEU_EPS
                } else {
                    self.matches[i] as f64 / self.totals[i] as f64
                };
                p.ln() / 4.0
            })
            .sum();
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * log_p.exp()
    }
}

pub fn bleu4(pred: &str, refs: &[String]) -> f64 {
    BleuStats::of(pred, refs).score()
}

/// Corpus BLEU: statistics summed over all records before scoring.
pub fn corpus_bleu4(records: &[EvalRecord]) -> f64 {
    let mut total = BleuStats::default();
    for r in records {
        total.add(&BleuStats::of(&r.prediction, &r.references));
    }
    total.score()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l(pred: &str, refs: &[String]) -> f64 {
    let hyp = metric_tokens(pred);
    refs.iter()
        .map(|r| {
            let r = metric_tokens(r);
            let l = lcs_len(&hyp, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

type NgramVec = HashMap<Vec<String>, f64>;

/// CIDEr-D over a corpus: per-record scores (×10 scale) with document
/// frequencies taken over each record's reference set.
pub fn cider_scores(records: &[EvalRecord]) -> Vec<f64> {
    let n_docs = records.len() as f64;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    let refs: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|r| r.references.iter().map(|x| metric_tokens(x)).collect())
        .collect();
    for rs in &refs {
        let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
        for r in rs {
            for n in 1..=4 {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g.to_vec());
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = n_docs.max(1.0).ln();
    let vectorize = |toks: &[String]| -> [(NgramVec, f64); 4] {
        std::array::from_fn(|i| {
            let mut v = NgramVec::new();
            for (g, c) in ngrams(toks, i + 1) {
                let idf = log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
                v.insert(g.to_vec(), c as f64 * idf);
            }
            let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
            (v, norm)
        })
    };
    records
        .iter()
        .zip(&refs)
        .map(|(rec, rs)| {
            let hyp = metric_tokens(&rec.prediction);
            let hv = vectorize(&hyp);
            let mut total = 0.0;
            for r in rs {
                let rv = vectorize(r);
                let delta = hyp.len() as f64 - r.len() as f64;
                let mut per_n = 0.0;
                for n in 0..4 {
                    let (h, hn) = &hv[n];
                    let (rr, rn) = &rv[n];
                    if *hn == 0.0 || *rn == 0.0 {
                        continue;
                    }
                    let dot: f64 = h
                        .iter()
                        .filter_map(|(g, x)| rr.get(g).map(|y| x.min(*y) * y))
                        .sum();
                    per_n += dot / (hn * rn) * (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                }
                total += per_n / 4.0;
            }
            total / rs.len() as f64 * 10.0
        })
        .collect()
}

pub fn cider(records: &[EvalRecord]) -> f64 {
    let s = cider_scores(records);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Crude suffix stripper used for the stem-match stage.
pub fn stem(word: &str) -> String {
    for suf in ["ing", "edly", "ed", "ly", "es", "s"] {
        if let Some(base) = word.strip_suffix(suf) {
            if base.chars().count() >= 3 {
                return base.to_string();
            }
        }
    }
    word.to_string()
}

/// Aligned (hyp index, ref index) pairs: exact matches first, then stems,
/// each greedily left to right.
pub fn meteor_alignment(hyp: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used_h = vec![false; hyp.len()];
    let mut used_r = vec![false; r.len()];
    let mut pairs = Vec::new();
    let stages: [fn(&str) -> String; 2] = [|w| w.to_string(), stem];
    for f in stages {
        for (i, h) in hyp.iter().enumerate() {
            if used_h[i] {
                continue;
            }
            let key = f(h);
            if let Some(j) = (0..r.len()).find(|&j| !used_r[j] && f(&r[j]) == key) {
                used_h[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of runs of alignment pairs adjacent in both hypothesis and reference.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor_lite(pred: &str, refs: &[String]) -> f64 {
    let hyp = metric_tokens(pred);
    refs.iter()
        .map(|r| {
            let r = metric_tokens(r);
            let pairs = meteor_alignment(&hyp, &r);
            let m = pairs.len() as f64;
            if m == 0.0 {
                return 0.0;
            }
            let p = m / hyp.len() as f64;
            let rec = m / r.len() as f64;
            let fmean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
            let pen = METEOR_GAMMA * (chunk_count(&pairs) as f64 / m).powf(METEOR_BETA);
            fmean * (1.0 - pen)
        })
        .fold(0.0, f64::max)
}

/// Lowercase, punctuation to spaces, collapsed whitespace, leading articles
/// dropped.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let mut toks: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    while toks.first().is_some_and(|t| matches!(t.as_str(), "a" | "an" | "the")) {
        toks.remove(0);
    }
    toks
}

fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

pub fn em1(pred: &str, refs: &[String]) -> bool {
    let p = normalize_answer(pred);
    refs.iter().any(|r| normalize_answer(r) == p)
}

/// Exact match, or either side contained in the other as an ordered token
/// subsequence (non-empty).
pub fn em1_refined(pred: &str, refs: &[String]) -> bool {
    let p = normalize_answer(pred);
    refs.iter().any(|r| {
        let r = normalize_answer(r);
        r == p || (!r.is_empty() && !p.is_empty() && (is_subsequence(&r, &p) || is_subsequence(&p, &r)))
    })
}

/// Source of sentence similarity scores in [-1, 1].
pub trait SimilarityProvider {
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

/// Cosine between term-frequency vectors of normalized tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosine;

impl SimilarityProvider for TfCosine {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let tf = |t: &str| {
            let mut m: BTreeMap<String, f64> = BTreeMap::new();
            for w in normalize_answer(t) {
                *m.entry(w).or_insert(0.0) += 1.0;
            }
            m
        };
        let (x, y) = (tf(a), tf(b));
        let dot: f64 = x.iter().filter_map(|(k, v)| y.get(k).map(|w| v * w)).sum();
        let nx = x.values().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.values().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) })
    }
}

pub fn sentence_similarity(pred: &str, refs: &[String], provider: &dyn SimilarityProvider) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for r in refs {
        best = best.max(provider.similarity(pred, r)?);
    }
    Ok(if best.is_finite() { best } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_lite: f64,
    pub em1: bool,
    pub em1_refined: bool,
    pub similarity: f64,
}

/// Corpus summary. BLEU-4 is corpus-level; the rest are per-sample means.
/// All values in [0, 1] except CIDEr (×10 scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_lite: f64,
    pub em1: f64,
    pub em1_refined: f64,
    pub similarity: f64,
}

pub fn evaluate_records(records: &[EvalRecord], provider: &dyn SimilarityProvider) -> Result<(EvalReport, Vec<SampleScores>)> {
    if records.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    for r in records {
        r.validate()?;
    }
    let ciders = cider_scores(records);
    let mut samples = Vec::with_capacity(records.len());
    for (r, c) in records.iter().zip(ciders) {
        samples.push(SampleScores {
            sample_id: r.sample_id.clone(),
            bleu4: bleu4(&r.prediction, &r.references),
            rouge_l: rouge_l(&r.prediction, &r.references),
            cider: c,
            meteor_lite: meteor_lite(&r.prediction, &r.references),
            em1: em1(&r.prediction, &r.references),
            em1_refined: em1_refined(&r.prediction, &r.references),
            similarity: sentence_similarity(&r.prediction, &r.references, provider)?,
        });
    }
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&SampleScores) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        n: samples.len(),
        bleu4: corpus_bleu4(records),
        rouge_l: mean(&|s| s.rouge_l),
        cider: mean(&|s| s.cider),
        meteor_lite: mean(&|s| s.meteor_lite),
        em1: mean(&|s| s.em1 as u8 as f64),
        em1_refined: mean(&|s| s.em1_refined as u8 as f64),
        similarity: mean(&|s| s.similarity),
    };
    Ok((report, samples))
}

pub fn write_sample_csv(path: &Path, samples: &[SampleScores]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for s in samples {
        w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeKind {
    Random,
    Popular,
    Adversarial,
}

impl FromStr for PopeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PopeKind::Random),
            "popular" => Ok(PopeKind::Popular),
            "adversarial" => Ok(PopeKind::Adversarial),
            _ => Err(Error::Config(format!("unknown POPE setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeSetting {
    pub kind: PopeKind,
    pub k: usize,
}

impl PopeSetting {
    pub fn new(kind: PopeKind, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("POPE k must be at least 1".into()));
        }
        Ok(PopeSetting { kind, k })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub scene_id: String,
    pub label: String,
    pub gt: bool,
}

impl PopeQuestion {
    pub fn text(&self) -> String {
        format!("Is there a {} in the scene?", self.label)
    }
}

/// Absent labels ordered by the setting's preference (best first). Random
/// is handled by the caller.
pub fn rank_absent(stats: &LabelStats, present: &BTreeSet<String>, kind: PopeKind) -> Vec<String> {
    let mut absent: Vec<String> = stats.labels.difference(present).cloned().collect();
    match kind {
        PopeKind::Random => {}
        PopeKind::Popular => absent.sort_by(|a, b| stats.freq(b).cmp(&stats.freq(a)).then_with(|| a.cmp(b))),
        PopeKind::Adversarial => {
            let score = |l: &str| present.iter().map(|p| stats.cooc(l, p)).sum::<usize>();
            absent.sort_by(|a, b| {
                score(b)
                    .cmp(&score(a))
                    .then_with(|| stats.freq(b).cmp(&stats.freq(a)))
                    .then_with(|| a.cmp(b))
            });
        }
    }
    absent
}

/// Per scene, `m = min(k, #present, #absent)` yes questions about randomly
/// chosen present labels and `m` no questions about absent labels.
pub fn pope_sample_questions(
    scenes: &BTreeMap<String, BTreeSet<String>>,
    setting: PopeSetting,
    seed: u64,
) -> Vec<PopeQuestion> {
    let sets: Vec<BTreeSet<String>> = scenes.values().cloned().collect();
    let stats = LabelStats::from_label_sets(&sets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (sid, present) in scenes {
        let mut absent = rank_absent(&stats, present, setting.kind);
        let m = setting.k.min(present.len()).min(absent.len());
        let mut pos: Vec<&String> = present.iter().collect();
        pos.shuffle(&mut rng);
        if setting.kind == PopeKind::Random {
            absent.shuffle(&mut rng);
        }
        for l in pos.into_iter().take(m) {
            out.push(PopeQuestion {
                scene_id: sid.clone(),
                label: l.clone(),
                gt: true,
            });
        }
        for l in absent.into_iter().take(m) {
            out.push(PopeQuestion {
                scene_id: sid.clone(),
                label: l,
                gt: false,
            });
        }
    }
    out
}

pub fn write_pope_questions(path: &Path, qs: &[PopeQuestion]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["scene_id", "label", "gt"]).map_err(|e| Error::Data(e.to_string()))?;
    for q in qs {
        w.write_record([q.scene_id.as_str(), q.label.as_str(), if q.gt { "yes" } else { "no" }])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pope_questions(path: &Path) -> Result<Vec<PopeQuestion>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, "csv", e.to_string()))?;
        let gt = match rec.get(2) {
            Some("yes") => true,
            Some("no") => false,
            other => {
                return Err(Error::parse(path, "csv", format!("row {}: gt must be yes or no, got {other:?}", i + 2)))
            }
        };
        out.push(PopeQuestion {
            scene_id: rec.get(0).unwrap_or_default().to_string(),
            label: rec.get(1).unwrap_or_default().to_string(),
            gt,
        });
    }
    Ok(out)
}

/// Reads a yes/no answer from free text. The flag is false when neither
/// word leads the answer.
pub fn parse_yes_no(text: &str) -> (bool, bool) {
    let toks = normalize_answer(text);
    match toks.first().map(String::as_str) {
        Some("yes") => (true, true),
        Some("no") => (false, true),
        _ => (toks.iter().any(|t| t == "yes"), false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub yes_rate: f64,
    pub n: usize,
    pub unparseable: usize,
}

pub fn pope_eval(answers: &[bool], gts: &[bool]) -> Result<PopeReport> {
    if answers.len() != gts.len() {
        return Err(Error::Data(format!("{} answers for {} questions", answers.len(), gts.len())));
    }
    if answers.is_empty() {
        return Err(Error::Data("no POPE answers".into()));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&a, &g) in answers.iter().zip(gts) {
        match (a, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        correct += (a == g) as usize;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeReport {
        precision,
        recall,
        f1,
        accuracy: ratio(correct, answers.len()),
        yes_rate: ratio(tp + fp, answers.len()),
        n: answers.len(),
        unparseable: 0,
    })
}

/// Parses free-form answers and scores them.
pub fn pope_eval_text(answers: &[String], gts: &[bool]) -> Result<PopeReport> {
    let parsed: Vec<(bool, bool)> = answers.iter().map(|a| parse_yes_no(a)).collect();
    let yes: Vec<bool> = parsed.iter().map(|p| p.0).collect();
    let mut rep = pope_eval(&yes, gts)?;
    rep.unparseable = parsed.iter().filter(|p| !p.1).count();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Vec<String> {
        vec![x.to_string()]
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert!((bleu4("a red box on the desk", &s("a red box on the desk")) - 1.0).abs() < 1e-12);
        assert!(bleu4("green ball", &s("a red box on the desk")) < 1e-8);
    }

    #[test]
    fn bleu_hand_computed() {
        // unigram 3/3, bigram 2/2, trigram 1/1, no 4-grams -> eps
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        let want = bp * BLEU_EPS.powf(0.25);
        assert!((bleu4("the cat sat", &s("the cat sat down")) - want).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l("the red box", &s("the red box")) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l("green", &s("red box")), 0.0);
        // lcs("a b c d", "a x c d") = 3
        let p = 3.0 / 4.0;
        let r = 3.0 / 4.0;
        let b2 = 1.44;
        let want = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l("a b c d", &s("a x c d")) - want).abs() < 1e-12);
    }

    #[test]
    fn meteor_chunks() {
        assert_eq!(chunk_count(&[(0, 1), (1, 2), (2, 0)]), 2);
        let one = meteor_lite("the red box", &s("the red box"));
        assert!((one - (1.0 - 0.5 * (1.0f64 / 3.0).powi(3))).abs() < 1e-12);
        assert_eq!(meteor_lite("green", &s("red box")), 0.0);
        // stem stage
        assert_eq!(meteor_alignment(&metric_tokens("boxes"), &metric_tokens("box")), vec![(0, 0)]);
        assert_eq!(meteor_alignment(&metric_tokens("red"), &metric_tokens("reds box")), vec![(0, 0)]);
        assert_eq!(meteor_alignment(&metric_tokens("chairs"), &metric_tokens("chair")), vec![(0, 0)]);
    }

    #[test]
    fn exact_match_rules() {
        assert!(em1("Wooden.", &s("wooden")));
        assert!(!em1("wooden table", &s("wooden")));
        assert!(em1_refined("wooden table", &s("wooden")));
        assert!(!em1("4", &s("3")) && !em1_refined("4", &s("3")));
        assert!(em1("The chair", &s("chair")));
        assert!(!em1_refined("", &s("chair")));
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let recs: Vec<EvalRecord> = ["red box on desk", "blue ball under chair", "green cone near lamp"]
            .iter()
            .enumerate()
            .map(|(i, t)| EvalRecord {
                sample_id: i.to_string(),
                prediction: t.to_string(),
                references: s(t),
            })
            .collect();
        let sc = cider_scores(&recs);
        assert!(sc.iter().all(|x| (x - sc[0]).abs() < 1e-12 && *x > 9.99));
        let mut bad = recs.clone();
        bad[0].prediction = "zebra".into();
        assert_eq!(cider_scores(&bad)[0], 0.0);
    }

    #[test]
    fn tf_cosine() {
        let t = TfCosine;
        assert!((t.similarity("red box", "red box").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t.similarity("red", "box").unwrap(), 0.0);
        let v = t.similarity("red red box", "red ball").unwrap();
        assert!((v - 2.0 / (5f64.sqrt() * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn pope_degenerate_cases() {
        let gts = [true, false, true, false];
        let r = pope_eval(&[true; 4], &gts).unwrap();
        assert_eq!((r.accuracy, r.recall, r.precision, r.yes_rate), (0.5, 1.0, 0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let r = pope_eval(&[false; 4], &gts).unwrap();
        assert_eq!((r.f1, r.accuracy, r.yes_rate), (0.0, 0.5, 0.0));
        let r = pope_eval(&gts, &gts).unwrap();
        assert_eq!((r.f1, r.accuracy, r.yes_rate), (1.0, 1.0, 0.5));
        assert!(pope_eval(&[], &[]).is_err());
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes, there is."), (true, true));
        assert_eq!(parse_yes_no("no"), (false, true));
        assert_eq!(parse_yes_no("I think yes"), (true, false));
        assert_eq!(parse_yes_no("maybe"), (false, false));
        let r = pope_eval_text(&["maybe".into(), "yes".into()], &[false, true]).unwrap();
        assert_eq!(r.unparseable, 1);
    }

    #[test]
    fn pope_sampler_balance_and_popular() {
        let mk = |ls: &[&str]| ls.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let scenes: BTreeMap<String, BTreeSet<String>> = [
            ("a".to_string(), mk(&["desk", "lamp"])),
            ("b".to_string(), mk(&["chair", "desk"])),
            ("c".to_string(), mk(&["chair", "monitor"])),
            ("d".to_string(), mk(&["chair", "cup"])),
        ]
        .into();
        let qs = pope_sample_questions(&scenes, PopeSetting::new(PopeKind::Popular, 1).unwrap(), 3);
        for sid in scenes.keys() {
            let yes = qs.iter().filter(|q| &q.scene_id == sid && q.gt).count();
            let no = qs.iter().filter(|q| &q.scene_id == sid && !q.gt).count();
            assert_eq!((yes, no), (1, 1));
        }
        let a_no = qs.iter().find(|q| q.scene_id == "a" && !q.gt).unwrap();
        assert_eq!(a_no.label, "chair");
        assert!(PopeSetting::new(PopeKind::Random, 0).is_err());
    }
}

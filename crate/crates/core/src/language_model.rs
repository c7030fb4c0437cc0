//! Miniature decoder-only language model with point-token injection.
//!
//! Input layout: `system · <point_start> · N × <point_patch> · <point_end> ·
//! instruction · response · <eos>`. Embeddings at the `<point_patch>`
//! positions are replaced by connector outputs, one per scene object.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const POINT_START: &str = "<point_start>";
pub const POINT_PATCH: &str = "<point_patch>";
pub const POINT_END: &str = "<point_end>";

/// Special tokens, always the first ids of a vocabulary in this order.
pub const SPECIALS: [&str; 7] = [PAD, UNK, BOS, EOS, POINT_START, POINT_PATCH, POINT_END];
pub const DEFAULT_VOCAB_CAP: usize = 8192;

/// Word-level vocabulary with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercased word and punctuation pieces of `text`.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let joins_word = c.is_alphanumeric()
            || (c == '\'' && !cur.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()));
        if joins_word {
            cur.extend(c.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocab {
    /// Builds a vocabulary over `texts`, most frequent words first (ties in
    /// lexicographic order), capped at `cap` entries including specials.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w).take(cap.saturating_sub(SPECIALS.len())));
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary must start with special token {s} at id {i}")));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    fn special(&self, s: &str) -> u32 {
        self.index[s]
    }

    pub fn unk(&self) -> u32 {
        self.special(UNK)
    }

    pub fn eos(&self) -> u32 {
        self.special(EOS)
    }

    pub fn point_start(&self) -> u32 {
        self.special(POINT_START)
    }

    pub fn point_patch(&self) -> u32 {
        self.special(POINT_PATCH)
    }

    pub fn point_end(&self) -> u32 {
        self.special(POINT_END)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Joins non-special tokens, attaching closing punctuation to the
    /// preceding word.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.unk() {
                continue;
            }
            let t = self.token(id);
            let attach = matches!(t, "." | "," | "?" | "!" | ";" | ":" | ")");
            if !out.is_empty() && !attach && !out.ends_with('(') {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }
}

/// Assembled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Positions of `<point_patch>` tokens, in object order.
    pub point_slots: Vec<usize>,
    /// True on response tokens (including the closing `<eos>`).
    pub response_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn response_positions(&self) -> Vec<usize> {
        self.response_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Lays out `system · <point_start> · n_points × <point_patch> · <point_end> ·
/// instruction · [response · <eos>]`.
pub fn assemble_layout(
    system: &str,
    n_points: usize,
    instruction: &str,
    response: Option<&str>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut ids = vocab.tokenize(system);
    ids.push(vocab.point_start());
    let first = ids.len();
    ids.extend(std::iter::repeat_n(vocab.point_patch(), n_points));
    let point_slots = (first..first + n_points).collect();
    ids.push(vocab.point_end());
    ids.extend(vocab.tokenize(instruction));
    let mut response_mask = vec![false; ids.len()];
    if let Some(r) = response {
        let mut rid = vocab.tokenize(r);
        rid.push(vocab.eos());
        response_mask.extend(std::iter::repeat_n(true, rid.len()));
        ids.extend(rid);
    }
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max_len });
    }
    Ok(TokenSequence {
        ids,
        point_slots,
        response_mask,
    })
}

/// Builds the token layout and pairs it with the injected point embeddings.
pub fn assemble_input(
    system: &str,
    point_tokens: &Matrix,
    instruction: &str,
    response: Option<&str>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(TokenSequence, Matrix)> {
    let seq = assemble_layout(system, point_tokens.rows, instruction, response, vocab, max_len)?;
    Ok((seq, point_tokens.clone()))
}

/// `(1/|y|) Σ log P(y_i | prefix)` over the response positions of `seq`,
/// reading row `i-1` of a per-position log-probability table.
pub fn sequence_logprob(table: &Matrix, seq: &TokenSequence) -> Result<f64> {
    let pos = seq.response_positions();
    if pos.is_empty() {
        return Err(Error::Data("empty response mask".into()));
    }
    let s: f64 = pos.iter().map(|&i| table.get(i - 1, seq.ids[i] as usize)).sum();
    Ok(s / pos.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 0,
            d_model: 96,
            n_layers: 4,
            n_heads: 4,
            max_len: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SPECIALS.len() {
            return Err(Error::Config(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size)));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    tok_embed: ParamId,
    /// Rows for `<point_start>`, `<point_patch>`, `<point_end>`.
    special_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    point_ids: [u32; 3],
}

impl LanguageModel {
    /// Registers parameters under `lm.*`; the point-token embeddings form the
    /// `special_embeddings` group.
    pub fn new<R: Rng>(config: LmConfig, vocab: &Vocab, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let d = config.d_model;
        let eb = 1.0 / (d as f64).sqrt();
        let tok_embed = store.insert_uniform(rng, "lm.tok_embed", Group::Lm, config.vocab_size, d, eb);
        let special_embed = store.insert_uniform(rng, "lm.special_embed", Group::SpecialEmbeddings, 3, d, eb);
        let pos_embed = store.insert_uniform(rng, "lm.pos_embed", Group::Lm, config.max_len, d, eb);
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, rng, &format!("lm.block.{l}"), Group::Lm, d, config.n_heads))
            .collect();
        let ln_f = LayerNorm::new(store, "lm.ln_f", Group::Lm, d);
        let head = Linear::new(store, rng, "lm.head", Group::Lm, d, config.vocab_size);
        Ok(LanguageModel {
            config,
            tok_embed,
            special_embed,
            pos_embed,
            blocks,
            ln_f,
            head,
            point_ids: [vocab.point_start(), vocab.point_patch(), vocab.point_end()],
        })
    }

    pub fn special_embed_param(&self) -> ParamId {
        self.special_embed
    }

    /// Input embeddings (token or injected, plus position) for `seq`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, seq: &TokenSequence, injected: Option<Var>) -> Result<Var> {
        let t = seq.len();
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max_len: self.config.max_len,
            });
        }
        if t == 0 {
            return Err(Error::Data("empty token sequence".into()));
        }
        let n_inj = injected.map_or(0, |v| tape.value(v).rows);
        if n_inj != seq.point_slots.len() {
            return Err(Error::Shape(format!(
                "{} point slots but {n_inj} injected embeddings",
                seq.point_slots.len()
            )));
        }
        if let Some(v) = injected {
            if tape.value(v).cols != self.config.d_model {
                return Err(Error::Shape(format!(
                    "injected embeddings have width {}, expected {}",
                    tape.value(v).cols,
                    self.config.d_model
                )));
            }
        }
        let tok = tape.param(store, self.tok_embed);
        let spec = tape.param(store, self.special_embed);
        let pos = tape.param(store, self.pos_embed);
        let mut slot_of = HashMap::new();
        for (k, &p) in seq.point_slots.iter().enumerate() {
            slot_of.insert(p, k);
        }
        let mut src = Vec::with_capacity(t);
        for (i, &id) in seq.ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Data(format!("token id {id} outside vocabulary")));
            }
            if let Some(&k) = slot_of.get(&i) {
                src.push((injected.expect("checked above"), k));
            } else if let Some(s) = self.point_ids.iter().position(|&p| p == id) {
                src.push((spec, s));
            } else {
                src.push((tok, id as usize));
            }
        }
        let x = tape.gather_rows(&src);
        let p: Vec<(Var, usize)> = (0..t).map(|i| (pos, i)).collect();
        let p = tape.gather_rows(&p);
        Ok(tape.add(x, p))
    }

    /// Final hidden states (`T×d_model`) under causal masking.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, seq: &TokenSequence, injected: Option<Var>) -> Result<Var> {
        let mut x = self.embed(tape, store, seq, injected)?;
        let mask = tape.constant(causal_mask(seq.len()));
        for b in &self.blocks {
            x = b.forward(tape, store, x, Some(mask), None);
        }
        Ok(self.ln_f.forward(tape, store, x))
    }

    /// Next-token log-probabilities for the listed rows of `hidden`.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, rows: &[usize]) -> Var {
        let h = if rows.len() == tape.value(hidden).rows && rows.iter().enumerate().all(|(i, &r)| i == r) {
            hidden
        } else {
            let src: Vec<(Var, usize)> = rows.iter().map(|&r| (hidden, r)).collect();
            tape.gather_rows(&src)
        };
        let logits = self.head.forward(tape, store, h);
        tape.log_softmax_rows(logits)
    }

    /// Per-position log-probability table (`T×V`) on the tape.
    pub fn forward_on(&self, tape: &mut Tape, store: &ParamStore, seq: &TokenSequence, injected: Option<Var>) -> Result<Var> {
        let h = self.hidden(tape, store, seq, injected)?;
        let rows: Vec<usize> = (0..seq.len()).collect();
        Ok(self.log_probs(tape, store, h, &rows))
    }

    pub fn forward(&self, store: &ParamStore, seq: &TokenSequence, injected: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::with_frozen(&Group::ALL);
        let inj = (injected.rows > 0).then(|| tape.constant(injected.clone()));
        let v = self.forward_on(&mut tape, store, seq, inj)?;
        Ok(tape.value(v).clone())
    }

    /// Average response log-probability as a `1×1` node; only the rows that
    /// predict response tokens are projected onto the vocabulary.
    pub fn response_logprob_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        injected: Option<Var>,
    ) -> Result<Var> {
        let pos = seq.response_positions();
        if pos.is_empty() {
            return Err(Error::Data("empty response mask".into()));
        }
        let h = self.hidden(tape, store, seq, injected)?;
        let rows: Vec<usize> = pos.iter().map(|&i| i - 1).collect();
        let lp = self.log_probs(tape, store, h, &rows);
        let picks: Vec<(usize, usize)> = pos.iter().enumerate().map(|(k, &i)| (k, seq.ids[i] as usize)).collect();
        let picked = tape.pick(lp, &picks);
        Ok(tape.mean(picked))
    }

    /// Greedy decoding (ties to the lowest id) until `<eos>`, `max_new`
    /// tokens, or `max_len`.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: &TokenSequence,
        injected: &Matrix,
        vocab: &Vocab,
        max_new: usize,
    ) -> Result<String> {
        let ids = self.generate_ids(store, prefix, injected, vocab.eos(), max_new)?;
        Ok(vocab.detokenize(&ids))
    }

    pub fn generate_ids(
        &self,
        store: &ParamStore,
        prefix: &TokenSequence,
        injected: &Matrix,
        eos: u32,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let mut seq = prefix.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_len {
                break;
            }
            let mut tape = Tape::with_frozen(&Group::ALL);
            let inj = (injected.rows > 0).then(|| tape.constant(injected.clone()));
            let h = self.hidden(&mut tape, store, &seq, inj)?;
            let lp = self.log_probs(&mut tape, store, h, &[seq.len() - 1]);
            let row = tape.value(lp).row(0);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let next = best as u32;
            if next == eos {
                break;
            }
            out.push(next);
            seq.ids.push(next);
            seq.response_mask.push(true);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["the red box is left of the chair . yes no what color is it ?"], 100)
    }

    fn tiny(v: &Vocab, seed: u64) -> (LanguageModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LmConfig {
            vocab_size: v.len(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 32,
        };
        let lm = LanguageModel::new(cfg, v, &mut store, &mut rng).unwrap();
        (lm, store)
    }

    fn inj(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(v.tokenize("yes"), vec![v.id("yes").unwrap()]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("zebra"), vec![v.unk()]);
        assert_eq!(split_words("I'd like the Red box."), vec!["i'd", "like", "the", "red", "box", "."]);
        assert_eq!(v.detokenize(&v.tokenize("What color is it?")), "what color is it?");
    }

    #[test]
    fn vocab_specials_and_round_trip() {
        let v = vocab();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let capped = Vocab::build(["a b c d e f g h"], SPECIALS.len() + 3);
        assert_eq!(capped.len(), SPECIALS.len() + 3);
    }

    #[test]
    fn layout_has_one_patch_per_object() {
        let v = vocab();
        let (seq, _) = assemble_input("sys", &inj(3, 8, 0), "what color is it ?", Some("red"), &v, 64).unwrap();
        let patches: Vec<usize> = seq.ids.iter().enumerate().filter(|(_, &id)| id == v.point_patch()).map(|(i, _)| i).collect();
        assert_eq!(patches.len(), 3);
        assert_eq!(patches, seq.point_slots);
        assert_eq!(seq.ids[patches[0] - 1], v.point_start());
        assert_eq!(seq.ids[patches[2] + 1], v.point_end());
        let resp: Vec<u32> = seq.response_positions().iter().map(|&i| seq.ids[i]).collect();
        assert_eq!(resp, vec![v.id("red").unwrap(), v.eos()]);
    }

    #[test]
    fn layout_without_response_or_points() {
        let v = vocab();
        let seq = assemble_layout("", 0, "what ?", None, &v, 64).unwrap();
        assert!(seq.response_mask.iter().all(|m| !m));
        assert_eq!(&seq.ids[..2], &[v.point_start(), v.point_end()]);
        assert!(matches!(
            assemble_layout("the the the the", 2, "what", Some("red"), &v, 6),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn rows_are_log_distributions() {
        let v = vocab();
        let (lm, store) = tiny(&v, 1);
        let (seq, e) = assemble_input("the", &inj(2, 8, 1), "what color", Some("red box"), &v, 32).unwrap();
        let table = lm.forward(&store, &seq, &e).unwrap();
        for r in 0..table.rows {
            let s: f64 = table.row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn future_tokens_do_not_affect_earlier_rows() {
        let v = vocab();
        let (lm, store) = tiny(&v, 2);
        let (a, e) = assemble_input("the", &inj(2, 8, 2), "what color", Some("red box"), &v, 32).unwrap();
        let mut b = a.clone();
        let n = b.ids.len();
        b.ids.swap(n - 1, n - 2);
        b.ids[n - 3] = v.id("chair").unwrap();
        let ta = lm.forward(&store, &a, &e).unwrap();
        let tb = lm.forward(&store, &b, &e).unwrap();
        for r in 0..n - 3 {
            assert_eq!(ta.row(r), tb.row(r));
        }
    }

    #[test]
    fn injected_embedding_causality_by_finite_differences() {
        // Perturbing the embedding at position j must leave rows i < j fixed.
        let v = vocab();
        let (lm, store) = tiny(&v, 3);
        let seq = assemble_layout("", 2, "what color", None, &v, 32).unwrap();
        assert_eq!(seq.len(), 6);
        let e = inj(2, 8, 3);
        let base = lm.forward(&store, &seq, &e).unwrap();
        for (k, &slot) in seq.point_slots.iter().enumerate() {
            let mut e2 = e.clone();
            e2.data[k * 8] += 1e-4;
            let t2 = lm.forward(&store, &seq, &e2).unwrap();
            for r in 0..slot {
                assert_eq!(base.row(r), t2.row(r), "row {r} changed by slot {slot}");
            }
            assert_ne!(base.row(slot), t2.row(slot));
        }
    }

    #[test]
    fn sequence_logprob_examples() {
        let v = vocab();
        let seq = assemble_layout("", 0, "what", Some("red"), &v, 32).unwrap();
        let vs = v.len();
        let uniform = Matrix::from_vec(seq.len(), vs, vec![-(vs as f64).ln(); seq.len() * vs]);
        assert!((sequence_logprob(&uniform, &seq).unwrap() + (vs as f64).ln()).abs() < 1e-12);

        let mut perfect = Matrix::from_vec(seq.len(), vs, vec![f64::NEG_INFINITY; seq.len() * vs]);
        for i in 1..seq.len() {
            perfect.data[(i - 1) * vs + seq.ids[i] as usize] = 0.0;
        }
        assert_eq!(sequence_logprob(&perfect, &seq).unwrap(), 0.0);

        // Response "red <eos>" with probabilities 0.5 and 0.25.
        let mut t = Matrix::zeros(seq.len(), vs);
        let pos = seq.response_positions();
        t.data[(pos[0] - 1) * vs + seq.ids[pos[0]] as usize] = 0.5f64.ln();
        t.data[(pos[1] - 1) * vs + seq.ids[pos[1]] as usize] = 0.25f64.ln();
        let got = sequence_logprob(&t, &seq).unwrap();
        assert!((got - (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!((got + 1.0397).abs() < 1e-4);

        let none = assemble_layout("", 0, "what", None, &v, 32).unwrap();
        assert!(sequence_logprob(&t, &none).is_err());
    }

    #[test]
    fn restricted_rows_match_full_table_and_stepwise_loop() {
        let v = vocab();
        let (lm, store) = tiny(&v, 4);
        let e = inj(2, 8, 4);
        let (seq, _) = assemble_input("the", &e, "what color", Some("red box"), &v, 32).unwrap();
        let table = lm.forward(&store, &seq, &e).unwrap();
        let from_table = sequence_logprob(&table, &seq).unwrap();
        let mut t = Tape::new();
        let iv = t.constant(e.clone());
        let node = lm.response_logprob_on(&mut t, &store, &seq, Some(iv)).unwrap();
        assert!((t.scalar(node) - from_table).abs() < 1e-12);

        // Teacher-forced re-evaluation, one prefix at a time.
        let pos = seq.response_positions();
        let mut total = 0.0;
        for &i in &pos {
            let prefix = TokenSequence {
                ids: seq.ids[..i].to_vec(),
                point_slots: seq.point_slots.clone(),
                response_mask: vec![false; i],
            };
            let tab = lm.forward(&store, &prefix, &e).unwrap();
            total += tab.get(i - 1, seq.ids[i] as usize);
        }
        assert!((total / pos.len() as f64 - from_table).abs() < 1e-12);
    }

    #[test]
    fn logprob_gradients_match_finite_differences() {
        let v = vocab();
        let (lm, mut store) = tiny(&v, 5);
        let e = inj(2, 8, 5);
        let (seq, _) = assemble_input("the", &e, "what", Some("red box"), &v, 32).unwrap();
        let eval = |s: &ParamStore, g: Option<&mut Grads>| {
            let mut t = Tape::new();
            let iv = t.constant(e.clone());
            let tab = lm.forward_on(&mut t, s, &seq, Some(iv)).unwrap();
            let all: Vec<(usize, usize)> = (0..seq.len()).flat_map(|r| [(r, 1), (r, 7), (r, 9)]).collect();
            let p = t.pick(tab, &all);
            let m = t.mean(p);
            if let Some(g) = g {
                t.backward(&[(m, Matrix::scalar(1.0))], g);
            }
            t.scalar(m)
        };
        let mut grads = Grads::zeros_like(&store);
        eval(&store, Some(&mut grads));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ids: Vec<_> = store.ids().collect();
        let h = 1e-4;
        for _ in 0..150 {
            let id = ids[rng.gen_range(0..ids.len())];
            let k = rng.gen_range(0..store.value(id).len());
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + h;
            let fp = eval(&store, None);
            store.value_mut(id).data[k] = orig - h;
            let fm = eval(&store, None);
            store.value_mut(id).data[k] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.get(id).data[k];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(err < 1e-4, "{}[{k}] analytic {ana} numeric {num}", store.name(id));
        }
    }

    #[test]
    fn generation_examples() {
        let v = vocab();
        let (lm, mut store) = tiny(&v, 6);
        let e = inj(1, 8, 6);
        let prefix = assemble_layout("", 1, "what color", None, &v, 32).unwrap();
        assert_eq!(lm.generate(&store, &prefix, &e, &v, 0).unwrap(), "");
        let a = lm.generate(&store, &prefix, &e, &v, 5).unwrap();
        assert_eq!(a, lm.generate(&store, &prefix, &e, &v, 5).unwrap());

        // Force <eos> to dominate every row.
        let b = store.id("lm.head.bias").unwrap();
        store.value_mut(b).data[v.eos() as usize] = 1e6;
        assert_eq!(lm.generate(&store, &prefix, &e, &v, 5).unwrap(), "");
    }

    #[test]
    fn injected_count_must_match_slots() {
        let v = vocab();
        let (lm, store) = tiny(&v, 7);
        let seq = assemble_layout("", 2, "what", Some("red"), &v, 32).unwrap();
        assert!(matches!(lm.forward(&store, &seq, &inj(1, 8, 0)), Err(Error::Shape(_))));
    }
}

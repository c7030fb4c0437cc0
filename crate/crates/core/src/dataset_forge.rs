//! Instruction-tuning data: sample schemas, prompt builders, hard-negative
//! generation through a pluggable completion client, easy negatives and
//! object-existence questions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::Scene;

const SYSTEM_PROMPT: &str = include_str!("../prompts/system.txt");
const QA_NEGATIVE: &str = include_str!("../prompts/qa_negative.txt");
const CAPTION_NEGATIVE: &str = include_str!("../prompts/caption_negative.txt");
const SCENE_CAPTION: &str = include_str!("../prompts/scene_caption.txt");

pub const QA_FORMAT: &str = "Answer the question using a single word or phrase.";
pub const CAPTION_FORMAT: &str = "Describe it briefly.";
pub const EXISTENCE_FORMAT: &str = "Please answer with yes or no.";
pub const REMOVE_PREFIX: &str = "REMOVE THIS SAMPLE:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ObjectCaption,
    ObjectInSceneCaption,
    SceneCaption,
    Qa,
    Existence,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ObjectCaption => "object_caption",
            Task::ObjectInSceneCaption => "object_in_scene_caption",
            Task::SceneCaption => "scene_caption",
            Task::Qa => "qa",
            Task::Existence => "existence",
        }
    }
}

/// (instruction, response) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub sample_id: String,
    pub scene_id: String,
    pub task: Task,
    pub instruction: String,
    pub response: String,
    /// Restricts the point input to one object of the scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    /// Further acceptable answers, used only for evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

/// (instruction, positive, negative) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub sample_id: String,
    pub scene_id: String,
    pub task: Task,
    pub instruction: String,
    pub positive: String,
    pub negative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
}

impl PairSample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() || self.response.trim().is_empty() {
            return Err(Error::Data(format!("sample {}: empty instruction or response", self.sample_id)));
        }
        Ok(())
    }
}

impl TripletSample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() || self.positive.trim().is_empty() || self.negative.trim().is_empty() {
            return Err(Error::Data(format!("sample {}: empty field", self.sample_id)));
        }
        if same_answer(&self.positive, &self.negative) {
            return Err(Error::NegativeEqualsPositive);
        }
        if self.task == Task::Existence {
            let yn = |s: &str| matches!(s, "yes" | "no");
            if !yn(&self.positive) || !yn(&self.negative) {
                return Err(Error::Data(format!(
                    "sample {}: existence answers must be yes/no",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

fn same_answer(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}", i + 1), e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Fixed system prompt prepended to every model input.
pub fn system_prompt() -> &'static str {
    SYSTEM_PROMPT.trim_end()
}

/// Replaces `{key}` placeholders in one left-to-right pass, so substituted
/// values are never re-scanned.
fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match slots.iter().find(|(k, _)| tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}')) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Label → count rendering used for the scene metadata slot.
pub fn object_dict(labels: &[String]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_insert(0) += 1;
    }
    serde_json::to_string(&counts).expect("string map serializes")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub warnings: Vec<String>,
}

pub fn build_qa_negative_prompt(question: &str, ground_truth: &str, object_list: &[String]) -> Result<Prompt> {
    if question.trim().is_empty() || ground_truth.trim().is_empty() {
        return Err(Error::Data("question and ground truth must be non-empty".into()));
    }
    let mut warnings = Vec::new();
    let objects = if object_list.is_empty() {
        warnings.push("scene has no listed objects; object section left empty".to_string());
        String::new()
    } else {
        object_dict(object_list)
    };
    let text = render(
        QA_NEGATIVE,
        &[
            ("question", question),
            ("chosen_value", ground_truth),
            ("object_dict", &objects),
        ],
    );
    Ok(Prompt {
        text: text.trim_end().to_string(),
        warnings,
    })
}

pub fn build_caption_negative_prompt(target_object: &str, description: &str) -> Result<String> {
    if target_object.trim().is_empty() || description.trim().is_empty() {
        return Err(Error::Data("target object and description must be non-empty".into()));
    }
    let text = render(
        CAPTION_NEGATIVE,
        &[("Target_Object", target_object), ("Description", description)],
    );
    Ok(text.trim_end().to_string())
}

pub fn build_scene_caption_prompt() -> &'static str {
    SCENE_CAPTION.trim_end()
}

/// Appends the stage-3 format prompt for `task`; other stages are untouched.
pub fn attach_format_prompt(stage: u8, task: Task, instruction: &str) -> String {
    let suffix = match (stage, task) {
        (3, Task::Qa) => QA_FORMAT,
        (3, Task::ObjectInSceneCaption) => CAPTION_FORMAT,
        (3, Task::Existence) => EXISTENCE_FORMAT,
        _ => return instruction.to_string(),
    };
    if instruction.ends_with(suffix) {
        return instruction.to_string();
    }
    format!("{} {suffix}", instruction.trim_end())
}

/// Removes a trailing format prompt, if any.
pub fn strip_format_prompt(instruction: &str) -> &str {
    for s in [QA_FORMAT, CAPTION_FORMAT, EXISTENCE_FORMAT] {
        if let Some(head) = instruction.strip_suffix(s) {
            return head.trim_end();
        }
    }
    instruction
}

pub fn merge_situation(situation: &str, question: &str) -> String {
    let s = situation.trim();
    if s.is_empty() {
        question.to_string()
    } else {
        format!("{s} {question}")
    }
}

/// Built-in instruction candidates, one list per task. `{target}` and
/// `{label}` are filled in by the caller.
pub fn instruction_candidates(task: Task) -> &'static [&'static str] {
    match task {
        Task::ObjectCaption => &[
            "Describe this object.",
            "What is this object?",
            "Give a short description of the object.",
            "Caption this 3D object.",
        ],
        Task::SceneCaption => &[
            "Describe this scene.",
            "Give a detailed description of the room.",
            "What does this space look like?",
            "Summarize the layout of the scene.",
        ],
        Task::ObjectInSceneCaption => &[
            "Describe the {target} in the scene.",
            "Where is the {target} located?",
            "Tell me about the {target} in this room.",
        ],
        Task::Existence => &[
            "Is there a {label} in the room?",
            "Does the room contain any {label}?",
            "Can you find a {label} in this scene?",
        ],
        Task::Qa => &[],
    }
}

pub fn pick_instruction<R: Rng>(rng: &mut R, task: Task, target: &str) -> String {
    let c = instruction_candidates(task);
    if c.is_empty() {
        return String::new();
    }
    let t = c[rng.gen_range(0..c.len())];
    render(t, &[("target", target), ("label", target)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Answer,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoveReason {
    InsufficientContext,
    UnreasonableGt,
    DirectionalAmbiguity,
    /// Unrecognized reason; the raw text is kept in [`NegativeResult::text`].
    Other,
}

impl RemoveReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemoveReason::InsufficientContext => "insufficient_context",
            RemoveReason::UnreasonableGt => "unreasonable_gt",
            RemoveReason::DirectionalAmbiguity => "directional_ambiguity",
            RemoveReason::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeResult {
    pub kind: NegativeKind,
    pub text: String,
    pub remove_reason: Option<RemoveReason>,
}

/// Text-completion backend used for hard-negative generation.
pub trait CompletionClient: Send + Sync {
    fn send(&self, prompt: &str, attachments: &[PathBuf]) -> Result<String>;
}

/// Parses a completion into an answer or a removal request.
pub fn parse_negative(raw: &str) -> NegativeResult {
    let t = raw.trim().trim_matches(|c| matches!(c, '"' | '“' | '”'));
    let Some(reason) = t.strip_prefix(REMOVE_PREFIX) else {
        return NegativeResult {
            kind: NegativeKind::Answer,
            text: t.to_string(),
            remove_reason: None,
        };
    };
    let r = reason.trim().trim_end_matches('.').to_lowercase();
    let kind = match r.as_str() {
        "insufficient image context" => RemoveReason::InsufficientContext,
        "unreasonable gt" => RemoveReason::UnreasonableGt,
        "directional ambiguity" => RemoveReason::DirectionalAmbiguity,
        _ => RemoveReason::Other,
    };
    NegativeResult {
        kind: NegativeKind::Remove,
        text: t.to_string(),
        remove_reason: Some(kind),
    }
}

pub fn generate_hard_negative(
    client: &dyn CompletionClient,
    prompt: &str,
    attachments: &[PathBuf],
    ground_truth: &str,
) -> Result<NegativeResult> {
    let raw = client.send(prompt, attachments)?;
    let res = parse_negative(&raw);
    if res.kind == NegativeKind::Answer {
        if res.text.is_empty() {
            return Err(Error::Data("completion returned an empty negative".into()));
        }
        if same_answer(&res.text, ground_truth) {
            return Err(Error::NegativeEqualsPositive);
        }
    }
    Ok(res)
}

/// Attribute lexicon cycled by the mock client: each word maps to the next
/// entry of its group.
pub const SWAP_GROUPS: &[&[&str]] = &[
    &["red", "blue", "green", "yellow", "white", "black", "brown", "gray"],
    &["box", "ball", "cylinder", "cone"],
    &["wooden", "metal", "plastic", "glass", "laminated"],
    &["small", "large"],
    &["tall", "short"],
    &["left", "right"],
    &["above", "below"],
    &["front", "behind"],
    &["yes", "no"],
    &["one", "two", "three", "four", "five", "six"],
];

/// FNV-1a; picks swap targets so the mock has no fixed answer ordering.
fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn swap_word(w: &str, salt: u64) -> Option<String> {
    if let Ok(n) = w.parse::<u64>() {
        return Some((n + 1).to_string());
    }
    SWAP_GROUPS.iter().find_map(|g| {
        g.iter().position(|x| *x == w).map(|i| {
            let shift = 1 + (salt % (g.len() as u64 - 1)) as usize;
            g[(i + shift) % g.len()].to_string()
        })
    })
}

/// Replaces the first swappable word of `text` (case-insensitive match)
/// with another member of its group chosen by a hash of `text`; failing
/// that, swaps an object label for another label of the scene.
pub fn attribute_swap(text: &str, labels: &[String]) -> Option<String> {
    let salt = fnv1a(text);
    let words: Vec<&str> = text.split(' ').collect();
    for (i, w) in words.iter().enumerate() {
        let core = w.trim_matches(|c: char| !c.is_alphanumeric());
        if let Some(s) = swap_word(&core.to_lowercase(), salt) {
            let mut out: Vec<String> = words.iter().map(|s| s.to_string()).collect();
            out[i] = w.replacen(core, &s, 1);
            return Some(out.join(" "));
        }
    }
    for (i, w) in words.iter().enumerate() {
        let core = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        if labels.contains(&core) {
            if let Some(other) = labels.iter().find(|l| **l != core) {
                let mut out: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                out[i] = w.to_lowercase().replacen(&core, other, 1);
                return Some(out.join(" "));
            }
        }
    }
    None
}

fn field_after<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    let start = prompt.rfind(marker)? + marker.len();
    Some(prompt[start..].lines().next().unwrap_or("").trim())
}

/// Deterministic, stateless stand-in for a remote completion model.
///
/// Looks the question (or description) and then the ground truth up in a
/// fixture; otherwise applies [`attribute_swap`], and asks for removal when
/// nothing can be swapped.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    pub fixture: BTreeMap<String, String>,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(fixture: BTreeMap<String, String>) -> Self {
        MockClient { fixture }
    }

    /// Loads a JSON object `{ key: completion }`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fixture = serde_json::from_str(&s).map_err(|e| Error::parse(path, "json", e.to_string()))?;
        Ok(MockClient { fixture })
    }
}

impl CompletionClient for MockClient {
    fn send(&self, prompt: &str, _attachments: &[PathBuf]) -> Result<String> {
        let (key, gt, labels) = if let Some(q) = field_after(prompt, "- Question: ") {
            let gt = field_after(prompt, "- Ground Truth (GT): ").unwrap_or("");
            let objs = field_after(prompt, "- All objects in the scene: ").unwrap_or("");
            let labels: Vec<String> = serde_json::from_str::<BTreeMap<String, usize>>(objs)
                .map(|m| m.into_keys().collect())
                .unwrap_or_default();
            (q, gt, labels)
        } else if let Some(d) = field_after(prompt, "Description: ") {
            let target = field_after(prompt, "Target Object: ").unwrap_or("");
            (d, d, vec![target.to_string()])
        } else {
            return Ok(format!("{REMOVE_PREFIX} Insufficient image context"));
        };
        if let Some(v) = self.fixture.get(key).or_else(|| self.fixture.get(gt)) {
            return Ok(v.clone());
        }
        Ok(attribute_swap(gt, &labels).unwrap_or_else(|| format!("{REMOVE_PREFIX} Insufficient image context")))
    }
}

/// Per-label scene frequencies and pairwise co-occurrences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStats {
    pub frequency: BTreeMap<String, usize>,
    pub cooccurrence: BTreeMap<(String, String), usize>,
    pub labels: BTreeSet<String>,
}

impl LabelStats {
    pub fn from_label_sets(sets: &[BTreeSet<String>]) -> Self {
        let mut st = LabelStats::default();
        for s in sets {
            for a in s {
                st.labels.insert(a.clone());
                *st.frequency.entry(a.clone()).or_insert(0) += 1;
                for b in s {
                    if a != b {
                        *st.cooccurrence.entry((a.clone(), b.clone())).or_insert(0) += 1;
                    }
                }
            }
        }
        st
    }

    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let sets: Vec<BTreeSet<String>> = scenes.iter().map(|s| s.all_labels().keys().cloned().collect()).collect();
        Self::from_label_sets(&sets)
    }

    pub fn freq(&self, label: &str) -> usize {
        self.frequency.get(label).copied().unwrap_or(0)
    }

    pub fn cooc(&self, a: &str, b: &str) -> usize {
        self.cooccurrence.get(&(a.to_string(), b.to_string())).copied().unwrap_or(0)
    }

    /// Largest co-occurrence of `label` with any of `present`.
    pub fn max_cooc(&self, label: &str, present: &BTreeSet<String>) -> usize {
        present.iter().map(|p| self.cooc(label, p)).max().unwrap_or(0)
    }

    /// Sampling weight of an absent label: frequency × max co-occurrence.
    pub fn existence_weight(&self, label: &str, present: &BTreeSet<String>) -> f64 {
        (self.freq(label) * self.max_cooc(label, present)) as f64
    }
}

/// Draws `k` distinct items with probability proportional to `weights`
/// (successive draws without replacement).
pub fn weighted_without_replacement<R: Rng>(rng: &mut R, items: &[String], weights: &[f64], k: usize) -> Vec<String> {
    let mut pool: Vec<(String, f64)> = items.iter().cloned().zip(weights.iter().copied()).collect();
    let mut out = Vec::new();
    while out.len() < k && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = pool.len() - 1;
            for (i, p) in pool.iter().enumerate() {
                if p.1 <= 0.0 {
                    continue;
                }
                if r < p.1 {
                    chosen = i;
                    break;
                }
                r -= p.1;
            }
            chosen
        } else {
            rng.gen_range(0..pool.len())
        };
        out.push(pool.remove(idx).0);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ExistenceOutput {
    pub samples: Vec<TripletSample>,
    pub warnings: Vec<String>,
}

/// Balanced yes/no existence triplets: `n_per_scene − n_per_scene/2` about
/// present labels and `n_per_scene/2` about absent ones.
pub fn existence_questions(scenes: &[Scene], n_per_scene: usize, rng_seed: u64) -> Result<ExistenceOutput> {
    if scenes.len() < 2 {
        return Err(Error::Data("existence questions need at least two scenes".into()));
    }
    let stats = LabelStats::from_scenes(scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = ExistenceOutput::default();
    for scene in scenes {
        let present: BTreeSet<String> = scene.all_labels().keys().cloned().collect();
        let n_absent = n_per_scene / 2;
        let n_present = n_per_scene - n_absent;
        let plist: Vec<String> = present.iter().cloned().collect();
        let mut asked = Vec::new();
        let mut shuffled = plist.clone();
        shuffled.shuffle(&mut rng);
        for i in 0..n_present {
            asked.push((shuffled[i % shuffled.len()].clone(), true));
        }
        let absent: Vec<String> = stats.labels.iter().filter(|l| !present.contains(*l)).cloned().collect();
        if absent.is_empty() && n_absent > 0 {
            out.warnings.push(format!(
                "scene {} contains every known label; absent-object questions skipped",
                scene.scene_id
            ));
        } else if n_absent > 0 {
            let mut w: Vec<f64> = absent.iter().map(|l| stats.existence_weight(l, &present)).collect();
            if w.iter().all(|&x| x == 0.0) {
                w = absent.iter().map(|l| stats.freq(l) as f64).collect();
            }
            let mut chosen = weighted_without_replacement(&mut rng, &absent, &w, n_absent);
            let mut i = 0;
            while chosen.len() < n_absent {
                chosen.push(chosen[i].clone());
                i += 1;
            }
            asked.extend(chosen.into_iter().map(|l| (l, false)));
        }
        for (label, here) in asked {
            let q = pick_instruction(&mut rng, Task::Existence, &label);
            let (pos, neg) = if here { ("yes", "no") } else { ("no", "yes") };
            out.samples.push(TripletSample {
                sample_id: format!("exist-{}-{}", scene.scene_id, out.samples.len()),
                scene_id: scene.scene_id.clone(),
                task: Task::Existence,
                instruction: attach_format_prompt(3, Task::Existence, &q),
                positive: pos.into(),
                negative: neg.into(),
                object_id: None,
            });
        }
    }
    Ok(out)
}

/// A response drawn uniformly from samples whose instruction and response
/// both differ from those of `corpus[index]`.
pub fn easy_negative(corpus: &[PairSample], index: usize, rng_seed: u64) -> Result<String> {
    if corpus.len() < 2 {
        return Err(Error::Data("easy negatives need at least two samples".into()));
    }
    let target = corpus
        .get(index)
        .ok_or_else(|| Error::Data(format!("index {index} out of range")))?;
    let pool: Vec<&PairSample> = corpus
        .iter()
        .filter(|s| s.instruction != target.instruction && !same_answer(&s.response, &target.response))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data(format!(
            "no sample with a different instruction and response for {}",
            target.sample_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(pool[rng.gen_range(0..pool.len())].response.clone())
}

/// One removed or dropped candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Removal {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ForgeOutput {
    pub triplets: Vec<TripletSample>,
    pub removed: Vec<Removal>,
    pub warnings: Vec<String>,
}

impl ForgeOutput {
    pub fn removal_rate(&self) -> f64 {
        let n = self.triplets.len() + self.removed.len();
        if n == 0 {
            0.0
        } else {
            self.removed.len() as f64 / n as f64
        }
    }
}

pub fn write_removals(path: &Path, removed: &[Removal]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["sample_id", "reason"]).map_err(|e| Error::Data(e.to_string()))?;
    for r in removed {
        w.write_record([&r.sample_id, &r.reason]).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels of every scene, by id, for prompt metadata and target lookup.
pub type SceneLabels = BTreeMap<String, Vec<(u32, String)>>;

pub fn scene_labels(scenes: &[Scene]) -> SceneLabels {
    scenes
        .iter()
        .map(|s| {
            (
                s.scene_id.clone(),
                s.objects().iter().map(|o| (o.object_id, o.label.clone())).collect(),
            )
        })
        .collect()
}

/// Hard-negative triplets for QA and object-in-scene caption candidates.
/// Candidates of other tasks are passed over with a warning. Output order
/// follows input order.
/// Hard-negative triplets for QA and object-in-scene caption candidates.
/// When `images` is given, `<images>/<scene_id>.png` (if present) is sent
/// along with each prompt.
pub fn forge_hard_negatives(
    candidates: &[PairSample],
    labels: &SceneLabels,
    client: &dyn CompletionClient,
    images: Option<&Path>,
) -> Result<ForgeOutput> {
    let mut out = ForgeOutput::default();
    for c in candidates {
        let attachments: Vec<PathBuf> = images
            .map(|d| d.join(format!("{}.png", c.scene_id)))
            .filter(|p| p.is_file())
            .into_iter()
            .collect();
        let objs: Vec<String> = labels
            .get(&c.scene_id)
            .map(|v| v.iter().map(|(_, l)| l.clone()).collect())
            .unwrap_or_default();
        let question = strip_format_prompt(&c.instruction);
        let prompt = match c.task {
            Task::Qa => {
                let p = build_qa_negative_prompt(question, &c.response, &objs)?;
                out.warnings.extend(p.warnings.into_iter().map(|w| format!("{}: {w}", c.sample_id)));
                p.text
            }
            Task::ObjectInSceneCaption => {
                let target = c
                    .object_id
                    .and_then(|id| labels.get(&c.scene_id)?.iter().find(|(i, _)| *i == id).map(|(_, l)| l.clone()))
                    .unwrap_or_else(|| "object".into());
                build_caption_negative_prompt(&target, &c.response)?
            }
            _ => {
                out.warnings.push(format!("{}: task {} has no hard-negative prompt", c.sample_id, c.task.as_str()));
                continue;
            }
        };
        match generate_hard_negative(client, &prompt, &attachments, &c.response) {
            Ok(r) if r.kind == NegativeKind::Remove => out.removed.push(Removal {
                sample_id: c.sample_id.clone(),
                reason: match r.remove_reason {
                    Some(RemoveReason::Other) | None => r.text,
                    Some(k) => k.as_str().to_string(),
                },
            }),
            Ok(r) => out.triplets.push(TripletSample {
                sample_id: c.sample_id.clone(),
                scene_id: c.scene_id.clone(),
                task: c.task,
                instruction: attach_format_prompt(3, c.task, &c.instruction),
                positive: c.response.clone(),
                negative: r.text,
                object_id: c.object_id,
            }),
            Err(Error::NegativeEqualsPositive) => out.removed.push(Removal {
                sample_id: c.sample_id.clone(),
                reason: "negative_equals_positive".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Easy-negative triplets: each candidate paired with another sample's
/// response.
pub fn forge_easy_negatives(candidates: &[PairSample], rng_seed: u64) -> Result<ForgeOutput> {
    let mut out = ForgeOutput::default();
    for (i, c) in candidates.iter().enumerate() {
        match easy_negative(candidates, i, rng_seed) {
            Ok(neg) => out.triplets.push(TripletSample {
                sample_id: c.sample_id.clone(),
                scene_id: c.scene_id.clone(),
                task: c.task,
                instruction: attach_format_prompt(3, c.task, &c.instruction),
                positive: c.response.clone(),
                negative: neg,
                object_id: c.object_id,
            }),
            Err(Error::Data(msg)) => out.removed.push(Removal {
                sample_id: c.sample_id.clone(),
                reason: msg,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Raw annotation record accepted by data preparation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub scene_id: String,
    pub task: Task,
    /// Missing for caption tasks: drawn from the built-in candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub response: String,
    /// Situation sentence merged in front of the question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub situation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

impl Annotation {
    pub fn new(scene_id: &str, task: Task, response: &str) -> Self {
        Annotation {
            id: None,
            scene_id: scene_id.to_string(),
            task,
            instruction: None,
            response: response.to_string(),
            situation: None,
            object_id: None,
            references: Vec::new(),
        }
    }

    pub fn with_object(mut self, id: u32) -> Self {
        self.object_id = Some(id);
        self
    }
}

/// Per-stage pair datasets. Stage-3 pairs are candidates awaiting negatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreparedData {
    pub stage1: Vec<PairSample>,
    pub stage2: Vec<PairSample>,
    pub stage3: Vec<PairSample>,
}

/// Routes annotations to stages: object captions to stage 1, scene captions
/// to stage 2, object-in-scene captions to stages 2 and 3, questions to
/// stage 3. Stage-3 instructions carry their format prompt.
pub fn prepare_samples(annotations: &[Annotation], labels: &SceneLabels, seed: u64) -> Result<PreparedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PreparedData::default();
    for (i, a) in annotations.iter().enumerate() {
        let sample_id = a.id.clone().unwrap_or_else(|| format!("ann{i:06}"));
        let objs = labels
            .get(&a.scene_id)
            .ok_or_else(|| Error::Data(format!("annotation {sample_id} refers to unknown scene {}", a.scene_id)))?;
        let target = match a.object_id {
            Some(id) => objs
                .iter()
                .find(|(o, _)| *o == id)
                .map(|(_, l)| l.clone())
                .ok_or_else(|| Error::Data(format!("annotation {sample_id}: scene {} has no object {id}", a.scene_id)))?,
            None => "object".to_string(),
        };
        let given = a.instruction.as_deref().map(str::trim).filter(|s| !s.is_empty());
        let instruction = match (given, a.task) {
            (Some(q), _) => q.to_string(),
            (None, Task::Qa) => return Err(Error::Data(format!("annotation {sample_id}: question without instruction"))),
            (None, Task::Existence) => {
                return Err(Error::Data(format!(
                    "annotation {sample_id}: existence samples are generated, not annotated"
                )))
            }
            (None, t) => pick_instruction(&mut rng, t, &target),
        };
        let instruction = merge_situation(a.situation.as_deref().unwrap_or(""), &instruction);
        let sample = PairSample {
            sample_id,
            scene_id: a.scene_id.clone(),
            task: a.task,
            instruction,
            response: a.response.trim().to_string(),
            object_id: a.object_id,
            references: a.references.clone(),
        };
        sample.validate()?;
        let staged = |mut s: PairSample| {
            s.instruction = attach_format_prompt(3, s.task, &s.instruction);
            s
        };
        match a.task {
            Task::ObjectCaption => out.stage1.push(sample),
            Task::SceneCaption => out.stage2.push(sample),
            Task::ObjectInSceneCaption => {
                out.stage3.push(staged(sample.clone()));
                out.stage2.push(sample);
            }
            Task::Qa => out.stage3.push(staged(sample)),
            Task::Existence => unreachable!("rejected above"),
        }
    }
    Ok(out)
}

/// Writes `text` followed by a newline, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

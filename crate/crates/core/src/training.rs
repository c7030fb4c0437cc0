//! Staged training: configs, optimizer, the per-step loop, checkpoints and
//! gradient checking.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::checkpoint::{self, DType, NamedTensor};
use crate::dataset_forge::{PairSample, TripletSample};
use crate::error::{Error, Result};
use crate::language_model::TokenSequence;
use crate::model::{load_model, save_model, Model, ModelConfig, SceneMap};
use crate::objective::{lambda_at, sample_loss, LambdaSchedule, LossBreakdown, LossKind, OddsMode};
use crate::params::{Grads, Group, ParamStore};
use crate::scene_encoder::SceneInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub loss_mode: LossKind,
    pub lambda_max: f64,
    pub odds_mode: OddsMode,
    pub trainable: BTreeSet<Group>,
}

pub fn default_stage_config(stage: u8) -> Result<StageConfig> {
    let lr = match stage {
        1 => 2e-3,
        2 => 1e-4,
        3 => 5e-6,
        _ => return Err(Error::Config(format!("stage must be 1, 2 or 3, got {stage}"))),
    };
    let mut trainable: BTreeSet<Group> = [Group::SpatialTransformer, Group::Connector, Group::SpecialEmbeddings].into();
    if stage == 3 {
        trainable.insert(Group::Lm);
    }
    Ok(StageConfig {
        stage,
        learning_rate: lr,
        max_steps: 200,
        batch_size: 4,
        accumulation: 2,
        weight_decay: 5e-2,
        betas: [0.9, 0.999],
        eps: 1e-8,
        loss_mode: if stage == 3 { LossKind::Or } else { LossKind::Sft },
        lambda_max: if stage == 3 { 0.3 } else { 0.0 },
        odds_mode: OddsMode::LengthNormalized,
        trainable,
    })
}

impl StageConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.stage < 3 && (self.loss_mode != LossKind::Sft || self.trainable.contains(&Group::Lm)) {
            return Err(Error::Config(format!(
                "stage {} trains with nll_only and a frozen language model",
                self.stage
            )));
        }
        if self.batch_size == 0 || self.accumulation == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size, accumulation and max_steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lambda_max >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate, lambda_max and weight_decay must be non-negative".into()));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        Ok(())
    }

    /// λ actually used: zero for NLL-only training.
    pub fn effective_lambda_max(&self) -> f64 {
        if self.loss_mode == LossKind::Sft {
            0.0
        } else {
            self.lambda_max
        }
    }

    pub fn lambda_schedule(&self) -> LambdaSchedule {
        LambdaSchedule {
            lambda_max: self.effective_lambda_max(),
            total_steps: self.max_steps,
        }
    }

    pub fn needs_negatives(&self) -> bool {
        self.loss_mode != LossKind::Sft
    }
}

/// Training config file: stage keys at top level overriding the stage
/// defaults, with an optional `[model]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub stage: StageConfig,
    pub model: Option<ModelConfig>,
}

/// Parses a TOML config. `stage` in the file wins over `default_stage`.
pub fn parse_config(text: &str, default_stage: u8, path: &Path) -> Result<ConfigFile> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::parse(path, "toml", e.to_string()))?;
    let model = match table.remove("model") {
        Some(v) => Some(v.try_into::<ModelConfig>().map_err(|e| Error::parse(path, "[model]", e.to_string()))?),
        None => None,
    };
    let stage = match table.get("stage") {
        Some(v) => v
            .as_integer()
            .and_then(|i| u8::try_from(i).ok())
            .ok_or_else(|| Error::parse(path, "stage", "stage must be an integer"))?,
        None => default_stage,
    };
    let mut merged = toml::Table::try_from(default_stage_config(stage)?).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in table {
        if !merged.contains_key(&k) {
            return Err(Error::parse(path, &k, format!("unknown key {k:?}")));
        }
        merged.insert(k, v);
    }
    let cfg: StageConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::parse(path, "stage config", e.to_string()))?;
    cfg.validate()?;
    Ok(ConfigFile { stage: cfg, model })
}

/// `base_lr · ½(1 + cos(π·step/max_steps))`.
pub fn cosine_lr(base_lr: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return base_lr;
    }
    let t = (step.min(max_steps)) as f64 / max_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Zeroes gradients of groups outside `trainable`.
pub fn apply_trainable_mask(grads: &mut Grads, store: &ParamStore, trainable: &BTreeSet<Group>) {
    for id in store.ids() {
        if !trainable.contains(&store.group(id)) {
            grads.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// One training record with tokenized responses.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample_id: String,
    pub scene: usize,
    pub positive: TokenSequence,
    pub negative: Option<TokenSequence>,
}

/// Encoded scenes plus tokenized examples.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub scenes: Vec<SceneInput>,
    pub examples: Vec<Example>,
}

/// Common view over pair and triplet records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSample {
    pub sample_id: String,
    pub scene_id: String,
    pub object_id: Option<u32>,
    pub instruction: String,
    pub positive: String,
    pub negative: Option<String>,
}

impl From<&PairSample> for TrainSample {
    fn from(p: &PairSample) -> Self {
        TrainSample {
            sample_id: p.sample_id.clone(),
            scene_id: p.scene_id.clone(),
            object_id: p.object_id,
            instruction: p.instruction.clone(),
            positive: p.response.clone(),
            negative: None,
        }
    }
}

impl From<&TripletSample> for TrainSample {
    fn from(t: &TripletSample) -> Self {
        TrainSample {
            sample_id: t.sample_id.clone(),
            scene_id: t.scene_id.clone(),
            object_id: t.object_id,
            instruction: t.instruction.clone(),
            positive: t.positive.clone(),
            negative: Some(t.negative.clone()),
        }
    }
}

impl TrainSet {
    /// Encodes every referenced (scene, object) once and tokenizes samples.
    pub fn build(model: &Model, store: &ParamStore, scenes: &SceneMap, samples: &[TrainSample], system: &str) -> Result<TrainSet> {
        let mut index: BTreeMap<(String, Option<u32>), usize> = BTreeMap::new();
        let mut inputs = Vec::new();
        let mut examples = Vec::with_capacity(samples.len());
        for s in samples {
            let key = (s.scene_id.clone(), s.object_id);
            let si = match index.get(&key) {
                Some(&i) => i,
                None => {
                    let scene = scenes
                        .get(&s.scene_id)
                        .ok_or_else(|| Error::Data(format!("sample {} refers to unknown scene {}", s.sample_id, s.scene_id)))?;
                    inputs.push(model.scene_input(store, scene, s.object_id)?);
                    index.insert(key, inputs.len() - 1);
                    inputs.len() - 1
                }
            };
            let n = inputs[si].object_count();
            let positive = model.layout(system, n, &s.instruction, Some(&s.positive))?;
            let negative = match &s.negative {
                Some(neg) => Some(model.layout(system, n, &s.instruction, Some(neg))?),
                None => None,
            };
            examples.push(Example {
                sample_id: s.sample_id.clone(),
                scene: si,
                positive,
                negative,
            });
        }
        if examples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(TrainSet { scenes: inputs, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_negatives(&self) -> bool {
        self.examples.iter().all(|e| e.negative.is_some())
    }
}

/// Parameters, AdamW moments and data position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub store: ParamStore,
    pub m: Grads,
    pub v: Grads,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(store: ParamStore, seed: u64) -> Self {
        let m = Grads::zeros_like(&store);
        let v = Grads::zeros_like(&store);
        TrainState {
            step: 0,
            store,
            m,
            v,
            seed,
            epoch: 0,
            cursor: 0,
            history: Vec::new(),
        }
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0xA076_1D64_78BD_642F));
        idx.shuffle(&mut rng);
        idx
    }

    /// Next `k` example indices in the seeded epoch order.
    fn next_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        let mut order = self.order(n);
        while out.len() < k {
            if self.cursor >= n {
                self.epoch += 1;
                self.cursor = 0;
                order = self.order(n);
            }
            out.push(order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Loss and gradients of one example; gradients are scaled by `weight`.
fn example_grads(
    model: &Model,
    store: &ParamStore,
    set: &TrainSet,
    ex: &Example,
    cfg: &StageConfig,
    lambda: f64,
    weight: f64,
    grads: &mut Grads,
) -> Result<LossBreakdown> {
    let frozen: Vec<Group> = Group::ALL.into_iter().filter(|g| !cfg.trainable.contains(g)).collect();
    let mut tape = Tape::with_frozen(&frozen);
    let scene = &set.scenes[ex.scene];
    let inj = model.encode(&mut tape, store, scene)?;
    let pos = model.lm.response_logprob_on(&mut tape, store, &ex.positive, Some(inj))?;
    let neg = match (&ex.negative, cfg.loss_mode) {
        (_, LossKind::Sft) | (None, _) => None,
        (Some(seq), _) => Some(model.lm.response_logprob_on(&mut tape, store, seq, Some(inj))?),
    };
    let pos_val = tape.scalar(pos);
    let neg_val = neg.map(|n| tape.scalar(n));
    if !pos_val.is_finite() || neg_val.is_some_and(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite log-probability in sample {}", ex.sample_id)));
    }
    let pos_len = ex.positive.response_positions().len();
    let neg_len = ex.negative.as_ref().map_or(0, |s| s.response_positions().len());
    let s = sample_loss(cfg.loss_mode, cfg.odds_mode, lambda, pos_val, neg_val, pos_len, neg_len)?;
    let mut seeds = vec![(pos, Matrix::scalar(s.d_pos * weight))];
    if let (Some(n), Some(d)) = (neg, s.d_neg) {
        seeds.push((n, Matrix::scalar(d * weight)));
    }
    tape.backward(&seeds, grads);
    Ok(s.breakdown)
}

fn adamw_update(state: &mut TrainState, grads: &Grads, cfg: &StageConfig, lr: f64) {
    let t = (state.step + 1) as i32;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = state.store.ids().collect();
    for id in ids {
        if !cfg.trainable.contains(&state.store.group(id)) {
            continue;
        }
        let g = &grads.get(id).data;
        let m = &mut state.m.get_mut(id).data;
        let v = &mut state.v.get_mut(id).data;
        let p = &mut state.store.value_mut(id).data;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
}

/// One optimizer step over `accumulation × batch_size` examples.
pub fn train_step(model: &Model, state: &mut TrainState, set: &TrainSet, cfg: &StageConfig) -> Result<LossBreakdown> {
    if cfg.needs_negatives() && cfg.effective_lambda_max() > 0.0 && !set.has_negatives() {
        return Err(Error::Data(format!(
            "loss mode {:?} needs triplet samples but the dataset has pairs",
            cfg.loss_mode
        )));
    }
    let lambda = lambda_at(&cfg.lambda_schedule(), state.step);
    let total = cfg.batch_size * cfg.accumulation;
    let idx = state.next_indices(set.len(), total);
    let weight = 1.0 / total as f64;
    let mut grads = Grads::zeros_like(&state.store);
    let mut parts = Vec::with_capacity(total);
    for chunk in idx.chunks(cfg.batch_size) {
        for &i in chunk {
            parts.push(example_grads(model, &state.store, set, &set.examples[i], cfg, lambda, weight, &mut grads)?);
        }
    }
    let b = LossBreakdown::mean(&parts);
    if !b.total.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite loss or gradient at step {}", state.step)));
    }
    apply_trainable_mask(&mut grads, &state.store, &cfg.trainable);
    let lr = cosine_lr(cfg.learning_rate, state.step, cfg.max_steps);
    adamw_update(state, &grads, cfg, lr);
    state.step += 1;
    state.history.push(b);
    Ok(b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    stage: u8,
    step: usize,
    max_steps: usize,
    completed: bool,
    seed: u64,
    epoch: u64,
    cursor: usize,
    config: StageConfig,
    history: Vec<LossBreakdown>,
}

/// Read-only summary of a checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub stage: u8,
    pub step: usize,
    pub completed: bool,
}

pub fn write_metrics(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for (i, b) in history.iter().enumerate() {
        s.push_str(&b.csv_row(i));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes model, optimizer state, metadata and metrics into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, state: &TrainState, cfg: &StageConfig) -> Result<()> {
    save_model(dir, model, &state.store)?;
    let mut tensors = Vec::new();
    for (id, (name, _)) in state.store.ids().zip(state.store.named_values()) {
        tensors.push(NamedTensor::from_matrix(&format!("m.{name}"), state.m.get(id), DType::F64));
        tensors.push(NamedTensor::from_matrix(&format!("v.{name}"), state.v.get(id), DType::F64));
    }
    checkpoint::save(&dir.join("optim.ckpt"), &tensors)?;
    let meta = StateMeta {
        stage: cfg.stage,
        step: state.step,
        max_steps: cfg.max_steps,
        completed: state.step >= cfg.max_steps,
        seed: state.seed,
        epoch: state.epoch,
        cursor: state.cursor,
        config: cfg.clone(),
        history: state.history.clone(),
    };
    let p = dir.join("train_state.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    write_metrics(&dir.join("metrics.csv"), &state.history)
}

fn read_meta(dir: &Path) -> Result<StateMeta> {
    let p = dir.join("train_state.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&p, "json", e.to_string()))
}

pub fn checkpoint_info(dir: &Path) -> Result<CheckpointInfo> {
    let m = read_meta(dir)?;
    Ok(CheckpointInfo {
        stage: m.stage,
        step: m.step,
        completed: m.completed,
    })
}

/// Restores model, full training state and the stage config of a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainState, StageConfig)> {
    let (model, store) = load_model(dir)?;
    let meta = read_meta(dir)?;
    let mut state = TrainState::new(store, meta.seed);
    let opt = checkpoint::to_map(&checkpoint::load(&dir.join("optim.ckpt"))?)?;
    let names: Vec<(crate::params::ParamId, String)> = state.store.ids().map(|id| (id, state.store.name(id).to_string())).collect();
    for (id, name) in names {
        let get = |k: String| {
            opt.get(&k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("optimizer state lacks {k}")))
        };
        *state.m.get_mut(id) = get(format!("m.{name}"))?;
        *state.v.get_mut(id) = get(format!("v.{name}"))?;
    }
    state.step = meta.step;
    state.epoch = meta.epoch;
    state.cursor = meta.cursor;
    state.history = meta.history;
    Ok((model, state, meta.config))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Save every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop early after this step count (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Runs `train_step` until `max_steps`, writing checkpoints and metrics to
/// `out_dir`.
pub fn run_stage(
    model: &Model,
    state: &mut TrainState,
    cfg: &StageConfig,
    set: &TrainSet,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let end = opts.stop_after.unwrap_or(cfg.max_steps).min(cfg.max_steps);
    while state.step < end {
        train_step(model, state, set, cfg)?;
        if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every) && state.step < end {
            save_checkpoint(out_dir, model, state, cfg)?;
        }
    }
    save_checkpoint(out_dir, model, state, cfg)?;
    Ok(StageOutcome {
        checkpoint_dir: out_dir.to_path_buf(),
        metrics_path: out_dir.join("metrics.csv"),
    })
}

/// Checks that `init` holds a completed checkpoint of the previous stage.
pub fn check_stage_order(stage: u8, init: Option<&Path>, allow_skip: bool) -> Result<()> {
    if allow_skip || stage == 1 {
        return Ok(());
    }
    let Some(dir) = init else {
        return Err(Error::Config(format!(
            "stage {stage} starts from a completed stage {} checkpoint (use --allow-skip to override)",
            stage - 1
        )));
    };
    let info = checkpoint_info(dir)?;
    if info.stage != stage - 1 || !info.completed {
        return Err(Error::Config(format!(
            "stage {stage} needs a completed stage {} checkpoint, found stage {} at step {}{}",
            stage - 1,
            info.stage,
            info.step,
            if info.completed { "" } else { " (incomplete)" }
        )));
    }
    Ok(())
}

/// Mean loss over all examples at fixed λ, without touching gradients.
pub fn evaluate_loss(model: &Model, store: &ParamStore, set: &TrainSet, cfg: &StageConfig, lambda: f64) -> Result<f64> {
    let mut g = Grads::zeros_like(store);
    let mut total = 0.0;
    for ex in &set.examples {
        total += example_grads(model, store, set, ex, cfg, lambda, 0.0, &mut g)?.total;
    }
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Every parameter outside the trainable set had an exactly zero gradient.
    pub frozen_exact_zero: bool,
}

/// Central differences with step `h` on `n` random trainable entries versus
/// the analytic gradient of the mean loss over `set` at fixed `lambda`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-7)`.
pub fn grad_check(
    model: &Model,
    store: &ParamStore,
    set: &TrainSet,
    cfg: &StageConfig,
    lambda: f64,
    n: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let weight = 1.0 / set.len() as f64;
    let mut grads = Grads::zeros_like(store);
    for ex in &set.examples {
        example_grads(model, store, set, ex, cfg, lambda, weight, &mut grads)?;
    }
    let frozen_exact_zero = store
        .ids()
        .filter(|&id| !cfg.trainable.contains(&store.group(id)))
        .all(|id| grads.get(id).data.iter().all(|&v| v == 0.0));
    let entries: Vec<(crate::params::ParamId, usize)> = store
        .ids()
        .filter(|&id| cfg.trainable.contains(&store.group(id)))
        .flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k)))
        .collect();
    if entries.is_empty() {
        return Err(Error::Config("no trainable parameters to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (id, k) = entries[rng.gen_range(0..entries.len())];
        let orig = work.value(id).data[k];
        work.value_mut(id).data[k] = orig + h;
        let fp = evaluate_loss(model, &work, set, cfg, lambda)?;
        work.value_mut(id).data[k] = orig - h;
        let fm = evaluate_loss(model, &work, set, cfg, lambda)?;
        work.value_mut(id).data[k] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = grads.get(id).data[k];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: n,
        frozen_exact_zero,
    })
}

/// Fraction of triplets whose positive outscores the negative, and the mean
/// log-odds-ratio over them.
pub fn preference_accuracy(model: &Model, store: &ParamStore, set: &TrainSet) -> Result<(f64, f64)> {
    let mut hits = 0usize;
    let mut lor = 0.0;
    let mut n = 0usize;
    for ex in &set.examples {
        let Some(neg) = &ex.negative else { continue };
        let scene = &set.scenes[ex.scene];
        let p = model.score(store, scene, &ex.positive)?;
        let q = model.score(store, scene, neg)?;
        if p > q {
            hits += 1;
        }
        lor += crate::objective::diagnostics(p.min(-1e-12), q.min(-1e-12))?.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no triplets to score".into()));
    }
    Ok((hits as f64 / n as f64, lor / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language_model::Vocab;
    use crate::pointcloud::{ObjectCloud, Point, Scene};

    fn scenes() -> SceneMap {
        let mut m = SceneMap::new();
        for (sid, colors) in [("a", [0.9, 0.1, 0.1]), ("b", [0.1, 0.1, 0.9])] {
            let objs = (0..3)
                .map(|i| {
                    let pts = (0..6)
                        .map(|k| Point::with_color(i as f64 + 0.1 * k as f64, 0.3 * k as f64, 0.05 * i as f64, colors))
                        .collect();
                    ObjectCloud::new(i, "box", pts).unwrap()
                })
                .collect();
            m.insert(sid.to_string(), Scene::new(sid, objs).unwrap());
        }
        m
    }

    fn samples() -> Vec<TrainSample> {
        let mk = |id: &str, scene: &str, pos: &str, neg: &str| TrainSample {
            sample_id: id.into(),
            scene_id: scene.into(),
            object_id: None,
            instruction: "what color is it ?".into(),
            positive: pos.into(),
            negative: Some(neg.into()),
        };
        vec![mk("0", "a", "red box", "blue box"), mk("1", "b", "blue box", "red box")]
    }

    fn setup(seed: u64) -> (Model, ParamStore, TrainSet) {
        let vocab = Vocab::build(["what color is it ? red blue box"], 100);
        let (model, store) = Model::new(ModelConfig::tiny(), vocab, seed).unwrap();
        let set = TrainSet::build(&model, &store, &scenes(), &samples(), "").unwrap();
        (model, store, set)
    }

    fn cfg3() -> StageConfig {
        StageConfig {
            learning_rate: 1e-3,
            max_steps: 8,
            batch_size: 2,
            accumulation: 1,
            ..default_stage_config(3).unwrap()
        }
    }

    #[test]
    fn default_configs() {
        let s1 = default_stage_config(1).unwrap();
        assert_eq!(s1.learning_rate, 2e-3);
        assert_eq!(
            s1.trainable,
            [Group::SpatialTransformer, Group::Connector, Group::SpecialEmbeddings].into()
        );
        assert_eq!(default_stage_config(2).unwrap().learning_rate, 1e-4);
        let s3 = default_stage_config(3).unwrap();
        assert_eq!(s3.learning_rate, 5e-6);
        assert!(s3.trainable.contains(&Group::Lm));
        assert!(!s3.trainable.contains(&Group::PointEncoder));
        assert_eq!(s3.lambda_max, 0.3);
        for s in 1..=3 {
            let c = default_stage_config(s).unwrap();
            assert_eq!((c.weight_decay, c.betas, c.accumulation), (5e-2, [0.9, 0.999], 2));
            c.validate().unwrap();
        }
        assert!(default_stage_config(4).is_err());
        let mut bad = default_stage_config(1).unwrap();
        bad.trainable.insert(Group::Lm);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn config_file_overrides_defaults() {
        let text = "stage = 3\nlearning_rate = 1e-3\nloss_mode = \"nll_plus_pr\"\ntrainable = [\"connector\"]\n\n[model.lm]\nn_layers = 1\n";
        let c = parse_config(text, 1, Path::new("c.toml")).unwrap();
        assert_eq!(c.stage.stage, 3);
        assert_eq!(c.stage.learning_rate, 1e-3);
        assert_eq!(c.stage.loss_mode, LossKind::Pr);
        assert_eq!(c.stage.weight_decay, 5e-2);
        assert_eq!(c.model.unwrap().lm.n_layers, 1);
        assert!(parse_config("bogus = 1\n", 1, Path::new("c.toml")).is_err());
        assert!(parse_config("loss_mode = \"nll_plus_or\"\n", 1, Path::new("c.toml")).is_err());
    }

    #[test]
    fn first_step_total_is_nll() {
        let (model, store, set) = setup(1);
        let mut st = TrainState::new(store, 5);
        let b = train_step(&model, &mut st, &set, &cfg3()).unwrap();
        assert_eq!(b.lambda, 0.0);
        assert_eq!(b.total, b.nll);
        let b2 = train_step(&model, &mut st, &set, &cfg3()).unwrap();
        assert!((b2.lambda - 0.3 / 8.0).abs() < 1e-15);
        assert!((b2.total - (b2.nll + b2.lambda * b2.or_loss)).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let (model, store, set) = setup(2);
        let before = store.clone();
        let cfg = StageConfig {
            stage: 1,
            loss_mode: LossKind::Sft,
            lambda_max: 0.0,
            ..cfg3()
        };
        let mut st = TrainState::new(store, 1);
        for _ in 0..3 {
            train_step(&model, &mut st, &set, &cfg).unwrap();
        }
        let mut changed = false;
        for id in before.ids() {
            let same = before.value(id).data.iter().zip(&st.store.value(id).data).all(|(a, b)| a.to_bits() == b.to_bits());
            if cfg.trainable.contains(&before.group(id)) {
                changed |= !same;
            } else {
                assert!(same, "{} changed", before.name(id));
            }
        }
        assert!(changed);
        let empty = StageConfig {
            trainable: BTreeSet::new(),
            ..cfg
        };
        let snap = st.store.clone();
        train_step(&model, &mut st, &set, &empty).unwrap();
        for id in snap.ids() {
            assert_eq!(snap.value(id), st.store.value(id));
        }
    }

    #[test]
    fn zero_lambda_matches_sft_bitwise() {
        let (model, store, set) = setup(3);
        let or0 = StageConfig {
            lambda_max: 0.0,
            ..cfg3()
        };
        let sft = StageConfig {
            loss_mode: LossKind::Sft,
            ..cfg3()
        };
        let mut a = TrainState::new(store.clone(), 9);
        let mut b = TrainState::new(store, 9);
        for _ in 0..6 {
            train_step(&model, &mut a, &set, &or0).unwrap();
            train_step(&model, &mut b, &set, &sft).unwrap();
        }
        for id in a.store.ids() {
            let x: Vec<u64> = a.store.value(id).data.iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.store.value(id).data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn pairs_rejected_under_contrastive_loss() {
        let (model, store, mut set) = setup(4);
        for e in &mut set.examples {
            e.negative = None;
        }
        let mut st = TrainState::new(store, 0);
        assert!(matches!(train_step(&model, &mut st, &set, &cfg3()), Err(Error::Data(_))));
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let (model, store, set) = setup(5);
        let big = StageConfig {
            batch_size: 4,
            accumulation: 1,
            ..cfg3()
        };
        let acc = StageConfig {
            batch_size: 2,
            accumulation: 2,
            ..cfg3()
        };
        let mut a = TrainState::new(store.clone(), 4);
        let mut b = TrainState::new(store, 4);
        for _ in 0..3 {
            train_step(&model, &mut a, &set, &big).unwrap();
            train_step(&model, &mut b, &set, &acc).unwrap();
        }
        for id in a.store.ids() {
            for (x, y) in a.store.value(id).data.iter().zip(&b.store.value(id).data) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (model, store, set) = setup(6);
        let cfg = cfg3();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut full = TrainState::new(store.clone(), 3);
        run_stage(&model, &mut full, &cfg, &set, d1.path(), &RunOptions::default()).unwrap();

        let mut part = TrainState::new(store, 3);
        let opts = RunOptions {
            checkpoint_every: 0,
            stop_after: Some(3),
        };
        run_stage(&model, &mut part, &cfg, &set, d2.path(), &opts).unwrap();
        assert!(!checkpoint_info(d2.path()).unwrap().completed);
        let (m2, mut resumed, cfg2) = load_checkpoint(d2.path()).unwrap();
        assert_eq!(cfg2, cfg);
        run_stage(&m2, &mut resumed, &cfg2, &set, d2.path(), &RunOptions::default()).unwrap();
        for id in full.store.ids() {
            assert_eq!(full.store.value(id), resumed.store.value(id));
        }
        let a = fs::read(d1.path().join("metrics.csv")).unwrap();
        let b = fs::read(d2.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), cfg.max_steps + 1);
        assert_eq!(fs::read(d1.path().join("model.ckpt")).unwrap(), fs::read(d2.path().join("model.ckpt")).unwrap());
        assert!(checkpoint_info(d1.path()).unwrap().completed);
    }

    #[test]
    fn stage_order_enforced() {
        let (model, store, set) = setup(7);
        assert!(check_stage_order(2, None, false).is_err());
        assert!(check_stage_order(2, None, true).is_ok());
        let d = tempfile::tempdir().unwrap();
        let cfg = StageConfig {
            max_steps: 1,
            ..default_stage_config(1).unwrap()
        };
        let mut st = TrainState::new(store, 0);
        run_stage(&model, &mut st, &cfg, &set, d.path(), &RunOptions::default()).unwrap();
        check_stage_order(2, Some(d.path()), false).unwrap();
        assert!(check_stage_order(3, Some(d.path()), false).is_err());
    }

    #[test]
    fn gradient_check_full_objective() {
        let (model, store, set) = setup(8);
        let r = grad_check(&model, &store, &set, &cfg3(), 0.3, 60, 1e-4, 1).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        assert!(r.frozen_exact_zero);
        let sft = StageConfig {
            loss_mode: LossKind::Sft,
            ..cfg3()
        };
        let a = grad_check(&model, &store, &set, &cfg3(), 0.0, 20, 1e-4, 2).unwrap();
        let b = grad_check(&model, &store, &set, &sft, 0.0, 20, 1e-4, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let (model, store, set) = setup(9);
        let mut a = TrainState::new(store.clone(), 1);
        let mut b = TrainState::new(store, 1);
        for _ in 0..4 {
            let x = train_step(&model, &mut a, &set, &cfg3()).unwrap();
            let y = train_step(&model, &mut b, &set, &cfg3()).unwrap();
            assert_eq!(x, y);
        }
    }
}

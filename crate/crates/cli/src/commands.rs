use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spatial_contrast::dataset_forge::{
    self as forge, Annotation, CompletionClient, MockClient, PairSample, Task, TripletSample, CAPTION_FORMAT,
    EXISTENCE_FORMAT, QA_FORMAT, SWAP_GROUPS,
};
use spatial_contrast::evaluation::{self as eval, EvalRecord, PopeQuestion, PopeSetting, TfCosine};
use spatial_contrast::language_model::{Vocab, DEFAULT_VOCAB_CAP};
use spatial_contrast::model::{load_model, Model, ModelConfig, SceneMap};
use spatial_contrast::objective::LossKind;
use spatial_contrast::pointcloud::{self, Scene};
use spatial_contrast::synthetic::{self, SyntheticConfig};
use spatial_contrast::training::{self, RunOptions, StageConfig, TrainSample, TrainSet, TrainState};
use spatial_contrast::Error;

use crate::http::HttpClient;
use crate::manifest::RunManifest;
use crate::{EvaluateArgs, ModelSize, NegativesArgs, PrepareArgs, SynthArgs, TrainArgs, UsageError};

fn require_dir(flag: &str, p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!(UsageError(format!("{flag}: directory {} does not exist", p.display())));
    }
    Ok(())
}

fn require_file(flag: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!(UsageError(format!("{flag}: file {} does not exist", p.display())));
    }
    Ok(())
}

fn required<'a>(flag: &str, p: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
    match p {
        Some(p) => Ok(p),
        None => bail!(UsageError(format!("{flag} is required"))),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn scene_map(scenes: Vec<Scene>) -> SceneMap {
    scenes.into_iter().map(|s| (s.scene_id.clone(), s)).collect()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    mkdir(&a.out)?;
    let cfg = SyntheticConfig {
        n_scenes: a.scenes,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        points_per_object: a.points_per_object,
    };
    let (scenes, items) = synthetic::synthetic_scenes(&cfg, a.seed)?;
    let dir = a.out.join("scenes");
    pointcloud::save_scene_dir(&dir, &scenes)?;
    let anns = synthetic::synthetic_annotations(&scenes, &items, a.qa_per_scene, a.seed);
    let ann_path = a.out.join("annotations.jsonl");
    forge::write_jsonl(&ann_path, &anns)?;
    let mut m = RunManifest::start("synth", a.seed);
    m.output("scenes", &dir).output("annotations", &ann_path);
    m.write(&a.out)?;
    eprintln!("{} scenes, {} annotations -> {}", scenes.len(), anns.len(), a.out.display());
    Ok(())
}

/// Every word the model may need to read or write: fixed prompts, the
/// instruction candidates, attribute lexicon, labels and the data itself.
pub fn vocabulary(scenes: &[Scene], data: &[&forge::PreparedData]) -> Vocab {
    let mut texts: Vec<String> = vec![
        forge::system_prompt().to_string(),
        QA_FORMAT.into(),
        CAPTION_FORMAT.into(),
        EXISTENCE_FORMAT.into(),
        "yes no".into(),
        PopeQuestion {
            scene_id: String::new(),
            label: String::new(),
            gt: true,
        }
        .text(),
    ];
    for task in [Task::ObjectCaption, Task::SceneCaption, Task::ObjectInSceneCaption, Task::Existence] {
        for c in forge::instruction_candidates(task) {
            texts.push(c.replace("{target}", " ").replace("{label}", " "));
        }
    }
    texts.extend(SWAP_GROUPS.iter().flat_map(|g| g.iter().map(|w| w.to_string())));
    texts.extend(synthetic::lexicon());
    for s in scenes {
        texts.extend(s.all_labels().keys().cloned());
    }
    for d in data {
        for p in d.stage1.iter().chain(&d.stage2).chain(&d.stage3) {
            texts.push(p.instruction.clone());
            texts.push(p.response.clone());
            texts.extend(p.references.iter().cloned());
        }
    }
    Vocab::build(texts.iter().map(String::as_str), DEFAULT_VOCAB_CAP)
}

pub fn prepare_data(a: PrepareArgs) -> Result<()> {
    let scenes_dir = required("--scenes", &a.scenes)?;
    require_dir("--scenes", scenes_dir)?;
    if a.annotations.is_empty() {
        bail!(UsageError("--annotations is required".into()));
    }
    for p in &a.annotations {
        require_file("--annotations", p)?;
    }
    let k = if a.low_res { 1024 } else { a.points_per_object };
    if k == 0 {
        bail!(UsageError("--points-per-object must be positive".into()));
    }
    let raw = pointcloud::load_scene_dir(scenes_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut scenes = Vec::with_capacity(raw.len());
    for s in &raw {
        let aligned = pointcloud::align_to_centroid(s);
        scenes.push(aligned.map_objects(|o| {
            let start = rng.gen_range(0..o.len());
            pointcloud::farthest_point_sample(o, k, start)
        })?);
    }
    let mut anns: Vec<Annotation> = Vec::new();
    for p in &a.annotations {
        anns.extend(forge::read_jsonl::<Annotation>(p)?);
    }
    let labels = forge::scene_labels(&scenes);
    let data = forge::prepare_samples(&anns, &labels, a.seed)?;

    mkdir(&a.out)?;
    let out_scenes = a.out.join("scenes");
    pointcloud::save_scene_dir(&out_scenes, &scenes)?;
    let mut m = RunManifest::start("prepare-data", a.seed);
    m.input("scenes", scenes_dir);
    for (i, p) in a.annotations.iter().enumerate() {
        m.input(&format!("annotations{i}"), p);
    }
    for (name, part) in [("stage1", &data.stage1), ("stage2", &data.stage2), ("stage3", &data.stage3)] {
        let p = a.out.join(format!("{name}_pairs.jsonl"));
        forge::write_jsonl(&p, part)?;
        m.output(name, &p);
    }
    let vocab = vocabulary(&scenes, &[&data]);
    let vp = a.out.join("vocab.txt");
    vocab.save(&vp)?;
    m.output("scenes", &out_scenes).output("vocab", &vp);
    m.write(&a.out)?;
    eprintln!(
        "{} scenes at {k} points/object; pairs: stage1 {}, stage2 {}, stage3 {}; vocab {}",
        scenes.len(),
        data.stage1.len(),
        data.stage2.len(),
        data.stage3.len(),
        vocab.len()
    );
    Ok(())
}

pub fn gen_negatives(a: NegativesArgs) -> Result<()> {
    require_dir("--scenes", &a.scenes)?;
    if let Some(p) = &a.pairs {
        require_file("--pairs", p)?;
    } else if a.existence.is_none() {
        bail!(UsageError("--pairs is required unless --existence is given".into()));
    }
    if let Some(d) = &a.images {
        require_dir("--images", d)?;
    }
    let scenes = pointcloud::load_scene_dir(&a.scenes)?;
    let labels = forge::scene_labels(&scenes);
    let mut m = RunManifest::start("gen-negatives", a.seed);
    m.input("scenes", &a.scenes);

    let mut out = forge::ForgeOutput::default();
    if let Some(p) = &a.pairs {
        m.input("pairs", p);
        let pairs: Vec<PairSample> = forge::read_jsonl(p)?;
        out = if a.easy {
            forge::forge_easy_negatives(&pairs, a.seed)?
        } else {
            let client: Box<dyn CompletionClient> = match &a.mock {
                Some(None) => Box::new(MockClient::new()),
                Some(Some(f)) => {
                    require_file("--mock", f)?;
                    m.input("mock_fixture", f);
                    Box::new(MockClient::from_file(f)?)
                }
                None => Box::new(HttpClient::from_env()?),
            };
            forge::forge_hard_negatives(&pairs, &labels, client.as_ref(), a.images.as_deref())?
        };
    }
    if let Some(n) = a.existence {
        let ex = forge::existence_questions(&scenes, n, a.seed)?;
        out.triplets.extend(ex.samples);
        out.warnings.extend(ex.warnings);
    }
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    mkdir(&a.out)?;
    let tp = a.out.join("triplets.jsonl");
    let rp = a.out.join("removals.csv");
    forge::write_jsonl(&tp, &out.triplets)?;
    forge::write_removals(&rp, &out.removed)?;
    m.output("triplets", &tp).output("removals", &rp);
    m.write(&a.out)?;
    eprintln!(
        "{} triplets, {} removed ({:.1}%)",
        out.triplets.len(),
        out.removed.len(),
        100.0 * out.removal_rate()
    );
    Ok(())
}

/// Reads pairs or triplets, deciding by the first record.
pub fn load_samples(path: &Path) -> Result<Vec<TrainSample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let is_triplet = serde_json::from_str::<serde_json::Value>(first)
        .map(|v| v.get("negative").is_some())
        .unwrap_or(false);
    Ok(if is_triplet {
        forge::read_jsonl::<TripletSample>(path)?.iter().map(TrainSample::from).collect()
    } else {
        forge::read_jsonl::<PairSample>(path)?.iter().map(TrainSample::from).collect()
    })
}

fn stage_config(a: &TrainArgs) -> Result<(StageConfig, Option<ModelConfig>)> {
    let (mut cfg, model) = match &a.config {
        Some(p) => {
            require_file("--config", p)?;
            let text = fs::read_to_string(p)?;
            let f = training::parse_config(&text, a.stage, p)?;
            (f.stage, f.model)
        }
        None => (training::default_stage_config(a.stage)?, None),
    };
    if let Some(l) = a.loss {
        cfg.loss_mode = l.into();
    }
    if let Some(l) = a.lambda_max {
        cfg.lambda_max = l;
    }
    if cfg.loss_mode == LossKind::Sft {
        cfg.lambda_max = 0.0;
    }
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok((cfg, model))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = required("--data", &a.data)?;
    require_file("--data", data)?;
    let scenes_dir = required("--scenes", &a.scenes)?;
    require_dir("--scenes", scenes_dir)?;
    if let Some(p) = &a.init {
        require_dir("--init", p)?;
    }
    if a.resume && !a.out.join("train_state.json").is_file() {
        bail!(UsageError(format!("--resume: no checkpoint in {}", a.out.display())));
    }

    let (model, mut state, cfg) = if a.resume {
        let (model, state, mut cfg) = training::load_checkpoint(&a.out)?;
        if let Some(s) = a.steps {
            cfg.max_steps = s;
        }
        (model, state, cfg)
    } else {
        let (cfg, model_cfg) = stage_config(&a)?;
        training::check_stage_order(cfg.stage, a.init.as_deref(), a.allow_skip)?;
        let (model, store) = match &a.init {
            Some(dir) => load_model(dir)?,
            None => {
                let vp = match &a.vocab {
                    Some(v) => v.clone(),
                    None => data.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
                };
                require_file("--vocab", &vp)?;
                let mc = model_cfg.unwrap_or_else(|| match a.model_size {
                    ModelSize::Tiny => ModelConfig::tiny(),
                    ModelSize::Base => ModelConfig::default(),
                });
                Model::new(mc, Vocab::load(&vp)?, a.seed)?
            }
        };
        (model, TrainState::new(store, a.seed), cfg)
    };

    let samples = load_samples(data)?;
    let scenes = scene_map(pointcloud::load_scene_dir(scenes_dir)?);
    let set = TrainSet::build(&model, &state.store, &scenes, &samples, forge::system_prompt())?;
    if cfg.needs_negatives() && !set.has_negatives() {
        return Err(Error::Data(format!(
            "{} needs triplets with negatives for the contrastive loss (use --loss sft for pairs)",
            data.display()
        ))
        .into());
    }
    mkdir(&a.out)?;
    let opts = RunOptions {
        checkpoint_every: a.checkpoint_every,
        stop_after: None,
    };
    let mut m = RunManifest::start("train", a.seed);
    m.config = a.config.clone();
    m.input("data", data).input("scenes", scenes_dir);
    if let Some(p) = &a.init {
        m.input("init", p);
    }
    match training::run_stage(&model, &mut state, &cfg, &set, &a.out, &opts) {
        Ok(o) => {
            m.output("checkpoint", &o.checkpoint_dir).output("metrics", &o.metrics_path);
            m.write(&a.out)?;
            if let Some(last) = state.history.last() {
                eprintln!(
                    "stage {} done at step {}: nll {:.4}, total {:.4}",
                    cfg.stage, state.step, last.nll, last.total
                );
            }
            Ok(())
        }
        Err(e @ (Error::Numeric(_) | Error::DegenerateProbability(_))) => {
            let dump = a.out.join("numeric_dump");
            mkdir(&dump)?;
            training::save_checkpoint(&dump, &model, &state, &cfg)?;
            m.output("numeric_dump", &dump);
            m.write(&a.out)?;
            eprintln!("state at step {} dumped to {}", state.step, dump.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct Prediction<'a> {
    sample_id: &'a str,
    scene_id: &'a str,
    instruction: &'a str,
    prediction: String,
    references: Vec<String>,
}

#[derive(Serialize)]
struct FullReport {
    #[serde(flatten)]
    text: eval::EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    preference_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_log_odds_ratio: Option<f64>,
}

fn references_of(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.contains("\"negative\"") {
        return Ok(BTreeMap::new());
    }
    Ok(forge::read_jsonl::<PairSample>(path)?
        .into_iter()
        .map(|p| (p.sample_id, p.references))
        .collect())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_dir("--model", &a.model)?;
    require_dir("--scenes", &a.scenes)?;
    if a.data.is_none() && a.pope.is_none() {
        bail!(UsageError("--data is required unless --pope is given".into()));
    }
    let (model, store) = load_model(&a.model)?;
    let scenes = scene_map(pointcloud::load_scene_dir(&a.scenes)?);
    let system = forge::system_prompt();
    mkdir(&a.out)?;
    let mut m = RunManifest::start("evaluate", a.seed);
    m.input("model", &a.model).input("scenes", &a.scenes);

    if let Some(data) = &a.data {
        require_file("--data", data)?;
        m.input("data", data);
        let samples = load_samples(data)?;
        if samples.is_empty() {
            return Err(Error::Data(format!("{}: evaluation set is empty", data.display())).into());
        }
        let extra = references_of(data)?;
        let set = TrainSet::build(&model, &store, &scenes, &samples, system)?;
        let mut records = Vec::with_capacity(samples.len());
        let mut preds = Vec::with_capacity(samples.len());
        for (s, ex) in samples.iter().zip(&set.examples) {
            let pred = model.answer(&store, &set.scenes[ex.scene], system, &s.instruction, a.max_new)?;
            let mut refs = vec![s.positive.clone()];
            refs.extend(extra.get(&s.sample_id).into_iter().flatten().cloned());
            preds.push(Prediction {
                sample_id: &s.sample_id,
                scene_id: &s.scene_id,
                instruction: &s.instruction,
                prediction: pred.clone(),
                references: refs.clone(),
            });
            records.push(EvalRecord {
                sample_id: s.sample_id.clone(),
                prediction: pred,
                references: refs,
            });
        }
        let (text, per_sample) = eval::evaluate_records(&records, &TfCosine)?;
        let (pa, lor) = if set.has_negatives() {
            let (acc, lor) = training::preference_accuracy(&model, &store, &set)?;
            (Some(acc), Some(lor))
        } else {
            (None, None)
        };
        let pp = a.out.join("predictions.jsonl");
        forge::write_jsonl(&pp, &preds)?;
        let rp = a.out.join("report.json");
        eval::write_json(
            &rp,
            &FullReport {
                text: text.clone(),
                preference_accuracy: pa,
                mean_log_odds_ratio: lor,
            },
        )?;
        let sp = a.out.join("samples.csv");
        eval::write_sample_csv(&sp, &per_sample)?;
        m.output("predictions", &pp).output("report", &rp).output("samples", &sp);
        eprintln!(
            "n {} bleu4 {:.4} rouge_l {:.4} cider {:.4} meteor {:.4} em1 {:.4}{}",
            text.n,
            text.bleu4,
            text.rouge_l,
            text.cider,
            text.meteor_lite,
            text.em1,
            pa.map(|p| format!(" pref_acc {p:.4}")).unwrap_or_default()
        );
    }

    if let Some(kind) = a.pope {
        let setting = PopeSetting::new(kind, a.pope_k).map_err(|e| UsageError(e.to_string()))?;
        let present: BTreeMap<String, BTreeSet<String>> = scenes
            .iter()
            .map(|(id, s)| (id.clone(), s.all_labels().keys().cloned().collect()))
            .collect();
        let qs = eval::pope_sample_questions(&present, setting, a.seed);
        if qs.is_empty() {
            return Err(Error::Data("no POPE questions could be sampled from these scenes".into()).into());
        }
        let qp = a.out.join("pope_questions.csv");
        eval::write_pope_questions(&qp, &qs)?;
        let mut inputs = BTreeMap::new();
        let mut answers = Vec::with_capacity(qs.len());
        let mut lines = String::from("scene_id,label,gt,answer\n");
        for q in &qs {
            if !inputs.contains_key(&q.scene_id) {
                inputs.insert(q.scene_id.clone(), model.scene_input(&store, &scenes[&q.scene_id], None)?);
            }
            let instr = format!("{} {EXISTENCE_FORMAT}", q.text());
            let ans = model.answer(&store, &inputs[&q.scene_id], system, &instr, 4)?;
            lines.push_str(&format!(
                "{},{},{},{}\n",
                q.scene_id,
                q.label,
                if q.gt { "yes" } else { "no" },
                ans.replace([',', '\n'], " ")
            ));
            answers.push(ans);
        }
        let gts: Vec<bool> = qs.iter().map(|q| q.gt).collect();
        let report = eval::pope_eval_text(&answers, &gts)?;
        let ap = a.out.join("pope_answers.csv");
        fs::write(&ap, lines)?;
        let rp = a.out.join("pope_report.json");
        eval::write_json(&rp, &report)?;
        m.output("pope_questions", &qp).output("pope_answers", &ap).output("pope_report", &rp);
        eprintln!(
            "POPE {kind:?}: acc {:.4} f1 {:.4} yes {:.4}",
            report.accuracy, report.f1, report.yes_rate
        );
    }
    m.write(&a.out)?;
    Ok(())
}

//! Synthetic desk scenes: colored primitive shapes on a table top, with
//! templated captions and questions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_forge::{
    forge_easy_negatives, forge_hard_negatives, scene_labels, Annotation, MockClient, PairSample, Task, TripletSample,
    SWAP_GROUPS,
};
use crate::error::{Error, Result};
use crate::model::SceneMap;
use crate::pointcloud::{ObjectCloud, Point, Scene};

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("green", [0.1, 0.8, 0.2]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("brown", [0.55, 0.35, 0.15]),
    ("gray", [0.5, 0.5, 0.5]),
];

pub const SHAPES: [&str; 4] = ["box", "ball", "cylinder", "cone"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_object: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_scenes: 40,
            min_objects: 2,
            max_objects: 3,
            points_per_object: 256,
        }
    }
}

/// Surface sample of a unit-scale primitive centred at the origin.
fn surface_point<R: Rng>(rng: &mut R, shape: &str) -> [f64; 3] {
    match shape {
        "box" => {
            let mut p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let axis = rng.gen_range(0..3);
            p[axis] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            p
        }
        "ball" => loop {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0f64..1.0)];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if r > 1e-3 && r <= 1.0 {
                break [p[0] / r, p[1] / r, p[2] / r];
            }
        },
        "cylinder" => {
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            [0.6 * t.cos(), 0.6 * t.sin(), rng.gen_range(-1.0..1.0)]
        }
        _ => {
            let h: f64 = rng.gen_range(0.0..1.0);
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = 0.8 * (1.0 - h);
            [r * t.cos(), r * t.sin(), 2.0 * h - 1.0]
        }
    }
}

fn object_cloud<R: Rng>(rng: &mut R, id: u32, shape: &str, color: [f64; 3], center: [f64; 3], size: f64, n: usize) -> Result<ObjectCloud> {
    let pts = (0..n)
        .map(|_| {
            let p = surface_point(rng, shape);
            let c = color.map(|v| (v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
            Point::with_color(center[0] + size * p[0], center[1] + size * p[1], center[2] + size * p[2], c)
        })
        .collect();
    ObjectCloud::new(id, shape, pts)
}

/// Object description recovered from a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub object_id: u32,
    pub color: &'static str,
    pub shape: &'static str,
    pub x: f64,
}

/// Scenes with distinct shapes and distinct colors per scene, objects at
/// least 0.4 apart along x.
pub fn synthetic_scenes(cfg: &SyntheticConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Vec<Item>>)> {
    if cfg.min_objects == 0 || cfg.max_objects < cfg.min_objects || cfg.max_objects > SHAPES.len() {
        return Err(Error::Config(format!(
            "object count range {}..={} must lie in 1..={}",
            cfg.min_objects,
            cfg.max_objects,
            SHAPES.len()
        )));
    }
    if cfg.points_per_object == 0 {
        return Err(Error::Config("points_per_object must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut items = Vec::with_capacity(cfg.n_scenes);
    for s in 0..cfg.n_scenes {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut shapes = SHAPES.to_vec();
        shapes.shuffle(&mut rng);
        let mut colors: Vec<usize> = (0..COLORS.len()).collect();
        colors.shuffle(&mut rng);
        let mut slots: Vec<usize> = (0..5).collect();
        slots.shuffle(&mut rng);
        let mut objs = Vec::with_capacity(n);
        let mut its = Vec::with_capacity(n);
        for i in 0..n {
            let size = rng.gen_range(0.08..0.15);
            let x = -0.8 + 0.4 * slots[i] as f64 + rng.gen_range(-0.05..0.05);
            let center = [x, rng.gen_range(-0.4..0.4), size];
            let (cname, rgb) = COLORS[colors[i]];
            objs.push(object_cloud(&mut rng, i as u32, shapes[i], rgb, center, size, cfg.points_per_object)?);
            its.push(Item {
                object_id: i as u32,
                color: cname,
                shape: shapes[i],
                x,
            });
        }
        scenes.push(Scene::new(format!("syn{s:04}"), objs)?);
        items.push(its);
    }
    Ok((scenes, items))
}

/// Templated question/answer pairs about color, shape and left/right order,
/// each with a distractor answer: the attribute of another object in the
/// same scene, or the opposite side.
pub fn qa_with_distractors<R: Rng>(
    rng: &mut R,
    scene: &Scene,
    items: &[Item],
    n: usize,
    start_id: usize,
) -> Vec<(PairSample, String)> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let a = &items[rng.gen_range(0..items.len())];
        let other = |rng: &mut R| loop {
            let b = &items[rng.gen_range(0..items.len())];
            if b.object_id != a.object_id {
                break b;
            }
        };
        let kind = if items.len() > 1 { rng.gen_range(0..3) } else { rng.gen_range(0..2) };
        let (q, ans, neg) = match kind {
            0 => {
                let neg = if items.len() > 1 {
                    other(rng).color.to_string()
                } else {
                    COLORS[(COLORS.iter().position(|c| c.0 == a.color).unwrap_or(0) + 1) % COLORS.len()].0.to_string()
                };
                (format!("What color is the {}?", a.shape), a.color.to_string(), neg)
            }
            1 => {
                let neg = if items.len() > 1 {
                    other(rng).shape.to_string()
                } else {
                    SHAPES[(SHAPES.iter().position(|s| *s == a.shape).unwrap_or(0) + 1) % SHAPES.len()].to_string()
                };
                (format!("What shape is the {} object?", a.color), a.shape.to_string(), neg)
            }
            _ => {
                let b = other(rng);
                let (side, flip) = if a.x < b.x { ("left", "right") } else { ("right", "left") };
                (
                    format!("Is the {} {} left or right of the {} {}?", a.color, a.shape, b.color, b.shape),
                    side.to_string(),
                    flip.to_string(),
                )
            }
        };
        out.push((
            PairSample {
                sample_id: format!("qa{:06}", start_id + k),
                scene_id: scene.scene_id.clone(),
                task: Task::Qa,
                instruction: q,
                response: ans,
                object_id: None,
                references: vec![],
            },
            neg,
        ));
    }
    out
}

pub fn qa_pairs<R: Rng>(rng: &mut R, scene: &Scene, items: &[Item], n: usize, start_id: usize) -> Vec<PairSample> {
    qa_with_distractors(rng, scene, items, n, start_id)
        .into_iter()
        .map(|p| p.0)
        .collect()
}

fn describe(it: &Item) -> String {
    format!("{} {}", it.color, it.shape)
}

/// Raw annotations of every task for the data-preparation pipeline.
pub fn synthetic_annotations(scenes: &[Scene], items: &[Vec<Item>], qa_per_scene: usize, seed: u64) -> Vec<Annotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut next = 0usize;
    let mut push = |out: &mut Vec<Annotation>, a: Annotation| {
        out.push(Annotation {
            id: Some(format!("ann{next:06}")),
            ..a
        });
        next += 1;
    };
    for (scene, its) in scenes.iter().zip(items) {
        for it in its {
            push(
                &mut out,
                Annotation::new(&scene.scene_id, Task::ObjectCaption, &format!("a {}.", describe(it))).with_object(it.object_id),
            );
        }
        let mut sorted: Vec<&Item> = its.iter().collect();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x));
        let listing: Vec<String> = sorted.iter().map(|i| format!("a {}", describe(i))).collect();
        push(
            &mut out,
            Annotation::new(
                &scene.scene_id,
                Task::SceneCaption,
                &format!("from left to right the desk holds {}.", listing.join(", ")),
            ),
        );
        for w in sorted.windows(2) {
            push(
                &mut out,
                Annotation::new(
                    &scene.scene_id,
                    Task::ObjectInSceneCaption,
                    &format!("the {} is left of the {}.", describe(w[0]), describe(w[1])),
                )
                .with_object(w[0].object_id),
            );
        }
        for p in qa_pairs(&mut rng, scene, its, qa_per_scene, 0) {
            let mut a = Annotation::new(&scene.scene_id, Task::Qa, &p.response);
            a.instruction = Some(p.instruction);
            push(&mut out, a);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// In-scene attribute swaps.
    Hard,
    /// Answers of other questions.
    Easy,
    /// The forge pipeline with the deterministic mock client.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub qa_per_scene: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_object: usize,
    pub negatives: NegativeSource,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_train: 500,
            n_test: 200,
            qa_per_scene: 1,
            min_objects: 2,
            max_objects: 3,
            points_per_object: 64,
            negatives: NegativeSource::Hard,
            seed: 0,
        }
    }
}

/// Train/held-out QA triplets over disjoint synthetic scenes.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub scenes: SceneMap,
    pub train: Vec<TripletSample>,
    pub test: Vec<TripletSample>,
}

fn task_split(cfg: &TaskConfig, n: usize, seed: u64, source: NegativeSource, tag: &str) -> Result<(Vec<Scene>, Vec<TripletSample>)> {
    let per_scene = cfg.qa_per_scene.max(1);
    let scfg = SyntheticConfig {
        n_scenes: n.div_ceil(per_scene) + 1,
        min_objects: cfg.min_objects,
        max_objects: cfg.max_objects,
        points_per_object: cfg.points_per_object,
    };
    let (scenes, items) = synthetic_scenes(&scfg, seed)?;
    let scenes: Vec<Scene> = scenes
        .into_iter()
        .map(|s| Scene::new(format!("{tag}-{}", s.scene_id), s.objects().to_vec()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut qa = Vec::new();
    for (s, its) in scenes.iter().zip(&items) {
        let start = qa.len();
        qa.extend(qa_with_distractors(&mut rng, s, its, per_scene, start));
    }
    let pairs: Vec<PairSample> = qa.iter().map(|p| p.0.clone()).collect();
    let mut trip = match source {
        NegativeSource::Hard => qa
            .into_iter()
            .map(|(p, neg)| TripletSample {
                sample_id: p.sample_id,
                scene_id: p.scene_id,
                task: p.task,
                instruction: p.instruction,
                positive: p.response,
                negative: neg,
                object_id: p.object_id,
            })
            .collect(),
        NegativeSource::Easy => forge_easy_negatives(&pairs, seed)?.triplets,
        NegativeSource::Mock => forge_hard_negatives(&pairs, &scene_labels(&scenes), &MockClient::new(), None)?.triplets,
    };
    if trip.len() < n {
        return Err(Error::Data(format!("only {} of {n} synthetic triplets survived", trip.len())));
    }
    trip.truncate(n);
    for t in &mut trip {
        t.sample_id = format!("{tag}-{}", t.sample_id);
    }
    Ok((scenes, trip))
}

/// Builds `n_train` training and `n_test` held-out triplets. Held-out
/// triplets always use in-scene attribute swaps.
pub fn synthetic_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    let (train_scenes, train) = task_split(cfg, cfg.n_train, cfg.seed, cfg.negatives, "train")?;
    let (test_scenes, test) = task_split(cfg, cfg.n_test, cfg.seed.wrapping_add(0x7e57), NegativeSource::Hard, "test")?;
    let scenes = train_scenes
        .into_iter()
        .chain(test_scenes)
        .map(|s| (s.scene_id.clone(), s))
        .collect();
    Ok(SyntheticTask { scenes, train, test })
}

/// Every word the synthetic generator can emit, for vocabulary building.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = COLORS.iter().map(|c| c.0.to_string()).collect();
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    for g in SWAP_GROUPS {
        words.extend(g.iter().map(|w| w.to_string()));
    }
    words
}

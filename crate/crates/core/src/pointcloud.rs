//! Segmented scene point clouds: loading, coordinate alignment, farthest point
//! sampling and per-object normalization.
//!
//! Two on-disk formats are supported.
//!
//! * JSON lines: a header `{"scene_id": "..."}` followed by one record per
//!   object, `{"object_id": 0, "label": "chair", "points": [[x,y,z],...],
//!   "colors": [[r,g,b],...]}` (`colors` optional).
//! * Binary xyz: `<stem>.xyz` holds little-endian `f32` triples. A sidecar
//!   `<stem>.idx.csv` lists `object_id,offset,count[,label]` where offset and
//!   count are in points. An optional `<stem>.rgb` holds colors in the same
//!   layout as the coordinates. The scene id is the file stem.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub color: Option<[f64; 3]>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point { x, y, z, color: None }
    }

    pub fn with_color(x: f64, y: f64, z: f64, rgb: [f64; 3]) -> Self {
        Point {
            x,
            y,
            z,
            color: Some(rgb),
        }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dist2(&self, o: &Point) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err(format!("non-finite coordinate ({}, {}, {})", self.x, self.y, self.z));
        }
        if let Some(c) = self.color {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("color {c:?} outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// One segmented object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCloud {
    pub object_id: u32,
    pub label: String,
    points: Vec<Point>,
    centroid: [f64; 3],
}

fn mean_of(points: &[Point]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut m = [0.0; 3];
    for p in points {
        m[0] += p.x;
        m[1] += p.y;
        m[2] += p.z;
    }
    m.map(|v| v / n)
}

impl ObjectCloud {
    pub fn new(object_id: u32, label: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data(format!("object {object_id} has no points")));
        }
        for p in &points {
            p.validate()
                .map_err(|m| Error::Data(format!("object {object_id}: {m}")))?;
        }
        let centroid = mean_of(&points);
        Ok(ObjectCloud {
            object_id,
            label: label.into(),
            points,
            centroid,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        self.centroid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn with_points(&self, points: Vec<Point>) -> Self {
        let centroid = mean_of(&points);
        ObjectCloud {
            object_id: self.object_id,
            label: self.label.clone(),
            points,
            centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    objects: Vec<ObjectCloud>,
    all_labels: BTreeMap<String, usize>,
}

impl Scene {
    pub fn new(scene_id: impl Into<String>, objects: Vec<ObjectCloud>) -> Result<Self> {
        let scene_id = scene_id.into();
        if objects.is_empty() {
            return Err(Error::Data(format!("scene {scene_id}: scene has no objects")));
        }
        let mut seen = HashSet::new();
        for o in &objects {
            if !seen.insert(o.object_id) {
                return Err(Error::Data(format!(
                    "scene {scene_id}: duplicate object_id {}",
                    o.object_id
                )));
            }
        }
        let mut all_labels = BTreeMap::new();
        for o in &objects {
            *all_labels.entry(o.label.clone()).or_insert(0) += 1;
        }
        Ok(Scene {
            scene_id,
            objects,
            all_labels,
        })
    }

    pub fn objects(&self) -> &[ObjectCloud] {
        &self.objects
    }

    /// Label multiset: label → number of objects carrying it.
    pub fn all_labels(&self) -> &BTreeMap<String, usize> {
        &self.all_labels
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.all_labels.contains_key(label)
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.objects.iter().map(|o| o.centroid).collect()
    }

    pub fn point_count(&self) -> usize {
        self.objects.iter().map(|o| o.len()).sum()
    }

    /// Applies `f` to every object, keeping ids and labels.
    pub fn map_objects<F>(&self, f: F) -> Result<Scene>
    where
        F: FnMut(&ObjectCloud) -> Result<ObjectCloud>,
    {
        let objects = self.objects.iter().map(f).collect::<Result<Vec<_>>>()?;
        Scene::new(self.scene_id.clone(), objects)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFormat {
    JsonLines,
    BinaryXyz,
}

impl SceneFormat {
    /// `.xyz` files are binary; everything else is read as JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") => SceneFormat::BinaryXyz,
            _ => SceneFormat::JsonLines,
        }
    }
}

#[derive(Deserialize)]
struct HeaderRecord {
    scene_id: String,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    object_id: u32,
    label: String,
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colors: Option<Vec<[f64; 3]>>,
}

pub fn load_scene(path: &Path, format: SceneFormat) -> Result<Scene> {
    match format {
        SceneFormat::JsonLines => load_jsonl(path),
        SceneFormat::BinaryXyz => load_binary(path),
    }
}

fn build_points(xyz: &[[f64; 3]], colors: Option<&[[f64; 3]]>) -> Vec<Point> {
    xyz.iter()
        .enumerate()
        .map(|(i, p)| Point {
            x: p[0],
            y: p[1],
            z: p[2],
            color: colors.map(|c| c[i]),
        })
        .collect()
}

fn load_jsonl(path: &Path) -> Result<Scene> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scene_id = None;
    let mut objects: Vec<ObjectCloud> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {lineno}");
        if scene_id.is_none() {
            let h: HeaderRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, &loc, format!("expected scene header: {e}")))?;
            scene_id = Some(h.scene_id);
            continue;
        }
        let rec: ObjectRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, &loc, e.to_string()))?;
        if let Some(c) = &rec.colors {
            if c.len() != rec.points.len() {
                return Err(Error::parse(
                    path,
                    &loc,
                    format!("{} colors for {} points", c.len(), rec.points.len()),
                ));
            }
        }
        if objects.iter().any(|o| o.object_id == rec.object_id) {
            return Err(Error::Data(format!(
                "{}: {loc}: duplicate object_id {}",
                path.display(),
                rec.object_id
            )));
        }
        let pts = build_points(&rec.points, rec.colors.as_deref());
        let obj = ObjectCloud::new(rec.object_id, rec.label, pts)
            .map_err(|e| Error::parse(path, &loc, e.to_string()))?;
        objects.push(obj);
    }
    let scene_id = scene_id.ok_or_else(|| Error::parse(path, "line 1", "missing scene header"))?;
    Scene::new(scene_id, objects)
}

/// Sidecar paths for a binary-xyz file: (index csv, optional colors).
pub fn binary_sidecars(xyz: &Path) -> (PathBuf, PathBuf) {
    let stem = xyz.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let dir = xyz.parent().unwrap_or(Path::new(""));
    (dir.join(format!("{stem}.idx.csv")), dir.join(format!("{stem}.rgb")))
}

fn read_f32_triples(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::parse(
            path,
            format!("byte {}", bytes.len() - bytes.len() % 12),
            "file length is not a multiple of 12 (float32 triples)",
        ));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[k..k + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

fn load_binary(path: &Path) -> Result<Scene> {
    let xyz = read_f32_triples(path)?;
    let (idx_path, rgb_path) = binary_sidecars(path);
    let rgb = if rgb_path.exists() {
        let c = read_f32_triples(&rgb_path)?;
        if c.len() != xyz.len() {
            return Err(Error::parse(
                &rgb_path,
                "byte 0",
                format!("{} colors for {} points", c.len(), xyz.len()),
            ));
        }
        Some(c)
    } else {
        None
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&idx_path)
        .map_err(|e| Error::parse(&idx_path, "line 1", e.to_string()))?;
    let mut objects: Vec<ObjectCloud> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("line {}", i + 1);
        let rec = rec.map_err(|e| Error::parse(&idx_path, &loc, e.to_string()))?;
        if i == 0 && rec.get(0) == Some("object_id") {
            continue;
        }
        let field = |k: usize| -> Result<u64> {
            rec.get(k)
                .ok_or_else(|| Error::parse(&idx_path, &loc, format!("missing column {k}")))?
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::parse(&idx_path, &loc, e.to_string()))
        };
        let (id, off, count) = (field(0)? as u32, field(1)? as usize, field(2)? as usize);
        let label = rec.get(3).unwrap_or("object").trim().to_string();
        if off + count > xyz.len() {
            return Err(Error::parse(
                &idx_path,
                &loc,
                format!("range {off}+{count} exceeds {} points", xyz.len()),
            ));
        }
        if objects.iter().any(|o| o.object_id == id) {
            return Err(Error::Data(format!(
                "{}: {loc}: duplicate object_id {id}",
                idx_path.display()
            )));
        }
        let pts = build_points(
            &xyz[off..off + count],
            rgb.as_ref().map(|c| &c[off..off + count]),
        );
        objects.push(ObjectCloud::new(id, label, pts).map_err(|e| Error::parse(&idx_path, &loc, e.to_string()))?);
    }
    let scene_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    Scene::new(scene_id, objects)
}

/// Loads every `*.jsonl` / `*.xyz` scene file in `dir`, in file-name order.
/// Duplicate scene ids are an error.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "xyz")))
        .collect();
    paths.sort();
    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(paths.len());
    for p in paths {
        let s = load_scene(&p, SceneFormat::from_path(&p))?;
        if !seen.insert(s.scene_id.clone()) {
            return Err(Error::Data(format!("{}: duplicate scene id {}", p.display(), s.scene_id)));
        }
        scenes.push(s);
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!("{} holds no scene files", dir.display())));
    }
    Ok(scenes)
}

/// Writes each scene to `<dir>/<scene_id>.jsonl`.
pub fn save_scene_dir(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in scenes {
        save_scene(s, &dir.join(format!("{}.jsonl", s.scene_id)), SceneFormat::JsonLines)?;
    }
    Ok(())
}

pub fn save_scene(scene: &Scene, path: &Path, format: SceneFormat) -> Result<()> {
    match format {
        SceneFormat::JsonLines => save_jsonl(scene, path),
        SceneFormat::BinaryXyz => save_binary(scene, path),
    }
}

fn save_jsonl(scene: &Scene, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::json!({ "scene_id": scene.scene_id }).to_string());
    out.push('\n');
    for o in &scene.objects {
        let colors = if o.points.iter().all(|p| p.color.is_some()) {
            Some(o.points.iter().map(|p| p.color.unwrap()).collect())
        } else {
            None
        };
        let rec = ObjectRecord {
            object_id: o.object_id,
            label: o.label.clone(),
            points: o.points.iter().map(Point::xyz).collect(),
            colors,
        };
        out.push_str(&serde_json::to_string(&rec).expect("object record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn save_binary(scene: &Scene, path: &Path) -> Result<()> {
    let (idx_path, rgb_path) = binary_sidecars(path);
    let mut xyz = Vec::with_capacity(scene.point_count() * 12);
    let mut rgb = Vec::with_capacity(scene.point_count() * 12);
    let colored = scene.objects.iter().all(|o| o.points.iter().all(|p| p.color.is_some()));
    let mut idx = csv::Writer::from_path(&idx_path).map_err(|e| Error::Data(e.to_string()))?;
    idx.write_record(["object_id", "offset", "count", "label"])
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut offset = 0usize;
    for o in &scene.objects {
        for p in &o.points {
            for v in p.xyz() {
                xyz.extend_from_slice(&(v as f32).to_le_bytes());
            }
            if colored {
                for v in p.color.unwrap() {
                    rgb.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        idx.write_record([
            o.object_id.to_string(),
            offset.to_string(),
            o.len().to_string(),
            o.label.clone(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
        offset += o.len();
    }
    idx.flush().map_err(|e| Error::io(&idx_path, e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&xyz).map_err(|e| Error::io(path, e))?;
    if colored {
        fs::write(&rgb_path, rgb).map_err(|e| Error::io(&rgb_path, e))?;
    }
    Ok(())
}

/// Translates the scene so the mean of all its points is the origin.
pub fn align_to_centroid(scene: &Scene) -> Scene {
    let all: Vec<&Point> = scene.objects.iter().flat_map(|o| o.points.iter()).collect();
    let n = all.len() as f64;
    let mut m = [0.0; 3];
    for p in &all {
        m[0] += p.x;
        m[1] += p.y;
        m[2] += p.z;
    }
    let m = m.map(|v| v / n);
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            o.with_points(
                o.points
                    .iter()
                    .map(|p| Point {
                        x: p.x - m[0],
                        y: p.y - m[1],
                        z: p.z - m[2],
                        color: p.color,
                    })
                    .collect(),
            )
        })
        .collect();
    Scene {
        scene_id: scene.scene_id.clone(),
        objects,
        all_labels: scene.all_labels.clone(),
    }
}

/// Farthest-point-sampling order over `points`, `k` indices long.
///
/// Starts at `seed_index`; each further pick maximizes the minimum distance to
/// the picks so far, ties going to the lowest index. When `k` exceeds the
/// number of points, the full ordering is repeated round-robin.
pub fn farthest_point_indices(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Data("farthest point sampling on an empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::Data("farthest point sampling needs k >= 1".into()));
    }
    if seed_index >= points.len() {
        return Err(Error::Data(format!(
            "seed index {seed_index} out of range for {} points",
            points.len()
        )));
    }
    let n = points.len();
    let take = k.min(n);
    let mut order = Vec::with_capacity(k);
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = seed_index;
    for _ in 0..take {
        order.push(cur);
        selected[cur] = true;
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = p.dist2(&c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    for i in take..k {
        order.push(order[i % take]);
    }
    Ok(order)
}

pub fn farthest_point_sample(cloud: &ObjectCloud, k: usize, seed_index: usize) -> Result<ObjectCloud> {
    let idx = farthest_point_indices(&cloud.points, k, seed_index)?;
    Ok(cloud.with_points(idx.into_iter().map(|i| cloud.points[i]).collect()))
}

/// Centers the object at the origin and scales it to unit maximum radius.
/// Scaling is skipped when every point coincides.
pub fn normalize_object(cloud: &ObjectCloud) -> ObjectCloud {
    let c = cloud.centroid;
    let mut pts: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| Point {
            x: p.x - c[0],
            y: p.y - c[1],
            z: p.z - c[2],
            color: p.color,
        })
        .collect();
    let r = pts
        .iter()
        .map(|p| (p.x * p.x + p.y * p.y + p.z * p.z).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        for p in &mut pts {
            p.x /= r;
            p.y /= r;
            p.z /= r;
        }
    }
    cloud.with_points(pts)
}

//! Object-centric scene encoder.
//!
//! Each object cloud goes through a shared per-point perceptron followed by
//! coordinate-wise max pooling (permutation invariant). A small transformer
//! then mixes object features; its attention logits carry a per-head bias
//! computed from pairwise (distance, azimuth, elevation) between object
//! centroids. A two-layer GELU connector maps the result to the language
//! model width.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::pointcloud::ObjectCloud;

/// Per-point input channels: xyz followed by rgb (zeros when absent).
pub const POINT_CHANNELS: usize = 6;
/// Relation channels: distance, sin/cos azimuth, sin elevation.
pub const RELATION_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_obj: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_llm: usize,
    pub frozen_point_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_obj: 64,
            n_layers: 3,
            n_heads: 8,
            d_llm: 96,
            frozen_point_encoder: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_obj == 0 || self.n_heads == 0 || self.d_llm == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_obj.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_obj {} not divisible by n_heads {}",
                self.d_obj, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeature(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseRelation {
    pub distance: f64,
    /// Radians in (-π, π].
    pub azimuth: f64,
    /// Radians in [-π/2, π/2].
    pub elevation: f64,
}

impl PairwiseRelation {
    pub fn features(&self) -> [f64; RELATION_CHANNELS] {
        [
            self.distance,
            self.azimuth.sin(),
            self.azimuth.cos(),
            self.elevation.sin(),
        ]
    }
}

/// Relation from each centroid `i` to each centroid `j` (vector `c_j - c_i`).
pub fn pairwise_relations(centroids: &[[f64; 3]]) -> Vec<Vec<PairwiseRelation>> {
    centroids
        .iter()
        .map(|a| {
            centroids
                .iter()
                .map(|b| {
                    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                    let horiz = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    let distance = (horiz * horiz + d[2] * d[2]).sqrt();
                    if distance == 0.0 {
                        return PairwiseRelation {
                            distance: 0.0,
                            azimuth: 0.0,
                            elevation: 0.0,
                        };
                    }
                    let mut azimuth = if horiz == 0.0 { 0.0 } else { d[1].atan2(d[0]) };
                    if azimuth <= -PI {
                        azimuth = PI;
                    }
                    PairwiseRelation {
                        distance,
                        azimuth,
                        elevation: d[2].atan2(horiz),
                    }
                })
                .collect()
        })
        .collect()
}

fn relation_matrix(rel: &[Vec<PairwiseRelation>]) -> Matrix {
    let n = rel.len();
    let mut m = Matrix::zeros(n * n, RELATION_CHANNELS);
    for (i, row) in rel.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            m.data[(i * n + j) * RELATION_CHANNELS..(i * n + j + 1) * RELATION_CHANNELS]
                .copy_from_slice(&r.features());
        }
    }
    m
}

/// `N×6` matrix of per-point inputs.
pub fn point_inputs(cloud: &ObjectCloud) -> Matrix {
    let mut m = Matrix::zeros(cloud.len(), POINT_CHANNELS);
    for (i, p) in cloud.points().iter().enumerate() {
        let c = p.color.unwrap_or([0.0; 3]);
        m.data[i * POINT_CHANNELS..(i + 1) * POINT_CHANNELS].copy_from_slice(&[p.x, p.y, p.z, c[0], c[1], c[2]]);
    }
    m
}

#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub config: EncoderConfig,
    point_in: Linear,
    point_out: Linear,
    relation: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    conn_in: Linear,
    conn_out: Linear,
}

impl SceneEncoder {
    /// Registers all encoder parameters under `encoder.*`.
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_obj;
        let point_in = Linear::new(store, rng, "encoder.point.in", Group::PointEncoder, POINT_CHANNELS, d);
        let point_out = Linear::new(store, rng, "encoder.point.out", Group::PointEncoder, d, d);
        let relation = store.insert_uniform(
            rng,
            "encoder.spatial.relation",
            Group::SpatialTransformer,
            RELATION_CHANNELS,
            config.n_heads,
            1.0 / (RELATION_CHANNELS as f64).sqrt(),
        );
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, rng, &format!("encoder.spatial.{l}"), Group::SpatialTransformer, d, config.n_heads))
            .collect();
        let ln_out = LayerNorm::new(store, "encoder.spatial.ln_out", Group::SpatialTransformer, d);
        let conn_in = Linear::new(store, rng, "encoder.connector.in", Group::Connector, d, config.d_llm);
        let conn_out = Linear::new(store, rng, "encoder.connector.out", Group::Connector, config.d_llm, config.d_llm);
        Ok(SceneEncoder {
            config,
            point_in,
            point_out,
            relation,
            blocks,
            ln_out,
            conn_in,
            conn_out,
        })
    }

    pub fn relation_param(&self) -> ParamId {
        self.relation
    }

    /// Pooled `1×d_obj` feature of one (normalized) object on the tape.
    pub fn encode_object_on(&self, tape: &mut Tape, store: &ParamStore, cloud: &ObjectCloud) -> Result<Var> {
        self.point_in.check_shape(store, POINT_CHANNELS, self.config.d_obj)?;
        self.point_out.check_shape(store, self.config.d_obj, self.config.d_obj)?;
        let x = tape.constant(point_inputs(cloud));
        let h = self.point_in.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.point_out.forward(tape, store, h);
        Ok(tape.max_pool_rows(h))
    }

    pub fn encode_object(&self, store: &ParamStore, cloud: &ObjectCloud) -> Result<ObjectFeature> {
        let mut tape = Tape::with_frozen(&Group::ALL);
        let v = self.encode_object_on(&mut tape, store, cloud)?;
        Ok(ObjectFeature(tape.value(v).data.clone()))
    }

    /// Relation-aware transformer over an `N×d_obj` feature matrix.
    pub fn spatial_transformer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        relations: &[Vec<PairwiseRelation>],
    ) -> Result<Var> {
        let n = tape.value(features).rows;
        if tape.value(features).cols != self.config.d_obj {
            return Err(Error::Shape(format!(
                "object features have width {}, expected {}",
                tape.value(features).cols,
                self.config.d_obj
            )));
        }
        if relations.len() != n || relations.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "{n} object features but a {}-row relation matrix",
                relations.len()
            )));
        }
        let rel = tape.constant(relation_matrix(relations));
        let w = tape.param(store, self.relation);
        let all = tape.matmul(rel, w);
        let bias: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let col = tape.slice_cols(all, h, 1);
                tape.reshape(col, n, n)
            })
            .collect();
        let mut x = features;
        for b in &self.blocks {
            x = b.forward(tape, store, x, None, Some(&bias));
        }
        Ok(self.ln_out.forward(tape, store, x))
    }

    /// Token-wise `linear → GELU → linear` into the language model width.
    pub fn connector(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let h = self.conn_in.forward(tape, store, tokens);
        let h = tape.gelu(h);
        self.conn_out.forward(tape, store, h)
    }

    /// Object features (`N×d_obj`), either from cached frozen features or by
    /// running the point encoder on the tape.
    pub fn object_features(&self, tape: &mut Tape, store: &ParamStore, input: &SceneInput) -> Result<Var> {
        match &input.features {
            Some(f) => Ok(tape.constant(f.clone())),
            None => {
                let rows = input
                    .objects
                    .iter()
                    .map(|o| self.encode_object_on(tape, store, o))
                    .collect::<Result<Vec<_>>>()?;
                let src: Vec<(Var, usize)> = rows.into_iter().map(|v| (v, 0)).collect();
                Ok(tape.gather_rows(&src))
            }
        }
    }

    /// Full scene path: objects → spatial transformer → connector (`N×d_llm`).
    pub fn encode_scene(&self, tape: &mut Tape, store: &ParamStore, input: &SceneInput) -> Result<Var> {
        let feats = self.object_features(tape, store, input)?;
        let tokens = self.spatial_transformer(tape, store, feats, &input.relations)?;
        Ok(self.connector(tape, store, tokens))
    }

    /// Precomputes frozen point-encoder features for a scene.
    pub fn prepare(&self, store: &ParamStore, objects: Vec<ObjectCloud>, cache_features: bool) -> Result<SceneInput> {
        let centroids: Vec<[f64; 3]> = objects.iter().map(|o| o.centroid()).collect();
        let relations = pairwise_relations(&centroids);
        let normalized: Vec<ObjectCloud> = objects.iter().map(crate::pointcloud::normalize_object).collect();
        let features = if cache_features {
            let rows = normalized
                .iter()
                .map(|o| self.encode_object(store, o).map(|f| f.0))
                .collect::<Result<Vec<_>>>()?;
            Some(Matrix::from_rows(&rows))
        } else {
            None
        };
        Ok(SceneInput {
            objects: if cache_features { Vec::new() } else { normalized },
            relations,
            features,
        })
    }
}

/// Encoder-ready scene: relations between original centroids plus either
/// cached object features or the normalized clouds themselves.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub objects: Vec<ObjectCloud>,
    pub relations: Vec<Vec<PairwiseRelation>>,
    pub features: Option<Matrix>,
}

impl SceneInput {
    pub fn object_count(&self) -> usize {
        self.relations.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Grads;
    use crate::pointcloud::{normalize_object, Point};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (SceneEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = EncoderConfig {
            d_obj: 8,
            n_layers: 2,
            n_heads: 2,
            d_llm: 6,
            frozen_point_encoder: true,
        };
        let enc = SceneEncoder::new(cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn cloud(seed: u64, n: usize) -> ObjectCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point::with_color(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                )
            })
            .collect();
        normalize_object(&ObjectCloud::new(0, "o", pts).unwrap())
    }

    fn features(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn run_st(enc: &SceneEncoder, store: &ParamStore, f: &Matrix, centroids: &[[f64; 3]]) -> Matrix {
        let mut t = Tape::new();
        let x = t.constant(f.clone());
        let y = enc.spatial_transformer(&mut t, store, x, &pairwise_relations(centroids)).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = EncoderConfig {
            d_obj: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn encode_object_is_permutation_invariant() {
        let (enc, store) = small();
        let c = cloud(1, 40);
        let mut pts = c.points().to_vec();
        pts.reverse();
        pts.swap(3, 17);
        let shuffled = ObjectCloud::new(0, "o", pts).unwrap();
        assert_eq!(enc.encode_object(&store, &c).unwrap(), enc.encode_object(&store, &shuffled).unwrap());
    }

    #[test]
    fn encode_zero_cloud_is_independent_of_count() {
        let (enc, store) = small();
        let zeros = |n| ObjectCloud::new(0, "z", vec![Point::new(0.0, 0.0, 0.0); n]).unwrap();
        assert_eq!(enc.encode_object(&store, &zeros(1)).unwrap(), enc.encode_object(&store, &zeros(50)).unwrap());
    }

    #[test]
    fn distinct_clouds_give_distinct_features() {
        let (enc, store) = small();
        let a = enc.encode_object(&store, &cloud(1, 30)).unwrap();
        let b = enc.encode_object(&store, &cloud(2, 30)).unwrap();
        assert!(a.0.iter().zip(&b.0).any(|(x, y)| x != y));
    }

    #[test]
    fn encode_object_rejects_mismatched_params() {
        let (enc, mut store) = small();
        let id = store.id("encoder.point.in.weight").unwrap();
        *store.value_mut(id) = Matrix::zeros(3, 8);
        assert!(matches!(enc.encode_object(&store, &cloud(1, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn relation_examples() {
        let r = pairwise_relations(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(r[0][1].distance, 1.0);
        assert_eq!(r[0][1].azimuth, 0.0);
        assert_eq!(r[0][1].elevation, 0.0);
        assert_eq!(r[1][0].azimuth, PI);

        let one = pairwise_relations(&[[3.0, 1.0, 2.0]]);
        assert_eq!(one[0][0], PairwiseRelation { distance: 0.0, azimuth: 0.0, elevation: 0.0 });

        let up = pairwise_relations(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(up[0][1].elevation, PI / 2.0);
        assert_eq!(up[1][0].elevation, -PI / 2.0);
    }

    #[test]
    fn relation_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cs: Vec<[f64; 3]> = (0..7).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let r = pairwise_relations(&cs);
        for i in 0..7 {
            assert_eq!(r[i][i].distance, 0.0);
            for j in 0..7 {
                assert_eq!(r[i][j].distance, r[j][i].distance);
                let a = r[i][j].azimuth;
                assert!(a > -PI && a <= PI);
                assert!(r[i][j].elevation.abs() <= PI / 2.0);
                if i != j {
                    let diff = (a - r[j][i].azimuth - PI).rem_euclid(2.0 * PI);
                    assert!(diff < 1e-12 || (2.0 * PI - diff) < 1e-12, "{i},{j}: {diff}");
                }
            }
        }
    }

    #[test]
    fn single_object_transformer_matches_bias_free_path() {
        let (enc, store) = small();
        let f = features(3, 1, 8);
        let with = run_st(&enc, &store, &f, &[[1.0, 2.0, 3.0]]);
        // With one object the softmax is identically 1; the bias cannot matter.
        let mut zeroed = store.clone();
        *zeroed.value_mut(enc.relation_param()) = Matrix::zeros(RELATION_CHANNELS, 2);
        let without = run_st(&enc, &zeroed, &f, &[[1.0, 2.0, 3.0]]);
        assert_eq!(with, without);
    }

    #[test]
    fn zero_relation_weights_equal_plain_attention() {
        let (enc, mut store) = small();
        *store.value_mut(enc.relation_param()) = Matrix::zeros(RELATION_CHANNELS, 2);
        let f = features(4, 3, 8);
        let cs = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [-2.0, 0.3, 1.0]];
        let biased = run_st(&enc, &store, &f, &cs);
        let mut t = Tape::new();
        let mut x = t.constant(f.clone());
        for b in &enc.blocks {
            x = b.forward(&mut t, &store, x, None, None);
        }
        let x = enc.ln_out.forward(&mut t, &store, x);
        assert_eq!(&biased, t.value(x));
    }

    #[test]
    fn transformer_is_translation_invariant() {
        let (enc, store) = small();
        let f = features(5, 3, 8);
        let cs = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [-2.0, 0.3, 1.0]];
        let moved: Vec<[f64; 3]> = cs.iter().map(|c| [c[0] + 7.25, c[1] - 3.5, c[2] + 0.125]).collect();
        let a = run_st(&enc, &store, &f, &cs);
        let b = run_st(&enc, &store, &f, &moved);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn transformer_is_permutation_equivariant() {
        let (enc, store) = small();
        let f = features(6, 3, 8);
        let cs = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [-2.0, 0.3, 1.0]];
        let perm = [2usize, 0, 1];
        let pf = Matrix::from_rows(&perm.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>());
        let pc: Vec<[f64; 3]> = perm.iter().map(|&i| cs[i]).collect();
        let a = run_st(&enc, &store, &f, &cs);
        let b = run_st(&enc, &store, &pf, &pc);
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in b.row(k).iter().zip(a.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_rejects_shape_mismatch() {
        let (enc, store) = small();
        let mut t = Tape::new();
        let x = t.constant(features(1, 2, 8));
        let r = pairwise_relations(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert!(matches!(enc.spatial_transformer(&mut t, &store, x, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn connector_examples() {
        let (enc, mut store) = small();
        for name in ["encoder.connector.in.bias", "encoder.connector.out.bias"] {
            let id = store.id(name).unwrap();
            let v = store.value_mut(id);
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 8));
        let y = enc.connector(&mut t, &store, z);
        assert!(t.value(y).data.iter().all(|&v| v == 0.0));

        let f = features(9, 2, 8);
        let swapped = Matrix::from_rows(&[f.row(1).to_vec(), f.row(0).to_vec()]);
        let mut t = Tape::new();
        let a = t.constant(f);
        let b = t.constant(swapped);
        let ya = enc.connector(&mut t, &store, a);
        let yb = enc.connector(&mut t, &store, b);
        assert_eq!(t.value(ya).row(0), t.value(yb).row(1));
        assert_eq!(t.value(ya).row(1), t.value(yb).row(0));
    }

    /// Random projection of connector ∘ spatial transformer on three objects,
    /// checked against central differences for every trainable entry.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, mut store) = small();
        let f = features(8, 3, 8);
        let cs = [[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [-2.0, 0.3, 1.0]];
        let rel = pairwise_relations(&cs);
        let proj = features(10, 3, 6);
        let eval = |store: &ParamStore, grads: Option<&mut Grads>| -> f64 {
            let mut t = Tape::with_frozen(&[Group::PointEncoder]);
            let x = t.constant(f.clone());
            let y = enc.spatial_transformer(&mut t, store, x, &rel).unwrap();
            let y = enc.connector(&mut t, store, y);
            let p = t.constant(proj.clone());
            let y = t.mul(y, p);
            let s = t.mean(y);
            if let Some(g) = grads {
                t.backward(&[(s, Matrix::scalar(1.0))], g);
            }
            t.scalar(s)
        };
        let mut grads = Grads::zeros_like(&store);
        eval(&store, Some(&mut grads));
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            if store.group(id) == Group::PointEncoder {
                assert!(grads.get(id).data.iter().all(|&v| v == 0.0));
                continue;
            }
            for k in 0..store.value(id).len() {
                let orig = store.value(id).data[k];
                store.value_mut(id).data[k] = orig + h;
                let fp = eval(&store, None);
                store.value_mut(id).data[k] = orig - h;
                let fm = eval(&store, None);
                store.value_mut(id).data[k] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads.get(id).data[k];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}

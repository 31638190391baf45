//! Two-domain synthetic detection benchmark.
//!
//! A scene is a set of boxed objects, each carrying an appearance vector drawn
//! around its class prototype. The target domain pushes appearances through
//! an affine "style" map, changes the class prior and object sizes. Crops are
//! turned into feature vectors by [`FeatureOracle`], which stands in for a
//! backbone: it mixes the appearances visible in the crop, appends a
//! description of where the overlapping objects sit relative to the crop, and
//! projects the result through a fixed random matrix.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{encode_offsets, iou, BBox};
use crate::seed::{mix, rng_for};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("could not place {wanted} objects in {domain:?} scene {scene} under overlap cap {cap} (placed {placed})")]
    Infeasible {
        domain: Domain,
        scene: usize,
        wanted: usize,
        placed: usize,
        cap: f64,
    },
    #[error("crop box {0:?} has zero area")]
    ZeroAreaCrop(BBox),
    #[error("dataset i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub class_prior: Vec<f64>,
    /// Std-dev of the Gaussian noise added to crop features.
    pub noise_sigma: f64,
    /// Object side lengths are drawn uniformly from this range.
    pub size_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    /// Rotation angle (radians) applied in each of the paired planes.
    pub angle: f64,
    /// Relative anisotropic stretch; singular values lie in `[1 - a, 1 + a]`.
    pub anisotropy: f64,
    /// Norm of the translation added after the linear map.
    pub bias_norm: f64,
    /// Size of the shifted appearance subspace; the orthogonal complement is
    /// left untouched. `0` shifts every dimension.
    #[serde(default)]
    pub dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub app_dim: usize,
    pub feat_dim: usize,
    pub scene_width: f64,
    pub scene_height: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub max_objects: usize,
    pub overlap_cap: f64,
    pub prototype_norm: f64,
    pub intra_class_sigma: f64,
    pub background_sigma: f64,
    /// Exponent applied to crop/object IoU in the appearance mixture.
    pub iou_power: f64,
    /// Scale of the relative-position block before projection.
    pub location_scale: f64,
    pub source: DomainParams,
    pub target: DomainParams,
    pub shift: ShiftParams,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl WorldConfig {
    /// Reference benchmark: K=3, 8-dim appearances, 16-dim features, 200+200 scenes.
    pub fn reference() -> Self {
        Self {
            num_classes: 3,
            app_dim: 8,
            feat_dim: 16,
            scene_width: 64.0,
            scene_height: 64.0,
            n_source: 200,
            n_target: 200,
            max_objects: 3,
            overlap_cap: 0.2,
            prototype_norm: 3.0,
            intra_class_sigma: 0.5,
            background_sigma: 0.6,
            iou_power: 2.0,
            location_scale: 3.0,
            source: DomainParams {
                class_prior: vec![1.0 / 3.0; 3],
                noise_sigma: 0.1,
                size_range: [14.0, 26.0],
            },
            target: DomainParams {
                class_prior: vec![0.5, 0.3, 0.2],
                noise_sigma: 0.1,
                size_range: [12.0, 24.0],
            },
            shift: ShiftParams {
                angle: 0.9,
                anisotropy: 0.2,
                bias_norm: 2.0,
                dims: 4,
            },
            seed: 0,
        }
    }

    pub fn domain(&self, d: Domain) -> &DomainParams {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.app_dim < 2 || self.feat_dim == 0 {
            return bad("app_dim must be >= 2 and feat_dim >= 1".into());
        }
        if self.max_objects == 0 {
            return bad("max_objects must be >= 1".into());
        }
        if !(self.scene_width > 0.0 && self.scene_height > 0.0) {
            return bad("scene size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return bad("overlap_cap must lie in [0, 1]".into());
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            if d.class_prior.len() != self.num_classes {
                return bad(format!("{name}.class_prior must have {} entries", self.num_classes));
            }
            if d.class_prior.iter().any(|p| !(*p >= 0.0)) || (d.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad(format!("{name}.class_prior must be non-negative and sum to 1"));
            }
            let [lo, hi] = d.size_range;
            if !(lo > 0.0 && hi >= lo && hi <= self.scene_width.min(self.scene_height)) {
                return bad(format!("{name}.size_range must satisfy 0 < lo <= hi <= scene size"));
            }
            if !(d.noise_sigma >= 0.0) {
                return bad(format!("{name}.noise_sigma must be non-negative"));
            }
        }
        if self.shift.dims > self.app_dim {
            return bad("shift.dims must not exceed app_dim".into());
        }
        if !(self.shift.anisotropy >= 0.0 && self.shift.anisotropy < 1.0) {
            return bad("shift.anisotropy must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, WorldError> {
        let cfg: Self = toml::from_str(text).map_err(|e| WorldError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub cls: usize,
    #[serde(flatten)]
    pub bbox: BBox,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub domain: Domain,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<ObjectInstance>,
    pub background_vec: Vec<f64>,
    pub noise_seed: u64,
}

impl Scene {
    pub fn size(&self) -> (f64, f64) {
        (self.width, self.height)
    }
}

/// Ground-truth annotation of one object, as consumed by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub cls: usize,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub objects: Vec<GtObject>,
}

impl SceneAnnotations {
    pub fn of(scene: &Scene) -> Self {
        Self {
            scene_id: scene.id.clone(),
            objects: scene.objects.iter().map(|o| GtObject { cls: o.cls, bbox: o.bbox }).collect(),
        }
    }
}

/// A scene whose labels are hidden from training code: only its identity,
/// size and crop features are reachable.
#[derive(Debug, Clone)]
pub struct UnlabeledScene(Scene);

impl UnlabeledScene {
    pub fn new(scene: Scene) -> Self {
        Self(scene)
    }

    pub fn id(&self) -> &str {
        &self.0.id
    }

    pub fn size(&self) -> (f64, f64) {
        self.0.size()
    }

    pub fn crop_feature(&self, oracle: &FeatureOracle, b: &BBox) -> Result<Vec<f64>, WorldError> {
        oracle.crop_feature(&self.0, b)
    }

    /// Underlying scene record, for persistence only.
    pub fn record(&self) -> &Scene {
        &self.0
    }
}

/// Affine appearance map, noise level, class prior and object size range of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub appearance_map: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
    pub class_prior: Vec<f64>,
    pub size_range: [f64; 2],
    pub condition_number: f64,
}

impl DomainSpec {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.appearance_map
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * normal(rng)).collect::<Vec<f64>>()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = gaussian_vec(rng, n, 1.0);
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            normalize(&mut v);
            cols.push(v);
        }
    }
    cols
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Class prototypes and domain maps implied by a config.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub prototypes: Vec<Vec<f64>>,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl WorldModel {
    pub fn new(cfg: &WorldConfig) -> Self {
        let d = cfg.app_dim;
        let mut rng = rng_for(cfg.seed, "prototypes", &[]);
        let prototypes = (0..cfg.num_classes)
            .map(|_| {
                let mut v = gaussian_vec(&mut rng, d, 1.0);
                normalize(&mut v);
                v.iter_mut().for_each(|x| *x *= cfg.prototype_norm);
                v
            })
            .collect();
        let identity: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
        let source = DomainSpec {
            appearance_map: identity.clone(),
            bias: vec![0.0; d],
            noise_sigma: cfg.source.noise_sigma,
            class_prior: cfg.source.class_prior.clone(),
            size_range: cfg.source.size_range,
            condition_number: 1.0,
        };

        // Q * (S R) * Q^T: plane rotations of `angle` with an anisotropic stretch
        // inside the first `m` basis directions, expressed in a random orthonormal basis.
        let m = if cfg.shift.dims == 0 { d } else { cfg.shift.dims };
        let mut rng = rng_for(cfg.seed, "shift", &[]);
        let q = random_orthogonal(&mut rng, d);
        let mut core = identity.clone();
        let (c, s) = (cfg.shift.angle.cos(), cfg.shift.angle.sin());
        let mut i = 0;
        while i + 1 < m {
            core[i][i] = c;
            core[i][i + 1] = -s;
            core[i + 1][i] = s;
            core[i + 1][i + 1] = c;
            i += 2;
        }
        let a = cfg.shift.anisotropy;
        let stretch: Vec<f64> = (0..m)
            .map(|k| if m > 1 { 1.0 - a + 2.0 * a * k as f64 / (m - 1) as f64 } else { 1.0 })
            .collect();
        for (k, row) in core.iter_mut().take(m).enumerate() {
            row.iter_mut().for_each(|x| *x *= stretch[k]);
        }
        let qm = transpose(&q);
        let map = matmul(&matmul(&qm, &core), &q);
        let mut inner = gaussian_vec(&mut rng, m, 1.0);
        normalize(&mut inner);
        let bias: Vec<f64> = (0..d)
            .map(|j| (0..m).map(|k| qm[j][k] * inner[k] * cfg.shift.bias_norm).sum())
            .collect();
        let smax = stretch.iter().cloned().fold(f64::MIN, f64::max);
        let smin = stretch.iter().cloned().fold(f64::MAX, f64::min);
        let target = DomainSpec {
            appearance_map: map,
            bias,
            noise_sigma: cfg.target.noise_sigma,
            class_prior: cfg.target.class_prior.clone(),
            size_range: cfg.target.size_range,
            condition_number: smax / smin,
        };
        Self {
            prototypes,
            source,
            target,
        }
    }

    pub fn spec(&self, d: Domain) -> &DomainSpec {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// Golden-ratio Weyl sequence step; consecutive object slots get well spread
/// uniforms so class frequencies track the prior closely.
const WEYL_STEP: f64 = 0.618_033_988_749_894_8;

fn class_uniform(cfg: &WorldConfig, domain: Domain, scene: usize, slot: usize) -> f64 {
    let offset: f64 = rng_for(cfg.seed, "class-offset", &[domain.tag()]).random();
    let k = (scene * cfg.max_objects + slot) as f64;
    (offset + WEYL_STEP * k).fract()
}

fn sample_class(u: f64, prior: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.len() - 1
}

const PLACEMENT_RETRIES: usize = 500;

fn generate_scene(cfg: &WorldConfig, world: &WorldModel, domain: Domain, index: usize) -> Result<Scene, WorldError> {
    let spec = world.spec(domain);
    let mut rng = rng_for(cfg.seed, "scene", &[domain.tag(), index as u64]);
    let wanted = rng.random_range(1..=cfg.max_objects);
    let [lo, hi] = spec.size_range;
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(wanted);
    for slot in 0..wanted {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x1 = rng.random_range(0.0..=(cfg.scene_width - w));
            let y1 = rng.random_range(0.0..=(cfg.scene_height - h));
            let b = BBox::new(x1, y1, x1 + w, y1 + h);
            if objects.iter().all(|o| iou(&o.bbox, &b) <= cfg.overlap_cap) {
                placed = Some(b);
                break;
            }
        }
        let Some(bbox) = placed else {
            return Err(WorldError::Infeasible {
                domain,
                scene: index,
                wanted,
                placed: objects.len(),
                cap: cfg.overlap_cap,
            });
        };
        let cls = sample_class(class_uniform(cfg, domain, index, slot), &spec.class_prior);
        let raw: Vec<f64> = world.prototypes[cls]
            .iter()
            .map(|m| m + cfg.intra_class_sigma * normal(&mut rng))
            .collect::<Vec<f64>>();
        objects.push(ObjectInstance {
            cls,
            bbox,
            appearance: spec.apply(&raw),
        });
    }
    let bg = gaussian_vec(&mut rng, cfg.app_dim, cfg.background_sigma);
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Ok(Scene {
        id: format!("{prefix}-{index:05}"),
        domain,
        width: cfg.scene_width,
        height: cfg.scene_height,
        objects,
        background_vec: spec.apply(&bg),
        noise_seed: rng.random(),
    })
}

/// Source and target scene lists for a config. Pure in `cfg` (including its seed).
pub fn generate_benchmark(cfg: &WorldConfig) -> Result<(Vec<Scene>, Vec<Scene>), WorldError> {
    cfg.validate()?;
    let world = WorldModel::new(cfg);
    let source = (0..cfg.n_source)
        .map(|i| generate_scene(cfg, &world, Domain::Source, i))
        .collect::<Result<Vec<_>, _>>()?;
    let target = (0..cfg.n_target)
        .map(|i| generate_scene(cfg, &world, Domain::Target, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((source, target))
}

/// Deterministic crop-to-feature map standing in for a backbone.
#[derive(Debug, Clone)]
pub struct FeatureOracle {
    pub feat_dim: usize,
    pub app_dim: usize,
    pub iou_power: f64,
    pub location_scale: f64,
    /// `feat_dim x (app_dim + 4)` row-major projection.
    projection: Vec<f64>,
    noise_sigma: [f64; 2],
    noise: bool,
}

/// Relative offsets of the location block are clipped to this magnitude.
const LOCATION_CLIP: f64 = 2.0;

impl FeatureOracle {
    pub fn new(cfg: &WorldConfig) -> Self {
        let cols = cfg.app_dim + 4;
        let mut rng = rng_for(cfg.seed, "projection", &[]);
        let scale = 1.0 / (cols as f64).sqrt();
        let projection = gaussian_vec(&mut rng, cfg.feat_dim * cols, scale);
        Self {
            feat_dim: cfg.feat_dim,
            app_dim: cfg.app_dim,
            iou_power: cfg.iou_power,
            location_scale: cfg.location_scale,
            projection,
            noise_sigma: [cfg.source.noise_sigma, cfg.target.noise_sigma],
            noise: true,
        }
    }

    /// Same oracle with the additive noise switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise = false;
        self
    }

    /// Pre-projection vector: appearance mixture followed by the location block.
    pub fn mixture(&self, scene: &Scene, b: &BBox) -> Result<Vec<f64>, WorldError> {
        let area = b.area();
        if !(area > 0.0) {
            return Err(WorldError::ZeroAreaCrop(*b));
        }
        let mut app = vec![0.0; self.app_dim];
        let mut loc = [0.0; 4];
        let mut covered = 0.0;
        let mut total_w = 0.0;
        for o in &scene.objects {
            covered += b.intersection(&o.bbox);
            let w = iou(b, &o.bbox).powf(self.iou_power);
            if w > 0.0 {
                total_w += w;
                app.iter_mut().zip(&o.appearance).for_each(|(a, x)| *a += w * x);
                let t = encode_offsets(b, &o.bbox).map(|t| t.to_array()).unwrap_or([0.0; 4]);
                for (l, v) in loc.iter_mut().zip(t) {
                    *l += w * v.clamp(-LOCATION_CLIP, LOCATION_CLIP);
                }
            }
        }
        let uncovered = (1.0 - covered / area).clamp(0.0, 1.0);
        app.iter_mut().zip(&scene.background_vec).for_each(|(a, x)| *a += uncovered * x);
        let denom = total_w + uncovered;
        if denom > 0.0 {
            app.iter_mut().for_each(|a| *a /= denom);
        }
        if total_w > 0.0 {
            loc.iter_mut().for_each(|l| *l *= self.location_scale / total_w);
        }
        app.extend_from_slice(&loc);
        Ok(app)
    }

    pub fn crop_feature(&self, scene: &Scene, b: &BBox) -> Result<Vec<f64>, WorldError> {
        let m = self.mixture(scene, b)?;
        let cols = m.len();
        let mut f: Vec<f64> = (0..self.feat_dim)
            .map(|r| self.projection[r * cols..(r + 1) * cols].iter().zip(&m).map(|(p, x)| p * x).sum())
            .collect();
        let sigma = self.noise_sigma[scene.domain.tag() as usize];
        if self.noise && sigma > 0.0 {
            let key = mix(
                scene.noise_seed,
                &[b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()],
            );
            let mut rng = rng_for(key, "crop", &[]);
            f.iter_mut()
                .for_each(|x| *x += sigma * normal(&mut rng));
        }
        Ok(f)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorldError + '_ {
    move |source| WorldError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), WorldError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, WorldError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

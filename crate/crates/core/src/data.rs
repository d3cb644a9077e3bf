//! Synthetic multi-domain segmentation data, its on-disk format, and the
//! episodic meta-train / meta-test sampler.
//!
//! Every domain renders the same kind of anatomy: a body ellipse containing
//! three labelled structures (a bright elliptical pool, the annulus around it
//! and a crescent-shaped neighbour), so `m = 4` classes including background.
//! Domains differ by appearance (bias field, contrast, gamma, brightness,
//! noise) and by the population distribution of structure sizes and shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of segmentation classes produced by the renderer (background + 3).
pub const NUM_CLASSES: usize = 4;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Closed scalar interval a per-sample parameter is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange(pub f64, pub f64);

impl ParamRange {
    pub const fn fixed(v: f64) -> Self {
        Self(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 { self.0 } else { rng.random_range(self.0..=self.1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub brightness: ParamRange,
    pub contrast: ParamRange,
    pub gamma: ParamRange,
    pub bias_field: ParamRange,
    pub noise_std: ParamRange,
}

impl Appearance {
    /// The transform that leaves the base render untouched.
    pub fn identity() -> Self {
        Self {
            brightness: ParamRange::fixed(0.0),
            contrast: ParamRange::fixed(1.0),
            gamma: ParamRange::fixed(1.0),
            bias_field: ParamRange::fixed(0.0),
            noise_std: ParamRange::fixed(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    /// Multiplier on the nominal structure size.
    pub size: ParamRange,
    /// Eccentricity of the central structure, in `[0, 1)`.
    pub eccentricity: ParamRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub appearance: Appearance,
    pub population: Population,
    pub num_samples: usize,
    pub labeled_fraction: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidSpec { domain: self.domain_id, reason });
        let a = &self.appearance;
        let p = &self.population;
        let ranges = [
            ("brightness", a.brightness),
            ("contrast", a.contrast),
            ("gamma", a.gamma),
            ("bias_field", a.bias_field),
            ("noise_std", a.noise_std),
            ("size", p.size),
            ("eccentricity", p.eccentricity),
        ];
        for (name, r) in ranges {
            if !(r.lo().is_finite() && r.hi().is_finite()) || r.lo() > r.hi() {
                return fail(format!("{name} range [{}, {}] is not a finite interval", r.lo(), r.hi()));
            }
        }
        if a.noise_std.lo() < 0.0 {
            return fail(format!("negative noise std {}", a.noise_std.lo()));
        }
        if a.bias_field.lo() < 0.0 {
            return fail(format!("negative bias-field amplitude {}", a.bias_field.lo()));
        }
        if a.contrast.lo() <= 0.0 || a.gamma.lo() <= 0.0 || p.size.lo() <= 0.0 {
            return fail("contrast, gamma and size must be positive".into());
        }
        if p.eccentricity.lo() < 0.0 || p.eccentricity.hi() >= 1.0 {
            return fail("eccentricity must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return fail(format!("labeled_fraction {} outside [0, 1]", self.labeled_fraction));
        }
        if self.num_samples == 0 {
            return fail("num_samples must be at least 1".into());
        }
        Ok(())
    }

    /// `⌊labeled_fraction · N⌋`.
    pub fn num_labeled(&self) -> usize {
        // The epsilon absorbs products such as 0.1 * 30 = 3.0000000000000004
        // landing a hair below the integer.
        ((self.labeled_fraction * self.num_samples as f64) + 1e-9).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub const fn square(n: usize) -> Self {
        Self { height: n, width: n }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    /// Ground truth. Present for generated data; never read for training
    /// unless `labeled` is set.
    pub mask: Option<Vec<u8>>,
    pub size: ImageSize,
    pub domain_id: usize,
    pub labeled: bool,
}

/// Shape and appearance parameters drawn for one sample.
#[derive(Clone, Copy, Debug)]
struct Anatomy {
    cx: f64,
    cy: f64,
    angle: f64,
    size: f64,
    eccentricity: f64,
}

fn in_ellipse(u: f64, v: f64, a: &Anatomy, ox: f64, oy: f64, ra: f64, rb: f64) -> bool {
    let (s, c) = a.angle.sin_cos();
    let (du, dv) = (u - a.cx - ox, v - a.cy - oy);
    let x = c * du + s * dv;
    let y = -s * du + c * dv;
    (x / ra).powi(2) + (y / rb).powi(2) <= 1.0
}

const INTENSITY: [f64; NUM_CLASSES] = [0.3, 0.9, 0.45, 0.7];
const OUTSIDE_BODY: f64 = 0.05;

/// Renders the class mask and noise-free base intensities.
fn render(anatomy: &Anatomy, size: ImageSize) -> (Vec<u8>, Vec<f64>) {
    let a = anatomy;
    let pool_a = 0.22 * a.size;
    let pool_b = pool_a * (1.0 - a.eccentricity * a.eccentricity).sqrt();
    let wall = 0.09 * a.size;
    let (s, c) = a.angle.sin_cos();
    // Neighbour sits beside the wall along the minor axis.
    let dist = pool_b + wall + 0.1 * a.size;
    let (nx, ny) = (-s * dist, c * dist);
    let (na, nb) = (0.3 * a.size, 0.16 * a.size);

    let mut mask = vec![0u8; size.pixels()];
    let mut base = vec![0.0; size.pixels()];
    for y in 0..size.height {
        let v = (y as f64 + 0.5) / size.height as f64 * 2.0 - 1.0;
        for x in 0..size.width {
            let u = (x as f64 + 0.5) / size.width as f64 * 2.0 - 1.0;
            let i = y * size.width + x;
            let body = (u / 0.85).powi(2) + (v / 0.72).powi(2) <= 1.0;
            let class = if in_ellipse(u, v, a, 0.0, 0.0, pool_a, pool_b) {
                1
            } else if in_ellipse(u, v, a, 0.0, 0.0, pool_a + wall, pool_b + wall) {
                2
            } else if in_ellipse(u, v, a, nx, ny, na, nb) {
                3
            } else {
                0
            };
            mask[i] = class;
            base[i] = if class == 0 && !body { OUTSIDE_BODY } else { INTENSITY[class as usize] };
        }
    }
    (mask, base)
}

#[derive(Clone, Copy, Debug)]
struct AppearanceDraw {
    brightness: f64,
    contrast: f64,
    gamma: f64,
    bias: f64,
    bias_dir: f64,
    noise_std: f64,
}

/// bias field -> contrast/gamma -> brightness -> noise -> clip.
fn apply_appearance(base: &[f64], size: ImageSize, d: &AppearanceDraw, rng: &mut impl Rng) -> Vec<f32> {
    let (ds, dc) = d.bias_dir.sin_cos();
    let mut out = Vec::with_capacity(base.len());
    for y in 0..size.height {
        let v = (y as f64 + 0.5) / size.height as f64 * 2.0 - 1.0;
        for x in 0..size.width {
            let u = (x as f64 + 0.5) / size.width as f64 * 2.0 - 1.0;
            let mut p = base[y * size.width + x];
            if d.bias != 0.0 {
                p *= 1.0 + d.bias * 0.5 * (dc * u + ds * v);
            }
            p = d.contrast * p.max(0.0).powf(d.gamma);
            p += d.brightness;
            if d.noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                p += d.noise_std * n;
            }
            out.push(p.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Deterministically generates the samples of one domain. Geometry and
/// appearance draw from independent streams, so changing appearance ranges
/// never changes masks.
pub fn generate_domain(spec: &DomainSpec, size: ImageSize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if size.height < 32 || size.width < 32 {
        return Err(Error::InvalidSpec {
            domain: spec.domain_id,
            reason: format!("image size {}x{} below the 32x32 minimum", size.height, size.width),
        });
    }
    let mut geo = ChaCha8Rng::seed_from_u64(seed);
    geo.set_stream(1);
    let mut app = ChaCha8Rng::seed_from_u64(seed);
    app.set_stream(2);

    let labeled = spec.num_labeled();
    let pop = &spec.population;
    let ap = &spec.appearance;
    let samples = (0..spec.num_samples)
        .map(|i| {
            let anatomy = Anatomy {
                cx: geo.random_range(-0.12..=0.12),
                cy: geo.random_range(-0.12..=0.12),
                angle: geo.random_range(0.0..std::f64::consts::PI),
                size: pop.size.sample(&mut geo),
                eccentricity: pop.eccentricity.sample(&mut geo),
            };
            let draw = AppearanceDraw {
                brightness: ap.brightness.sample(&mut app),
                contrast: ap.contrast.sample(&mut app),
                gamma: ap.gamma.sample(&mut app),
                bias: ap.bias_field.sample(&mut app),
                bias_dir: app.random_range(0.0..std::f64::consts::TAU),
                noise_std: ap.noise_std.sample(&mut app),
            };
            let (mask, base) = render(&anatomy, size);
            let image = apply_appearance(&base, size, &draw, &mut app);
            Sample { image, mask: Some(mask), size, domain_id: spec.domain_id, labeled: i < labeled }
        })
        .collect();
    Ok(samples)
}

/// A multi-domain dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: ImageSize,
    pub num_classes: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub samples: Vec<Sample>,
}

/// Per-domain seed derived from the dataset seed.
pub fn domain_seed(seed: u64, domain_id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(domain_id as u64 + 1)
}

impl Dataset {
    pub fn generate(domains: Vec<DomainSpec>, size: ImageSize, seed: u64) -> Result<Self> {
        let mut ids: Vec<usize> = domains.iter().map(|d| d.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != domains.len() {
            return Err(Error::InvalidConfig("duplicate domain ids".into()));
        }
        let mut samples = Vec::new();
        for spec in &domains {
            samples.extend(generate_domain(spec, size, domain_seed(seed, spec.domain_id))?);
        }
        Ok(Self { size, num_classes: NUM_CLASSES, seed, domains, samples })
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.domain_id).collect()
    }

    pub fn indices_of(&self, domain_id: usize) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| s.domain_id == domain_id).map(|(i, _)| i).collect()
    }

    /// Restricts to the listed domains (e.g. the sources of a leave-one-out run).
    pub fn subset(&self, domain_ids: &[usize]) -> Self {
        Self {
            size: self.size,
            num_classes: self.num_classes,
            seed: self.seed,
            domains: self.domains.iter().filter(|d| domain_ids.contains(&d.domain_id)).cloned().collect(),
            samples: self.samples.iter().filter(|s| domain_ids.contains(&s.domain_id)).cloned().collect(),
        }
    }

    pub fn check_size(&self, expected: ImageSize) -> Result<()> {
        if self.size != expected {
            return Err(Error::Shape(format!(
                "dataset images are {}x{} but the model expects {}x{}",
                self.size.height, self.size.width, expected.height, expected.width
            )));
        }
        Ok(())
    }
}

// ---- episodes ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSplit {
    pub meta_train_domains: Vec<usize>,
    pub meta_test_domain: usize,
}

/// Draws a uniformly random single meta-test domain; the rest are meta-train.
pub fn split_episode(source_domains: &[usize], rng: &mut impl Rng) -> Result<EpisodeSplit> {
    if source_domains.len() < 3 {
        return Err(Error::Episode(format!(
            "need at least 3 source domains for an episode, got {}",
            source_domains.len()
        )));
    }
    let pick = rng.random_range(0..source_domains.len());
    let meta_test_domain = source_domains[pick];
    let meta_train_domains = source_domains.iter().copied().filter(|&d| d != meta_test_domain).collect();
    Ok(EpisodeSplit { meta_train_domains, meta_test_domain })
}

/// A training batch. Masks are only materialised for labeled samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<Option<Vec<u8>>>,
    pub domain_ids: Vec<usize>,
    /// One-hot over the source-domain classes `[B, K]`.
    pub domain_onehot: Tensor,
    pub labeled: Vec<bool>,
    pub size: ImageSize,
}

impl Batch {
    /// `source_domains` fixes the domain-classifier label order.
    pub fn from_indices(dataset: &Dataset, indices: &[usize], source_domains: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Episode("empty batch".into()));
        }
        let size = dataset.size;
        let k = source_domains.len();
        let mut images = Vec::with_capacity(indices.len() * size.pixels());
        let mut onehot = vec![0.0; indices.len() * k];
        let mut masks = Vec::with_capacity(indices.len());
        let mut domain_ids = Vec::with_capacity(indices.len());
        let mut labeled = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let s = &dataset.samples[i];
            images.extend(s.image.iter().map(|&p| p as f64));
            let class = source_domains.iter().position(|&d| d == s.domain_id).ok_or_else(|| {
                Error::Episode(format!("sample domain {} is not a source domain", s.domain_id))
            })?;
            onehot[row * k + class] = 1.0;
            // Unlabeled masks are never copied, let alone read.
            masks.push(if s.labeled { s.mask.clone() } else { None });
            if s.labeled && s.mask.is_none() {
                return Err(Error::Episode(format!("labeled sample {i} has no mask")));
            }
            domain_ids.push(s.domain_id);
            labeled.push(s.labeled);
        }
        Ok(Self {
            images: Tensor::new(vec![indices.len(), 1, size.height, size.width], images),
            masks,
            domain_ids,
            domain_onehot: Tensor::new(vec![indices.len(), k], onehot),
            labeled,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    pub fn distinct_domains(&self) -> usize {
        let mut d = self.domain_ids.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    }
}

/// Stateful episodic sampler. Owns its RNG; not meant to be shared.
pub struct EpisodeSampler {
    rng: ChaCha8Rng,
    source_domains: Vec<usize>,
    by_domain: BTreeMap<usize, Vec<usize>>,
    labeled_by_domain: BTreeMap<usize, Vec<usize>>,
    rotation: usize,
}

impl EpisodeSampler {
    pub fn new(dataset: &Dataset, source_domains: &[usize], seed: u64) -> Result<Self> {
        let mut by_domain = BTreeMap::new();
        let mut labeled_by_domain = BTreeMap::new();
        for &d in source_domains {
            let idx = dataset.indices_of(d);
            labeled_by_domain.insert(d, idx.iter().copied().filter(|&i| dataset.samples[i].labeled).collect());
            by_domain.insert(d, idx);
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            source_domains: source_domains.to_vec(),
            by_domain,
            labeled_by_domain,
            rotation: 0,
        })
    }

    pub fn source_domains(&self) -> &[usize] {
        &self.source_domains
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn split(&mut self) -> Result<EpisodeSplit> {
        split_episode(&self.source_domains, &mut self.rng)
    }

    /// Draws `count` samples of `domain`. With `with_label`, one of them is
    /// a labeled sample whenever the domain has any.
    fn draw(&mut self, domain: usize, count: usize, with_label: bool) -> Result<Vec<usize>> {
        let pool = self.by_domain.get(&domain).map(Vec::as_slice).unwrap_or(&[]);
        if pool.is_empty() {
            return Err(Error::Episode(format!("domain {domain} has no samples")));
        }
        let labeled = self.labeled_by_domain.get(&domain).map(Vec::as_slice).unwrap_or(&[]);
        let mut out = Vec::with_capacity(count);
        if with_label && count > 0 && !labeled.is_empty() {
            out.push(*labeled.choose(&mut self.rng).expect("nonempty"));
        }
        let rest: Vec<usize> = pool.iter().copied().filter(|i| !out.contains(i)).collect();
        let need = count - out.len();
        if rest.len() >= need {
            out.extend(rest.choose_multiple(&mut self.rng, need).copied());
        } else {
            out.extend((0..need).map(|_| *pool.choose(&mut self.rng).expect("nonempty")));
        }
        Ok(out)
    }

    /// Per-domain counts for a meta-train batch: an even share for every
    /// domain with the remainder going to a rotating subset.
    fn composition(&mut self, domains: &[usize], batch_size: usize) -> Vec<usize> {
        let n = domains.len();
        let mut counts = vec![batch_size / n; n];
        for j in 0..batch_size % n {
            counts[(self.rotation + j) % n] += 1;
        }
        self.rotation = (self.rotation + batch_size % n) % n;
        counts
    }

    pub fn sample_batches(&mut self, split: &EpisodeSplit, dataset: &Dataset, batch_size: usize) -> Result<(Batch, Batch)> {
        let train_domains = &split.meta_train_domains;
        if batch_size < train_domains.len() {
            return Err(Error::Episode(format!(
                "batch size {batch_size} cannot cover {} meta-train domains",
                train_domains.len()
            )));
        }
        let counts = self.composition(train_domains, batch_size);
        // Both batches carry at least one labeled sample when their domains
        // have any, so the Dice term is active in every episode.
        let with_labels: Vec<usize> =
            train_domains.iter().copied().filter(|d| self.labeled_by_domain.get(d).is_some_and(|l| !l.is_empty())).collect();
        let seeded = with_labels.choose(&mut self.rng).copied();
        let mut train_idx = Vec::with_capacity(batch_size);
        for (&d, &c) in train_domains.iter().zip(&counts) {
            train_idx.extend(self.draw(d, c, seeded == Some(d))?);
        }
        let test_idx = self.draw(split.meta_test_domain, batch_size, true)?;
        Ok((
            Batch::from_indices(dataset, &train_idx, &self.source_domains)?,
            Batch::from_indices(dataset, &test_idx, &self.source_domains)?,
        ))
    }

    /// Pooled batch over all labeled source samples (supervised baseline).
    pub fn sample_labeled(&mut self, dataset: &Dataset, batch_size: usize) -> Result<Batch> {
        let pool: Vec<usize> = self.by_domain.values().flatten().copied().filter(|&i| dataset.samples[i].labeled).collect();
        if pool.is_empty() {
            return Err(Error::Episode("no labeled source samples".into()));
        }
        let mut idx: Vec<usize> = if pool.len() >= batch_size {
            pool.choose_multiple(&mut self.rng, batch_size).copied().collect()
        } else {
            (0..batch_size).map(|_| *pool.choose(&mut self.rng).expect("nonempty")).collect()
        };
        idx.shuffle(&mut self.rng);
        Batch::from_indices(dataset, &idx, &self.source_domains)
    }
}

// ---- persistence ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    file: String,
    domain_id: usize,
    labeled: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "K")]
    num_domains: usize,
    #[serde(rename = "m")]
    num_classes: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    seed: u64,
    domains: Vec<DomainSpec>,
    samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus `<file>.f32` (little-endian float32 image) and
/// `<file>.u8` (mask) per sample.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &dataset.samples {
        let n = counters.entry(s.domain_id).or_default();
        let file = format!("d{}_{:05}", s.domain_id, n);
        *n += 1;
        let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{file}.f32")), bytes)?;
        let mask = s.mask.as_ref().ok_or_else(|| Error::Dataset {
            path: dir.to_path_buf(),
            reason: format!("sample {file} has no mask to save"),
        })?;
        fs::write(dir.join(format!("{file}.u8")), mask)?;
        records.push(SampleRecord { file, domain_id: s.domain_id, labeled: s.labeled });
    }
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        num_domains: dataset.domains.len(),
        num_classes: dataset.num_classes,
        height: dataset.size.height,
        width: dataset.size.width,
        seed: dataset.seed,
        domains: dataset.domains.clone(),
        samples: records,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bad = |path: PathBuf, reason: String| Error::Dataset { path, reason };
    let text = fs::read_to_string(&manifest_path).map_err(|e| bad(manifest_path.clone(), e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| bad(manifest_path.clone(), e.to_string()))?;
    if m.version != DATASET_FORMAT_VERSION {
        return Err(bad(manifest_path, format!("unsupported format version {}", m.version)));
    }
    if m.domains.len() != m.num_domains {
        return Err(bad(manifest_path, format!("K = {} but {} domain specs listed", m.num_domains, m.domains.len())));
    }
    let size = ImageSize { height: m.height, width: m.width };
    let mut samples = Vec::with_capacity(m.samples.len());
    for rec in &m.samples {
        let img_path = dir.join(format!("{}.f32", rec.file));
        let bytes = fs::read(&img_path).map_err(|e| bad(img_path.clone(), format!("sample {}: {e}", rec.file)))?;
        if bytes.len() != size.pixels() * 4 {
            return Err(bad(
                img_path,
                format!("expected {} bytes for a {}x{} float32 image, found {}", size.pixels() * 4, m.height, m.width, bytes.len()),
            ));
        }
        let image = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mask_path = dir.join(format!("{}.u8", rec.file));
        let mask = fs::read(&mask_path).map_err(|e| bad(mask_path.clone(), format!("sample {}: {e}", rec.file)))?;
        if mask.len() != size.pixels() {
            return Err(bad(mask_path, format!("expected {} mask bytes, found {}", size.pixels(), mask.len())));
        }
        if let Some(&v) = mask.iter().find(|&&v| v as usize >= m.num_classes) {
            return Err(bad(mask_path, format!("mask value {v} >= m = {}", m.num_classes)));
        }
        if !m.domains.iter().any(|d| d.domain_id == rec.domain_id) {
            return Err(bad(manifest_path.clone(), format!("sample {} has unknown domain {}", rec.file, rec.domain_id)));
        }
        samples.push(Sample { image, mask: Some(mask), size, domain_id: rec.domain_id, labeled: rec.labeled });
    }
    Ok(Dataset { size, num_classes: m.num_classes, seed: m.seed, domains: m.domains, samples })
}

/// A four-domain benchmark with distinct scanner-like appearance and
/// population statistics per domain.
pub fn default_domains(num_samples: usize, labeled_fraction: f64) -> Vec<DomainSpec> {
    let r = ParamRange;
    let mk = |id, b: ParamRange, c, g, bias, noise, size, ecc| DomainSpec {
        domain_id: id,
        appearance: Appearance { brightness: b, contrast: c, gamma: g, bias_field: bias, noise_std: noise },
        population: Population { size, eccentricity: ecc },
        num_samples,
        labeled_fraction,
    };
    vec![
        mk(0, r(-0.05, 0.05), r(0.9, 1.1), r(0.9, 1.1), r(0.0, 0.1), r(0.01, 0.03), r(0.9, 1.1), r(0.2, 0.5)),
        mk(1, r(0.1, 0.2), r(0.6, 0.8), r(1.6, 2.2), r(0.1, 0.3), r(0.02, 0.05), r(0.8, 1.0), r(0.3, 0.6)),
        mk(2, r(-0.2, -0.1), r(1.1, 1.4), r(0.5, 0.7), r(0.2, 0.4), r(0.0, 0.02), r(1.0, 1.2), r(0.1, 0.4)),
        mk(3, r(0.0, 0.1), r(0.8, 1.0), r(1.2, 1.5), r(0.3, 0.5), r(0.05, 0.08), r(0.9, 1.3), r(0.4, 0.7)),
    ]
}

//! Synthetic single-channel chips with a controllable confounder.
//!
//! Every chip is `(class template + environment clutter) x speckle + floor`.
//! The template is a fine grating whose orientation encodes the class; the
//! clutter is a coarser grating patch, one orientation and one position on
//! the border ring per environment. In the training split each class prefers
//! its own "home" environment with probability `confound_strength`; in the
//! test split environments are drawn uniformly, independently of the class.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "chips.f32";
const FORMAT: &str = "invtrain-chips-v1";
const TARGET_RADIUS: f64 = 0.3;
const TARGET_PERIOD: f64 = 4.0;
const CLUTTER_RADIUS: f64 = 0.3;
const CLUTTER_PERIOD: f64 = 6.0;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid chip spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor file checksum mismatch: manifest {expected:08x}, file {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("tensor file has {actual} bytes, manifest implies {expected}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipSpec {
    pub side: usize,
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub test_per_class: usize,
    /// Probability that a training chip is drawn in its class's home environment.
    pub confound_strength: f64,
    /// Shape parameter `L` of the unit-mean gamma speckle; `None` disables speckle.
    pub speckle_looks: Option<f64>,
    pub target_amplitude: f64,
    pub clutter_amplitude: f64,
    /// Upper bound of the uniform additive floor.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for ChipSpec {
    fn default() -> Self {
        Self {
            side: 32,
            num_classes: 10,
            shots_per_class: 10,
            test_per_class: 30,
            confound_strength: 0.95,
            speckle_looks: Some(4.0),
            target_amplitude: 1.0,
            clutter_amplitude: 1.0,
            noise_floor: 0.05,
            seed: 0,
        }
    }
}

impl ChipSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(m.to_string()));
        if self.side < 16 || !self.side.is_multiple_of(4) {
            return bad("side must be a multiple of 4 and at least 16");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.shots_per_class < 1 {
            return bad("shots_per_class must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return bad("confound_strength must lie in [0, 1]");
        }
        if let Some(l) = self.speckle_looks {
            if !(l >= 1.0 && l.is_finite()) {
                return bad("speckle_looks must be at least 1");
            }
        }
        if self.noise_floor < 0.0 || self.clutter_amplitude < 0.0 || self.target_amplitude < 0.0 {
            return bad("amplitudes and noise floor must be non-negative");
        }
        Ok(())
    }

    pub fn num_environments(&self) -> usize {
        self.num_classes
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }
}

/// Precomputed class templates and clutter patches for one spec.
#[derive(Debug, Clone)]
pub struct ChipGenerator {
    spec: ChipSpec,
    templates: Vec<Vec<f64>>,
    clutter: Vec<Vec<f64>>,
}

/// Adds `amp * w * (1 + cos(2 pi u / period)) / 2`, a grating along direction
/// `theta` under the flat-topped envelope `w = exp(-r^4 / 2)` of elliptical
/// radius `r`.
#[allow(clippy::too_many_arguments)]
fn add_grating(img: &mut [f64], side: usize, cy: f64, cx: f64, ry: f64, rx: f64, theta: f64, period: f64, amp: f64) {
    let (sin, cos) = theta.sin_cos();
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r2 = (dy / ry).powi(2) + (dx / rx).powi(2);
            let w = (-0.5 * r2 * r2).exp();
            if w < 1e-9 {
                continue;
            }
            let u = dx * cos + dy * sin;
            img[y * side + x] += amp * w * 0.5 * (1.0 + (std::f64::consts::TAU * u / period).cos());
        }
    }
}

impl ChipGenerator {
    /// Class `c` is a fine grating at orientation `pi c / C` filling the
    /// centre; environment `e` is a coarser, larger patch at orientation
    /// `pi (e + 1/2) / C` centred on the border ring.
    pub fn new(spec: &ChipSpec) -> Result<Self, DatagenError> {
        spec.validate()?;
        let side = spec.side;
        let s = side as f64;
        let centre = (s - 1.0) / 2.0;
        let c = spec.num_classes as f64;
        let templates = (0..spec.num_classes)
            .map(|class| {
                let mut img = vec![0.0; side * side];
                let theta = PI * class as f64 / c;
                add_grating(&mut img, side, centre, centre, TARGET_RADIUS * s, TARGET_RADIUS * s, theta, TARGET_PERIOD, spec.target_amplitude);
                img
            })
            .collect();
        let clutter = (0..spec.num_environments())
            .map(|env| {
                let mut img = vec![0.0; side * side];
                let (cy, cx) = ring_position(side, env, spec.num_environments());
                let theta = PI * (env as f64 + 0.5) / c;
                let r = CLUTTER_RADIUS * s;
                add_grating(&mut img, side, cy, cx, r, r, theta, CLUTTER_PERIOD, spec.clutter_amplitude);
                img
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            templates,
            clutter,
        })
    }

    pub fn spec(&self) -> &ChipSpec {
        &self.spec
    }

    pub fn template(&self, class: usize) -> &[f64] {
        &self.templates[class]
    }

    pub fn clutter(&self, env: usize) -> &[f64] {
        &self.clutter[env]
    }

    /// Per-pixel expectation of [`ChipGenerator::generate`] (speckle has mean 1).
    pub fn expected_chip(&self, class: usize, env: usize) -> Vec<f64> {
        self.templates[class]
            .iter()
            .zip(&self.clutter[env])
            .map(|(t, c)| t + c + self.spec.noise_floor / 2.0)
            .collect()
    }

    /// One chip as `[1, side, side]`; all pixels are non-negative.
    pub fn generate<R: Rng + ?Sized>(&self, class: usize, env: usize, rng: &mut R) -> Tensor {
        assert!(class < self.spec.num_classes, "class {class} out of range");
        assert!(env < self.spec.num_environments(), "environment {env} out of range");
        let speckle = self
            .spec
            .speckle_looks
            .map(|l| Gamma::new(l, 1.0 / l).expect("validated speckle shape"));
        let floor = self.spec.noise_floor;
        let data = self.templates[class]
            .iter()
            .zip(&self.clutter[env])
            .map(|(t, c)| {
                let mult = speckle.as_ref().map_or(1.0, |g| g.sample(rng));
                let add = if floor > 0.0 { rng.gen_range(0.0..floor) } else { 0.0 };
                (t + c) * mult + add
            })
            .collect();
        Tensor::new(vec![1, self.spec.side, self.spec.side], data).expect("chip shape")
    }
}

/// Centre of environment `env`'s clutter patch: evenly spaced points on a
/// square track inside the border band.
fn ring_position(side: usize, env: usize, n: usize) -> (f64, f64) {
    let s = side as f64;
    let lo = s / 8.0;
    let hi = s - 1.0 - s / 8.0;
    let edge = hi - lo;
    let t = (env as f64 + 0.5) / n as f64 * 4.0 * edge;
    let (k, r) = ((t / edge).floor(), t % edge);
    match k as usize {
        0 => (lo, lo + r),
        1 => (lo + r, hi),
        2 => (hi, hi - r),
        _ => (hi - r, lo),
    }
}

/// Generates one chip for `spec`; see [`ChipGenerator::generate`].
pub fn generate_chip<R: Rng + ?Sized>(
    class: usize,
    env: usize,
    spec: &ChipSpec,
    rng: &mut R,
) -> Result<Tensor, DatagenError> {
    Ok(ChipGenerator::new(spec)?.generate(class, env, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub split: Split,
    pub label: usize,
    /// Byte offset of the sample in the tensor file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

/// Ground-truth confounder bookkeeping. Only diagnostics read this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub home_environment: Vec<usize>,
    /// Environment actually drawn, indexed by sample id.
    pub environment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: ChipSpec,
    pub tensor_file: String,
    pub sample_shape: Vec<usize>,
    pub splits: SplitSizes,
    pub records: Vec<SampleRecord>,
    pub checksum_crc32: u32,
    pub diagnostics: Diagnostics,
}

/// A sample as seen by training code: no environment information.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub image: Vec<f64>,
}

/// A generated dataset held in memory in its on-disk (single precision) form.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pixels: Vec<f32>,
}

fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id);
    rng
}

fn draw_environment<R: Rng>(rng: &mut R, split: Split, home: usize, spec: &ChipSpec) -> usize {
    let n = spec.num_environments();
    match split {
        Split::Test => rng.gen_range(0..n),
        Split::Train => {
            if rng.gen_bool(spec.confound_strength) {
                home
            } else {
                // uniform over the other environments
                let e = rng.gen_range(0..n - 1);
                if e >= home {
                    e + 1
                } else {
                    e
                }
            }
        }
    }
}

/// Generates the full dataset in memory. Sample `i` uses its own RNG stream,
/// so the result does not depend on generation order.
pub fn generate(spec: &ChipSpec) -> Result<Dataset, DatagenError> {
    let gen = ChipGenerator::new(spec)?;
    let c = spec.num_classes;
    let mut plan = Vec::new();
    for (split, per_class) in [(Split::Train, spec.shots_per_class), (Split::Test, spec.test_per_class)] {
        for label in 0..c {
            for _ in 0..per_class {
                plan.push((split, label));
            }
        }
    }
    let home: Vec<usize> = (0..c).collect();
    let bytes_per = spec.pixels() * 4;
    let mut pixels = Vec::with_capacity(plan.len() * spec.pixels());
    let mut records = Vec::with_capacity(plan.len());
    let mut environment = Vec::with_capacity(plan.len());
    for (i, (split, label)) in plan.into_iter().enumerate() {
        let id = i as u64;
        let mut rng = sample_rng(spec.seed, id);
        let env = draw_environment(&mut rng, split, home[label], spec);
        let chip = gen.generate(label, env, &mut rng);
        pixels.extend(chip.data().iter().map(|v| *v as f32));
        records.push(SampleRecord {
            sample_id: id,
            split,
            label,
            offset: (i * bytes_per) as u64,
        });
        environment.push(env);
    }
    let checksum_crc32 = crc32fast::hash(&to_bytes(&pixels));
    Ok(Dataset {
        manifest: DatasetManifest {
            format: FORMAT.to_string(),
            spec: spec.clone(),
            tensor_file: TENSOR_FILE.to_string(),
            sample_shape: vec![1, spec.side, spec.side],
            splits: SplitSizes {
                train: c * spec.shots_per_class,
                test: c * spec.test_per_class,
            },
            records,
            checksum_crc32,
            diagnostics: Diagnostics {
                home_environment: home,
                environment,
            },
        },
        pixels,
    })
}

/// Generates the dataset and writes `manifest.json` plus the raw tensor file
/// into `dir`.
pub fn generate_dataset(spec: &ChipSpec, dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let ds = generate(spec)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}

fn to_bytes(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<(), DatagenError> {
        write_atomic(&dir.join(&self.manifest.tensor_file), &to_bytes(&self.pixels))?;
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(())
    }

    /// Loads a dataset directory, verifying length and checksum.
    pub fn load(dir: &Path) -> Result<Self, DatagenError> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        manifest.spec.validate()?;
        let bytes = std::fs::read(dir.join(&manifest.tensor_file))?;
        let expected = manifest.records.len() * manifest.spec.pixels() * 4;
        if bytes.len() != expected {
            return Err(DatagenError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let actual = crc32fast::hash(&bytes);
        if actual != manifest.checksum_crc32 {
            return Err(DatagenError::Checksum {
                expected: manifest.checksum_crc32,
                actual,
            });
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { manifest, pixels })
    }

    pub fn spec(&self) -> &ChipSpec {
        &self.manifest.spec
    }

    pub fn raw_pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Samples of one split, widened to double precision.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let n = self.manifest.spec.pixels();
        self.manifest
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| {
                let start = r.offset as usize / 4;
                Sample {
                    id: r.sample_id,
                    label: r.label,
                    image: self.pixels[start..start + n].iter().map(|v| f64::from(*v)).collect(),
                }
            })
            .collect()
    }
}

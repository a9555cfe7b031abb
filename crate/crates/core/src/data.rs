//! Synthetic multimodal dataset with controllable per-sample modality
//! reliability, a raw-tensor ingestion path, and the nearest-centroid
//! separability oracle.
//!
//! Each sample plants a class-coded moving bright blob into the modalities
//! listed as reliable for its class; every other value is Gaussian noise.
//! With probability `corruption_prob` a reliable modality is replaced by pure
//! noise, but never all reliable modalities of one sample, so the label stays
//! recoverable.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Scalar, Tensor};
use crate::{invalid, Error, Result};

/// One multimodal clip: N rank-4 tensors (C_n x T x H x W) plus its label.
/// `corrupted` records which modalities were noised out by the generator;
/// it is empty for externally loaded data.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: usize,
    pub tensors: Vec<Tensor<f32>>,
    pub label: usize,
    pub corrupted: Vec<bool>,
}

impl MultimodalSample {
    /// Modality tensors lifted to the model's scalar type.
    pub fn tensors_as<F: Scalar>(&self) -> Vec<Tensor<F>> {
        self.tensors
            .iter()
            .map(|t| {
                Tensor::new(
                    t.shape().to_vec(),
                    t.data().iter().map(|&v| F::from_f64(v as f64)).collect(),
                )
                .expect("shape preserved")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Channels per modality; its length is the modality count N.
    pub channels: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Per class, the modalities that carry the discriminative pattern.
    pub reliable_map: Vec<Vec<usize>>,
    /// Per-sample, per-reliable-modality probability of replacing the signal
    /// with noise.
    pub corruption_prob: f64,
    pub noise_std: f64,
    /// Brightness of the planted blob; defaults to 3x noise_std.
    pub signal_amp: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Toy geometry mimicking an RGB/IR/Depth rig: N=3, C=(3,1,1), T=4,
    /// H=W=16, K=8. The reliable sets cycle through all non-empty subsets of
    /// the three modalities so reliability genuinely varies by class.
    pub fn toy(num_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        let reliable_map = (0..num_classes)
            .map(|c| {
                let bits = (c % 7) + 1; // 1..=7: every non-empty subset of {0,1,2}
                (0..3).filter(|m| bits >> m & 1 == 1).collect()
            })
            .collect();
        SyntheticSpec {
            channels: vec![3, 1, 1],
            frames: 4,
            height: 16,
            width: 16,
            num_classes,
            samples_per_class,
            reliable_map,
            corruption_prob: 0.3,
            noise_std: 0.3,
            signal_amp: 0.9,
            seed,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(invalid("each modality needs at least one channel"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("tensor dimensions must be positive"));
        }
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(invalid("need at least one class and one sample per class"));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(invalid("corruption_prob must lie in [0, 1]"));
        }
        if self.reliable_map.len() != self.num_classes {
            return Err(invalid("reliable_map must have one entry per class"));
        }
        for (c, rel) in self.reliable_map.iter().enumerate() {
            if rel.is_empty() {
                return Err(invalid(format!("class {c} has no reliable modality")));
            }
            if rel.iter().any(|&m| m >= self.num_modalities()) {
                return Err(invalid(format!("class {c} lists an unknown modality")));
            }
        }
        if self.noise_std <= 0.0 || self.signal_amp <= 0.0 {
            return Err(invalid("noise_std and signal_amp must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[MultimodalSample]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

fn gaussian(rng: &mut impl RngCore) -> f64 {
    // Box-Muller; the loop guards against ln(0)
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

const BLOB: usize = 3;

/// Stamp the class-coded trajectory into one modality tensor (all channels).
/// The blob's start position and per-frame velocity are functions of the
/// class; `jitter` shifts the start by at most one cell so samples within a
/// class differ by more than noise.
fn plant_signal(
    data: &mut [f32],
    channels: usize,
    spec: &SyntheticSpec,
    class: usize,
    jitter: (usize, usize),
) {
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let sy = (class * 5 + jitter.0) % h;
    let sx = (class * 3 + jitter.1) % w;
    let vy = 1 + class % 3;
    let vx = 1 + (class / 3) % 3;
    let amp = spec.signal_amp as f32;
    for t in 0..t_len {
        let cy = (sy + t * vy) % h;
        let cx = (sx + t * vx) % w;
        for c in 0..channels {
            for dy in 0..BLOB {
                for dx in 0..BLOB {
                    let y = (cy + dy) % h;
                    let x = (cx + dx) % w;
                    data[((c * t_len + t) * h + y) * w + x] += amp;
                }
            }
        }
    }
}

fn make_sample(spec: &SyntheticSpec, id: usize, class: usize) -> MultimodalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + id as u64); // stream 0 is left to other consumers
    let jitter = (rng.gen_range(0..2), rng.gen_range(0..2));

    let reliable = &spec.reliable_map[class];
    let mut corrupted = vec![false; spec.num_modalities()];
    for &m in reliable {
        corrupted[m] = rng.gen_bool(spec.corruption_prob);
    }
    if reliable.iter().all(|&m| corrupted[m]) {
        // never corrupt every reliable modality; label must stay recoverable
        let keep = reliable[rng.gen_range(0..reliable.len())];
        corrupted[keep] = false;
    }

    let tensors = spec
        .channels
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let shape = vec![c, spec.frames, spec.height, spec.width];
            let mut data: Vec<f32> = (0..c * spec.frames * spec.height * spec.width)
                .map(|_| (gaussian(&mut rng) * spec.noise_std) as f32)
                .collect();
            if reliable.contains(&m) && !corrupted[m] {
                plant_signal(&mut data, c, spec, class, jitter);
            }
            Tensor::new(shape, data).expect("consistent shape")
        })
        .collect();

    MultimodalSample {
        id,
        tensors,
        label: class,
        corrupted,
    }
}

/// Per-class split sizes by largest remainder: 15% validation (extras to the
/// lowest class indices), 15% test (extras to the highest), remainder train.
fn split_counts(num_classes: usize, per_class: usize) -> Vec<(usize, usize, usize)> {
    let total = num_classes * per_class;
    let floor15 = per_class * 15 / 100;
    let val_extra = (total as f64 * 0.15).round() as usize - num_classes * floor15;
    let test_extra = val_extra;
    (0..num_classes)
        .map(|c| {
            let val = floor15 + usize::from(c < val_extra);
            let test = floor15 + usize::from(c >= num_classes - test_extra);
            (per_class - val - test, val, test)
        })
        .collect()
}

/// Fully deterministic in the spec (including its seed); per-sample derived
/// RNG streams make generation order-independent.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = split_counts(spec.num_classes, spec.samples_per_class);
    let mut ds = Dataset::default();
    for class in 0..spec.num_classes {
        let (n_train, n_val, _) = counts[class];
        for j in 0..spec.samples_per_class {
            let id = class * spec.samples_per_class + j;
            let sample = make_sample(spec, id, class);
            if j < n_train {
                ds.train.push(sample);
            } else if j < n_train + n_val {
                ds.val.push(sample);
            } else {
                ds.test.push(sample);
            }
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// MMT1 tensor files and the TSV manifest
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MMT1";

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * (t.shape().len() + t.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(Error::Io)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut file = std::fs::File::open(path).map_err(Error::Io)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(Error::Io)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 8 || &buf[0..4] != MAGIC {
        return Err(fail("not an MMT1 tensor file"));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() < 8 + 4 * rank {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let payload = &buf[8 + 4 * rank..];
    if payload.len() != 4 * count {
        return Err(fail("payload length disagrees with header shape"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// Write every tensor as an MMT1 file under `dir` and return the path of the
/// TSV manifest (one line per sample: split, label, N file paths).
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(Error::Io)?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = std::fs::File::create(&manifest_path).map_err(Error::Io)?;
    for (split, samples) in ds.splits() {
        for s in samples {
            let mut fields = vec![split.to_string(), s.label.to_string()];
            for (m, t) in s.tensors.iter().enumerate() {
                let name = format!("sample_{:05}_m{}.mmt", s.id, m);
                write_tensor(&dir.join(&name), t)?;
                fields.push(name);
            }
            writeln!(manifest, "{}", fields.join("\t")).map_err(Error::Io)?;
        }
    }
    Ok(manifest_path)
}

/// Relative paths in the manifest resolve against the manifest's directory.
/// All samples must agree on per-modality shapes; the first sample sets the
/// expectation and mismatches are rejected naming the offending file.
pub fn load_raw_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(Error::Io)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::default();
    let mut expected_shapes: Option<Vec<Vec<usize>>> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "manifest line {}: need split, label and at least one path",
                lineno + 1
            )));
        }
        let split = fields[0];
        let label: usize = fields[1].parse().map_err(|_| {
            Error::Format(format!("manifest line {}: bad label {:?}", lineno + 1, fields[1]))
        })?;
        let mut tensors = Vec::with_capacity(fields.len() - 2);
        for raw in &fields[2..] {
            let path = base.join(raw);
            tensors.push(read_tensor(&path)?);
        }
        match &expected_shapes {
            None => {
                expected_shapes = Some(tensors.iter().map(|t| t.shape().to_vec()).collect())
            }
            Some(shapes) => {
                if shapes.len() != tensors.len() {
                    return Err(Error::Format(format!(
                        "manifest line {}: expected {} modalities, got {}",
                        lineno + 1,
                        shapes.len(),
                        tensors.len()
                    )));
                }
                for (m, (t, want)) in tensors.iter().zip(shapes).enumerate() {
                    if t.shape() != want.as_slice() {
                        return Err(Error::Format(format!(
                            "{}: shape {:?} does not match expected {:?}",
                            base.join(fields[2 + m]).display(),
                            t.shape(),
                            want
                        )));
                    }
                }
            }
        }
        let id = ds.train.len() + ds.val.len() + ds.test.len();
        let sample = MultimodalSample {
            id,
            tensors,
            label,
            corrupted: Vec::new(),
        };
        match split {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            "test" => ds.test.push(sample),
            other => {
                return Err(Error::Format(format!(
                    "manifest line {}: unknown split tag {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Nearest-centroid oracle
// ---------------------------------------------------------------------------

/// Classify by distance to per-class mean of the flattened all-modality
/// concatenation. With p=0 this must score 100% on the toy spec — it
/// validates the generator before any model is trained.
pub fn nearest_centroid_accuracy(
    train: &[MultimodalSample],
    eval: &[MultimodalSample],
    num_classes: usize,
) -> Result<f64> {
    if train.is_empty() || eval.is_empty() {
        return Err(invalid("nearest-centroid oracle needs non-empty splits"));
    }
    let flat = |s: &MultimodalSample| -> Vec<f64> {
        s.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v as f64))
            .collect()
    };
    let dim = flat(&train[0]).len();
    let mut centroids = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in train {
        if s.label >= num_classes {
            return Err(invalid(format!("label {} out of range", s.label)));
        }
        let v = flat(s);
        if v.len() != dim {
            return Err(invalid("inconsistent sample dimensions"));
        }
        for (acc, x) in centroids[s.label].iter_mut().zip(&v) {
            *acc += x;
        }
        counts[s.label] += 1;
    }
    for (c, count) in centroids.iter_mut().zip(&counts) {
        if *count > 0 {
            for x in c.iter_mut() {
                *x /= *count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for s in eval {
        let v = flat(s);
        let mut best = (f64::INFINITY, 0usize);
        for (k, c) in centroids.iter().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let d: f64 = c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

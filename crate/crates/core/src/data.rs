//! MNIST IDX parsing, rotated-digit environments and the training stream.
//!
//! An environment is one rotation angle from [`ROTATION_GRID`]. The stream
//! visits every grid rotation except a held-out target once, for a fixed
//! number of steps each; every step draws a fresh batch from the base
//! training images and rotates it by the active angle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Rotation angles (degrees) of the rotated-MNIST benchmark.
pub const ROTATION_GRID: [i32; 7] = [0, 25, 50, 75, 100, 125, 150];

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CENTER: f64 = 13.5;

/// One labeled digit. `env_id` (the rotation in degrees) is bookkeeping for
/// evaluation and diagnostics; nothing on the training path reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f64>,
    pub label: usize,
    pub env_id: i32,
}

/// A set of samples stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    env_ids: Vec<i32>,
}

/// What the optimizer sees of a batch: pixels and labels only.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, env_ids: Vec<i32>) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.len() != env_ids.len() {
            return Err(Error::LengthMismatch {
                what: "batch rows/labels/env ids",
                left: inputs.nrows(),
                right: labels.len().min(env_ids.len()),
            });
        }
        Ok(Batch {
            inputs,
            labels,
            env_ids,
        })
    }

    pub fn empty(width: usize) -> Self {
        Batch {
            inputs: Array2::zeros((0, width)),
            labels: Vec::new(),
            env_ids: Vec::new(),
        }
    }

    pub fn from_samples<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut env_ids = Vec::new();
        let mut width = IMAGE_LEN;
        for s in samples {
            width = s.pixels.len();
            flat.extend_from_slice(&s.pixels);
            labels.push(s.label);
            env_ids.push(s.env_id);
        }
        let inputs = Array2::from_shape_vec((labels.len(), width), flat)
            .expect("samples in a batch share one width");
        Batch {
            inputs,
            labels,
            env_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn env_ids(&self) -> &[i32] {
        &self.env_ids
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            inputs: self.inputs.view(),
            labels: &self.labels,
        }
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            pixels: self.inputs.row(i).to_vec(),
            label: self.labels[i],
            env_id: self.env_ids[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Label counts, indexed by class.
    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Unrotated base images with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "images vs labels",
                left: images.nrows(),
                right: labels.len(),
            });
        }
        if images.ncols() != IMAGE_LEN {
            return Err(Error::Invalid(format!(
                "images have {} pixels, expected {IMAGE_LEN}",
                images.ncols()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keep only the first `cap` images.
    pub fn truncated(&self, cap: usize) -> Dataset {
        let n = cap.min(self.len());
        Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Decoded contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxContents {
    /// Row-major images, pixel bytes scaled to [0, 1].
    Images(Array2<f64>),
    Labels(Vec<usize>),
}

fn read_be_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated(format!("missing {what}")))?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Truncated(format!(
            "header promises {len} payload bytes, stream has {}",
            buf.len()
        )));
    }
    Ok(buf)
}

/// Parse an IDX image (magic 0x803) or label (magic 0x801) stream.
pub fn parse_idx<R: Read>(mut r: R) -> Result<IdxContents> {
    let magic = read_be_u32(&mut r, "magic")?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let n = read_be_u32(&mut r, "image count")? as usize;
            let rows = read_be_u32(&mut r, "row count")?;
            let cols = read_be_u32(&mut r, "column count")?;
            if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
                return Err(Error::ImageDims { rows, cols });
            }
            let bytes = read_payload(&mut r, n * IMAGE_LEN)?;
            let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxContents::Images(
                Array2::from_shape_vec((n, IMAGE_LEN), pixels).expect("payload length checked"),
            ))
        }
        IDX_LABELS_MAGIC => {
            let n = read_be_u32(&mut r, "label count")? as usize;
            let bytes = read_payload(&mut r, n)?;
            if let Some(&b) = bytes.iter().find(|&&b| b as usize >= NUM_CLASSES) {
                return Err(Error::LabelOutOfRange {
                    label: b as usize,
                    classes: NUM_CLASSES,
                });
            }
            Ok(IdxContents::Labels(bytes.iter().map(|&b| b as usize).collect()))
        }
        found => Err(Error::UnexpectedMagic {
            expected: IDX_IMAGES_MAGIC,
            found,
        }),
    }
}

fn open_idx(path: &Path) -> Result<IdxContents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_idx(BufReader::new(file))
}

fn find_file(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            )
        })
}

fn load_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images_path = find_file(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    )?;
    let labels_path = find_file(
        dir,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    )?;
    let images = match open_idx(&images_path)? {
        IdxContents::Images(m) => m,
        IdxContents::Labels(_) => {
            return Err(Error::UnexpectedMagic {
                expected: IDX_IMAGES_MAGIC,
                found: IDX_LABELS_MAGIC,
            })
        }
    };
    let labels = match open_idx(&labels_path)? {
        IdxContents::Labels(l) => l,
        IdxContents::Images(_) => {
            return Err(Error::UnexpectedMagic {
                expected: IDX_LABELS_MAGIC,
                found: IDX_IMAGES_MAGIC,
            })
        }
    };
    Dataset::new(images, labels)
}

/// The four MNIST files under their conventional names.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist> {
    let dir = dir.as_ref();
    Ok(Mnist {
        train: load_split(dir, "train")?,
        test: load_split(dir, "t10k")?,
    })
}

/// Precomputed bilinear taps of an inverse-mapped rotation about the image
/// center (13.5, 13.5). Positive angles turn the digit counter-clockwise as
/// displayed (row index growing downward).
#[derive(Debug, Clone)]
pub struct RotationMap {
    taps: Vec<[(usize, f64); 4]>,
}

impl RotationMap {
    pub fn new(degrees: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let side = IMAGE_SIDE as isize;
        let taps = (0..IMAGE_LEN)
            .map(|out| {
                let dy = (out / IMAGE_SIDE) as f64 - CENTER;
                let dx = (out % IMAGE_SIDE) as f64 - CENTER;
                let sx = CENTER + dx * cos - dy * sin;
                let sy = CENTER + dx * sin + dy * cos;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut t = [(0usize, 0.0f64); 4];
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1, (1.0 - fy) * fx),
                    (y0 + 1, x0, fy * (1.0 - fx)),
                    (y0 + 1, x0 + 1, fy * fx),
                ];
                for (slot, &(y, x, w)) in t.iter_mut().zip(&corners) {
                    if (0..side).contains(&y) && (0..side).contains(&x) {
                        *slot = ((y * side + x) as usize, w);
                    }
                }
                t
            })
            .collect();
        RotationMap { taps }
    }

    pub fn apply_into(&self, src: ArrayView1<'_, f64>, dst: &mut [f64]) {
        for (out, taps) in dst.iter_mut().zip(&self.taps) {
            let v: f64 = taps.iter().map(|&(i, w)| if w == 0.0 { 0.0 } else { w * src[i] }).sum();
            *out = v.clamp(0.0, 1.0);
        }
    }
}

/// Rotate one 28x28 image (row-major, 784 values).
///
/// # Panics
/// If `pixels` is not 784 long.
pub fn rotate_image(pixels: &[f64], degrees: f64) -> Vec<f64> {
    assert_eq!(pixels.len(), IMAGE_LEN, "rotate_image expects a 28x28 image");
    let mut out = vec![0.0; IMAGE_LEN];
    RotationMap::new(degrees).apply_into(ArrayView1::from(pixels), &mut out);
    out
}

/// Order in which the training rotations are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnvOrder {
    /// Ascending degrees.
    #[default]
    Ascending,
    /// A permutation drawn from the schedule seed.
    Shuffled,
}

impl std::str::FromStr for EnvOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(EnvOrder::Ascending),
            "shuffled" | "shuffle" => Ok(EnvOrder::Shuffled),
            other => Err(Error::Config(format!("unknown environment order {other:?}"))),
        }
    }
}

impl std::fmt::Display for EnvOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvOrder::Ascending => "ascending",
            EnvOrder::Shuffled => "shuffled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub degrees: i32,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentSchedule {
    pub segments: Vec<Segment>,
    pub held_out_degrees: i32,
    pub seed: u64,
}

impl EnvironmentSchedule {
    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps).sum()
    }

    /// Rotation active at step `t`.
    pub fn rotation_at(&self, t: usize) -> Result<i32> {
        let mut start = 0;
        for seg in &self.segments {
            if t < start + seg.steps {
                return Ok(seg.degrees);
            }
            start += seg.steps;
        }
        Err(Error::StepOutOfRange {
            step: t,
            total: self.total_steps(),
        })
    }

    pub fn training_rotations(&self) -> Vec<i32> {
        self.segments.iter().map(|s| s.degrees).collect()
    }
}

pub fn build_schedule(
    grid: &[i32],
    held_out: i32,
    steps_per_env: usize,
    seed: u64,
    order: EnvOrder,
) -> Result<EnvironmentSchedule> {
    if steps_per_env == 0 {
        return Err(Error::Schedule("steps_per_env must be positive".into()));
    }
    if let Some(d) = grid.iter().find(|d| !ROTATION_GRID.contains(d)) {
        return Err(Error::Schedule(format!("rotation {d} is not on the grid")));
    }
    if !grid.contains(&held_out) {
        return Err(Error::Schedule(format!(
            "held-out rotation {held_out} is not in the grid"
        )));
    }
    let mut rotations: Vec<i32> = grid.iter().copied().filter(|&d| d != held_out).collect();
    rotations.sort_unstable();
    rotations.dedup();
    if rotations.is_empty() {
        return Err(Error::Schedule("no training rotations left".into()));
    }
    if order == EnvOrder::Shuffled {
        rotations.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(EnvironmentSchedule {
        segments: rotations
            .into_iter()
            .map(|degrees| Segment {
                degrees,
                steps: steps_per_env,
            })
            .collect(),
        held_out_degrees: held_out,
        seed,
    })
}

/// Generator for the batch at step `t`: seeded by the schedule seed, on
/// stream `t`, so batches are independent of call order.
pub fn step_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Indices of the base images used at step `t` (uniform, no repeats).
pub fn batch_indices(seed: u64, t: usize, base_len: usize, batch_size: usize) -> Vec<usize> {
    rand::seq::index::sample(&mut step_rng(seed, t), base_len, batch_size).into_vec()
}

/// The batch observed at step `t`.
pub fn next_batch(
    schedule: &EnvironmentSchedule,
    base: &Dataset,
    t: usize,
    batch_size: usize,
) -> Result<Batch> {
    let degrees = schedule.rotation_at(t)?;
    if batch_size == 0 || batch_size > base.len() {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} not in 1..={}",
            base.len()
        )));
    }
    let map = RotationMap::new(f64::from(degrees));
    let idx = batch_indices(schedule.seed, t, base.len(), batch_size);
    let mut inputs = Array2::zeros((batch_size, IMAGE_LEN));
    for (mut row, &i) in inputs.rows_mut().into_iter().zip(&idx) {
        map.apply_into(base.images.row(i), row.as_slice_mut().unwrap());
    }
    let labels = idx.iter().map(|&i| base.labels[i]).collect();
    Batch::new(inputs, labels, vec![degrees; batch_size])
}

/// Rotate the whole base set by `degrees`.
pub fn rotated_set(base: &Dataset, degrees: i32) -> Batch {
    let map = RotationMap::new(f64::from(degrees));
    let mut inputs = Array2::zeros((base.len(), IMAGE_LEN));
    for (mut row, src) in inputs.rows_mut().into_iter().zip(base.images.rows()) {
        map.apply_into(src, row.as_slice_mut().unwrap());
    }
    Batch {
        inputs,
        labels: base.labels.clone(),
        env_ids: vec![degrees; base.len()],
    }
}

/// One rotated evaluation set per grid rotation, held-out one included.
pub fn test_sets(grid: &[i32], base_test: &Dataset) -> BTreeMap<i32, Batch> {
    grid.iter().map(|&d| (d, rotated_set(base_test, d))).collect()
}

//! Synthetic vessel-like corpus and dataset files.
//!
//! Each image holds one bright curvilinear "vessel" (a quadratic Bézier
//! chain) on a tinted noisy background. Class 1 of the tortuosity task is a
//! high-curvature chain whose total turning exceeds a threshold; the lesion
//! task adds a bright disk.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::HeadMode;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.stk";
const LABELS: &str = "labels.stk";
/// Per-channel tint of background and vessel (reddish fundus look).
const TINT: [f64; 3] = [1.0, 0.6, 0.4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    /// straight vs tortuous vessel
    Tortuosity,
    /// lesion absent vs present
    Lesion,
    /// both as a two-label multi-hot target
    Both,
}

impl SynthTask {
    pub fn classes(self) -> Vec<String> {
        let names: &[&str] = match self {
            SynthTask::Tortuosity => &["straight", "tortuous"],
            SynthTask::Lesion => &["lesion_absent", "lesion_present"],
            SynthTask::Both => &["tortuous", "lesion"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn head(self) -> HeadMode {
        match self {
            SynthTask::Both => HeadMode::Multilabel,
            _ => HeadMode::Multiclass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub hw: usize,
    pub n: usize,
    /// Index of the first generated image; disjoint ranges give disjoint
    /// images from the same seed.
    pub offset: usize,
    pub task: SynthTask,
    /// Inclusive range of control points per vessel.
    pub control_points: [usize; 2],
    /// Vessel width in pixels.
    pub width: f64,
    pub intensity: f64,
    pub background: f64,
    pub noise_sigma: f64,
    /// Minimum total turning (radians) of a tortuous vessel.
    pub turning_threshold: f64,
    pub lesion_radius: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hw: 64,
            n: 200,
            offset: 0,
            task: SynthTask::Tortuosity,
            control_points: [3, 6],
            width: 2.0,
            intensity: 0.5,
            background: 0.3,
            noise_sigma: 0.05,
            turning_threshold: PI,
            lesion_radius: 3.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hw == 0 || self.n == 0 {
            return Err(Error::config("synth", "hw and n must be positive"));
        }
        let [lo, hi] = self.control_points;
        if lo < 3 || hi < lo {
            return Err(Error::config("synth.control_points", format!("need 3 <= min <= max, got [{lo}, {hi}]")));
        }
        if !(self.width >= 0.0 && self.noise_sigma >= 0.0 && self.lesion_radius >= 0.0) {
            return Err(Error::config("synth", "width, noise_sigma and lesion_radius must be non-negative"));
        }
        Ok(())
    }
}

/// Ground truth of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleLabel {
    pub tortuous: bool,
    pub lesion: bool,
}

type Point = [f64; 2];

fn quad_bezier(a: Point, c: Point, b: Point, t: f64) -> Point {
    let u = 1.0 - t;
    [u * u * a[0] + 2.0 * u * t * c[0] + t * t * b[0], u * u * a[1] + 2.0 * u * t * c[1] + t * t * b[1]]
}

/// Dense polyline through the chain: segment `i` runs between midpoints of
/// the control polygon with `ctrl[i]` as its control point; the first and
/// last segments start and end at the outer control points.
fn bezier_chain(ctrl: &[Point], samples_per_segment: usize) -> Vec<Point> {
    let mid = |i: usize| [(ctrl[i][0] + ctrl[i + 1][0]) / 2.0, (ctrl[i][1] + ctrl[i + 1][1]) / 2.0];
    let n = ctrl.len();
    let mut out = vec![ctrl[0]];
    for i in 1..n - 1 {
        let a = if i == 1 { ctrl[0] } else { mid(i - 1) };
        let b = if i == n - 2 { ctrl[n - 1] } else { mid(i) };
        for s in 1..=samples_per_segment {
            out.push(quad_bezier(a, ctrl[i], b, s as f64 / samples_per_segment as f64));
        }
    }
    out
}

/// Sum of absolute heading changes along a polyline.
pub fn total_turning(path: &[Point]) -> f64 {
    let headings: Vec<f64> = path
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[1][0] - w[0][0]).atan2(w[1][1] - w[0][1]))
        .collect();
    headings
        .windows(2)
        .map(|h| {
            let mut d = h[1] - h[0];
            while d > PI {
                d -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
            }
            d.abs()
        })
        .sum()
}

/// Moves the bounding box of `ctrl` onto `center` and shrinks it about
/// that point until it spans at most 90% of the frame. Uniform scaling
/// keeps every turning angle.
fn fit_in_frame(ctrl: &mut [Point], hw: f64, center: Point) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in ctrl.iter() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if extent > 0.9 * hw { 0.9 * hw / extent } else { 1.0 };
    for p in ctrl.iter_mut() {
        for a in 0..2 {
            let mid = (lo[a] + hi[a]) / 2.0;
            p[a] = center[a] + (p[a] - mid) * scale;
        }
    }
    // jitter may push an edge out; pull the box back inside
    for a in 0..2 {
        let (mn, mx) = ctrl.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), p| (mn.min(p[a]), mx.max(p[a])));
        let shift = if mn < 0.0 { -mn } else if mx > hw - 1.0 { hw - 1.0 - mx } else { 0.0 };
        ctrl.iter_mut().for_each(|p| p[a] += shift);
    }
}

/// Vessel centerline as a dense polyline in (row, col) pixel coordinates.
fn vessel_path(spec: &SynthSpec, tortuous: bool, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let hw = spec.hw as f64;
    let length = 0.8 * hw;
    let mut last = Vec::new();
    for _ in 0..1000 {
        let count = rng.gen_range(spec.control_points[0]..=spec.control_points[1]);
        let seg = length / (count - 1) as f64;
        let mut heading = rng.gen_range(0.0..2.0 * PI);
        let center = [hw / 2.0 + rng.gen_range(-0.1..0.1) * hw, hw / 2.0 + rng.gen_range(-0.1..0.1) * hw];
        let mut p = [center[0] - 0.5 * length * heading.cos(), center[1] - 0.5 * length * heading.sin()];
        let mut ctrl = vec![p];
        for _ in 1..count {
            p = [p[0] + seg * heading.cos(), p[1] + seg * heading.sin()];
            ctrl.push(p);
            heading += if tortuous {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(PI / 3.0..2.0 * PI / 3.0)
            } else {
                rng.gen_range(-PI / 12.0..PI / 12.0)
            };
        }
        fit_in_frame(&mut ctrl, hw, center);
        let path = bezier_chain(&ctrl, 64);
        if !tortuous || total_turning(&path) > spec.turning_threshold {
            return path;
        }
        last = path;
    }
    last
}

/// Renders one `[3, hw, hw]` image in `[0, 1]`.
pub fn gen_image(spec: &SynthSpec, label: SampleLabel, rng: &mut ChaCha8Rng) -> Tensor {
    let hw = spec.hw;
    let path = vessel_path(spec, label.tortuous, rng);
    let mut mask = vec![false; hw * hw];
    let r = spec.width / 2.0;
    // resample the polyline at quarter-pixel spacing
    let mut pts = Vec::new();
    for w in path.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        let steps = (d * 4.0).ceil().max(1.0) as usize;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            pts.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
        }
    }
    for p in &pts {
        let (r0, r1) = ((p[0] - r).floor().max(0.0) as usize, ((p[0] + r).ceil().max(0.0) as usize).min(hw));
        let (c0, c1) = ((p[1] - r).floor().max(0.0) as usize, ((p[1] + r).ceil().max(0.0) as usize).min(hw));
        for y in r0..r1 {
            for x in c0..c1 {
                let (dy, dx) = (y as f64 + 0.5 - p[0], x as f64 + 0.5 - p[1]);
                if dy * dy + dx * dx < r * r {
                    mask[y * hw + x] = true;
                }
            }
        }
    }
    let lesion = label.lesion.then(|| {
        let m = spec.lesion_radius + 2.0;
        [rng.gen_range(m..hw as f64 - m), rng.gen_range(m..hw as f64 - m)]
    });
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
    let mut data = vec![0.0; 3 * hw * hw];
    for (c, tint) in TINT.iter().enumerate() {
        for i in 0..hw * hw {
            let mut v = spec.background * tint;
            if mask[i] {
                v += spec.intensity * tint;
            }
            if let Some(q) = lesion {
                let (dy, dx) = ((i / hw) as f64 + 0.5 - q[0], (i % hw) as f64 + 0.5 - q[1]);
                if c < 2 && dy * dy + dx * dx < spec.lesion_radius * spec.lesion_radius {
                    v += 0.4;
                }
            }
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            data[c * hw * hw + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, hw, hw], data).expect("consistent shape")
}

/// Targets of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    MultiHot(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::MultiHot(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::MultiHot(v) => Labels::MultiHot(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    fn to_tensor(&self) -> Tensor {
        match self {
            Labels::Classes(v) => Tensor::new(&[v.len()], v.iter().map(|&c| c as f64).collect()),
            Labels::MultiHot(v) => {
                let l = v.first().map_or(0, |r| r.len());
                Tensor::new(&[v.len(), l], v.iter().flatten().map(|&b| b as u8 as f64).collect())
            }
        }
        .expect("non-empty labels")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Labels,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hw(&self) -> [usize; 2] {
        let s = self.images.shape();
        [s[2], s[3]]
    }

    pub fn head(&self) -> HeadMode {
        match self.labels {
            Labels::Classes(_) => HeadMode::Multiclass,
            Labels::MultiHot(_) => HeadMode::Multilabel,
        }
    }

    /// Images `[B,3,H,W]` and labels at `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Labels) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new(&[idx.len(), s[1], s[2], s[3]], data).expect("non-empty batch");
        (images, self.labels.select(idx))
    }

    /// One image as `[1,3,H,W]`.
    pub fn image(&self, i: usize) -> Tensor {
        self.batch(&[i]).0
    }
}

/// Applies one of the eight symmetries of the square to each image of a
/// `[N, C, H, H]` batch: `ops[i] & 3` quarter turns, then a horizontal
/// mirror when `ops[i] & 4` is set.
pub fn dihedral(images: &Tensor, ops: &[u8]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] || ops.len() != s[0] {
        return Err(Error::shape(format!("dihedral needs [N,C,H,H] and N ops, got {s:?} and {}", ops.len())));
    }
    let (c, n) = (s[1], s[2]);
    let plane = n * n;
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    for (b, &k) in ops.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let (mut sy, mut sx) = (y, x);
                for _ in 0..(k & 3) {
                    (sy, sx) = (sx, n - 1 - sy);
                }
                if k & 4 != 0 {
                    sx = n - 1 - sx;
                }
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    out[base + y * n + x] = src[base + sy * n + sx];
                }
            }
        }
    }
    Tensor::new(s, out)
}

/// Generates `spec.n` images with balanced labels: the tortuosity bit
/// alternates with the index, the lesion bit with every second index for
/// the two-label task.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.n * 3 * spec.hw * spec.hw);
    let mut classes = Vec::new();
    let mut multi = Vec::new();
    for k in 0..spec.n {
        let i = spec.offset + k;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let label = match spec.task {
            SynthTask::Tortuosity => SampleLabel { tortuous: i % 2 == 1, lesion: false },
            SynthTask::Lesion => SampleLabel { tortuous: rng.gen_bool(0.5), lesion: i % 2 == 1 },
            SynthTask::Both => SampleLabel { tortuous: i % 2 == 1, lesion: (i / 2) % 2 == 1 },
        };
        data.extend(gen_image(spec, label, &mut rng).into_data());
        match spec.task {
            SynthTask::Tortuosity => classes.push(label.tortuous as usize),
            SynthTask::Lesion => classes.push(label.lesion as usize),
            SynthTask::Both => multi.push(vec![label.tortuous, label.lesion]),
        }
    }
    let labels = if spec.task == SynthTask::Both { Labels::MultiHot(multi) } else { Labels::Classes(classes) };
    Ok(Dataset {
        images: Tensor::new(&[spec.n, 3, spec.hw, spec.hw], data)?,
        labels,
        classes: spec.task.classes(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub hw: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub head: HeadMode,
    pub images: String,
    pub labels: String,
    /// Hex SHA-256 of the images and labels files, in that order.
    pub sha256: [String; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `images.stk`, `labels.stk` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path, seed: u64, synth: Option<&SynthSpec>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let images = ds.images.to_stk1_bytes();
    let labels = ds.labels.to_tensor().to_stk1_bytes();
    std::fs::write(dir.join(IMAGES), &images)?;
    std::fs::write(dir.join(LABELS), &labels)?;
    let manifest = Manifest {
        n: ds.len(),
        hw: ds.hw()[0],
        classes: ds.classes.clone(),
        seed,
        head: ds.head(),
        images: IMAGES.into(),
        labels: LABELS.into(),
        sha256: [sha256_hex(&images), sha256_hex(&labels)],
        synth: synth.cloned(),
    };
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

/// Generates and writes a corpus.
pub fn gen_dataset(spec: &SynthSpec, dir: &Path) -> Result<(Dataset, Manifest)> {
    let ds = generate(spec)?;
    let manifest = save_dataset(&ds, dir, spec.seed, Some(spec))?;
    Ok((ds, manifest))
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from its directory or manifest path, verifying checksums.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let corrupt = |msg: String| Error::CorruptManifest(format!("{}: {msg}", mpath.display()));
    let text = std::fs::read_to_string(&mpath)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let read = |name: &str, sum: &str| -> Result<Tensor> {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| corrupt(format!("{name}: {e}")))?;
        if sha256_hex(&bytes) != sum {
            return Err(corrupt(format!("{name}: checksum mismatch")));
        }
        Tensor::read_stk1(BufReader::new(&bytes[..])).map_err(|e| corrupt(format!("{name}: {e}")))
    };
    let images = read(&m.images, &m.sha256[0])?;
    let labels = read(&m.labels, &m.sha256[1])?;
    if images.shape() != [m.n, 3, m.hw, m.hw] {
        return Err(corrupt(format!("images shape {:?} disagrees with n={} hw={}", images.shape(), m.n, m.hw)));
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(corrupt("image values outside [0, 1]".into()));
    }
    let labels = match m.head {
        HeadMode::Multiclass => {
            if labels.shape() != [m.n] {
                return Err(corrupt(format!("labels shape {:?}, expected [{}]", labels.shape(), m.n)));
            }
            let mut v = Vec::with_capacity(m.n);
            for &x in labels.data() {
                if x.fract() != 0.0 || x < 0.0 || x as usize >= m.classes.len() {
                    return Err(corrupt(format!("label {x} is not a class index")));
                }
                v.push(x as usize);
            }
            Labels::Classes(v)
        }
        HeadMode::Multilabel => {
            if labels.shape() != [m.n, m.classes.len()] {
                return Err(corrupt(format!("labels shape {:?}, expected [{}, {}]", labels.shape(), m.n, m.classes.len())));
            }
            Labels::MultiHot(labels.data().chunks(m.classes.len()).map(|r| r.iter().map(|&x| x != 0.0).collect()).collect())
        }
    };
    Ok(Dataset { images, labels, classes: m.classes })
}

//! Synthetic non-iid client datasets and the `FEDS` dataset file format.
//!
//! Segmentation clients draw grayscale images with one elliptical foreground
//! region. Each client applies its own shift (rotation of where and how the
//! ellipse sits, brightness offset, foreground scale, label noise), and every
//! shift is scaled by `1 − similarity`, so `similarity = 1` makes all clients
//! identically distributed. Classification clients draw Gaussian-mixture
//! features whose class means are rotated per client. Quadratic clients hold
//! noisy copies of a per-client center and drive the closed-form oracles.
//!
//! Shift parameters come from golden-ratio sequences offset by the seed, so
//! they depend only on `(seed, client_id, similarity)` and stay well spread
//! for any number of clients.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, ParamVector, RngStream};
use crate::models::Batch;

pub const MAGIC: &[u8; 4] = b"FEDS";
pub const FORMAT_VERSION: u8 = 1;

/// Low-similarity ("retinal-like") preset.
pub const LOW_SIMILARITY: f64 = 0.2;
/// High-similarity ("prostate-like") preset.
pub const HIGH_SIMILARITY: f64 = 0.8;
/// Per-client example counts with the same proportions as the retinal table.
pub const TABLE1_SIZES: [usize; 6] = [50, 98, 47, 230, 80, 400];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Radians.
    pub rotation: f64,
    pub brightness: f64,
    pub fg_scale: f64,
    pub label_noise: f64,
}

impl ShiftParams {
    pub fn none() -> Self {
        ShiftParams {
            rotation: 0.0,
            brightness: 0.0,
            fg_scale: 1.0,
            label_noise: 0.0,
        }
    }
}

/// Generator settings. `Default` gives the 16×16 segmentation setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub similarity: f64,
    pub task: Task,
    pub side: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub quad_dim: usize,
    /// Per-example noise on quadratic targets.
    pub quad_noise: f64,
    /// Standard deviation of quadratic centers.
    pub quad_spread: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            sizes: TABLE1_SIZES.to_vec(),
            similarity: LOW_SIMILARITY,
            task: Task::Segmentation,
            side: 16,
            classes: 4,
            feature_dim: 8,
            quad_dim: 4,
            quad_noise: 0.0,
            quad_spread: 1.0,
        }
    }
}

/// A contiguous block of examples in stored (single precision) form.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub ids: Vec<u32>,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
}

impl Split {
    fn with_capacity(n: usize, in_w: usize, t_w: usize) -> Self {
        Split {
            ids: Vec::with_capacity(n),
            inputs: Vec::with_capacity(n * in_w),
            targets: Vec::with_capacity(n * t_w),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    /// 1-based.
    pub client_id: usize,
    pub shift: ShiftParams,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationDataset {
    pub config: GenConfig,
    pub clients: Vec<ClientShard>,
}

/// `(train, val, test)` sizes: half (rounded down) to training, the rest
/// split between validation and test with test taking the odd example.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n / 2;
    let val = (n - train) / 2;
    (train, val, n - train - val)
}

impl FederationDataset {
    pub fn k(&self) -> usize {
        self.clients.len()
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn input_width(&self) -> usize {
        input_width(&self.config)
    }

    pub fn target_width(&self) -> usize {
        target_width(&self.config)
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }

    /// Drops one client (1-based id) and renumbers the rest `1..K−1` in order.
    pub fn without_client(&self, client_id: usize) -> Result<(FederationDataset, ClientShard)> {
        if client_id == 0 || client_id > self.k() {
            return Err(Error::invalid(format!(
                "client {client_id} out of range 1..={}",
                self.k()
            )));
        }
        let mut rest = self.clone();
        let held = rest.clients.remove(client_id - 1);
        for (i, c) in rest.clients.iter_mut().enumerate() {
            c.client_id = i + 1;
        }
        rest.config.sizes.remove(client_id - 1);
        Ok((rest, held))
    }
}

fn input_width(cfg: &GenConfig) -> usize {
    match cfg.task {
        Task::Segmentation => cfg.side * cfg.side,
        Task::Classification => cfg.feature_dim,
        Task::Quadratic => 1,
    }
}

fn target_width(cfg: &GenConfig) -> usize {
    match cfg.task {
        Task::Segmentation => cfg.side * cfg.side,
        Task::Classification => cfg.classes,
        Task::Quadratic => cfg.quad_dim,
    }
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Seed-dependent phase in [0, 1) for the golden-ratio sequences.
fn phase(seed: u64, purpose: &str) -> f64 {
    RngStream::new(seed, purpose, 0, 0).rng().random::<f64>()
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Shift of one client; all components vanish at `similarity = 1`.
pub fn shift_params(seed: u64, client_id: usize, similarity: f64) -> ShiftParams {
    let f = 1.0 - similarity;
    let k = client_id as f64;
    let u_rot = frac(phase(seed, "shift-rotation") + GOLDEN * k);
    let u_bright = frac(phase(seed, "shift-brightness") + GOLDEN * k);
    let mut r = RngStream::new(seed, "shift-jitter", client_id as u64, 0).rng();
    let u_scale: f64 = r.random_range(-1.0..1.0);
    let u_noise: f64 = r.random();
    ShiftParams {
        rotation: f * std::f64::consts::TAU * u_rot,
        brightness: f * 0.6 * (2.0 * u_bright - 1.0),
        fg_scale: 1.0 + f * 0.35 * u_scale,
        label_noise: f * 0.02 * u_noise,
    }
}

fn validate(cfg: &GenConfig) -> Result<()> {
    if cfg.sizes.len() < 2 {
        return Err(Error::invalid("a federation needs at least two clients"));
    }
    if let Some(n) = cfg.sizes.iter().find(|n| **n < 4) {
        return Err(Error::invalid(format!(
            "client size {n} is too small to split (minimum 4)"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.similarity) {
        return Err(Error::invalid(format!(
            "similarity must be in [0, 1], got {}",
            cfg.similarity
        )));
    }
    match cfg.task {
        Task::Segmentation if cfg.side < 4 => Err(Error::invalid("image side must be at least 4")),
        Task::Classification if cfg.classes < 2 || cfg.feature_dim < 2 => {
            Err(Error::invalid("classification needs >= 2 classes and >= 2 features"))
        }
        Task::Quadratic if cfg.quad_dim == 0 => Err(Error::invalid("quadratic dimension must be positive")),
        _ => Ok(()),
    }
}

pub fn generate_federation(seed: u64, k: usize, sizes: &[usize], similarity: f64, task: Task) -> Result<FederationDataset> {
    if k != sizes.len() {
        return Err(Error::invalid(format!("K = {k} but {} sizes given", sizes.len())));
    }
    generate(&GenConfig {
        seed,
        sizes: sizes.to_vec(),
        similarity,
        task,
        ..GenConfig::default()
    })
}

/// Per-client quadratic centers, `N(0, spread²)` per coordinate.
pub fn quadratic_centers(cfg: &GenConfig) -> Vec<ParamVector> {
    (1..=cfg.sizes.len())
        .map(|k| {
            let mut r = RngStream::new(cfg.seed, "quad-center", k as u64, 0).rng();
            ParamVector::from_vec(
                (0..cfg.quad_dim)
                    .map(|_| cfg.quad_spread * r.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect()
}

pub fn generate(cfg: &GenConfig) -> Result<FederationDataset> {
    validate(cfg)?;
    let (in_w, t_w) = (input_width(cfg), target_width(cfg));
    let centers = (cfg.task == Task::Quadratic).then(|| quadratic_centers(cfg));
    let mut clients = Vec::with_capacity(cfg.sizes.len());
    for (idx, &n) in cfg.sizes.iter().enumerate() {
        let client_id = idx + 1;
        let shift = match cfg.task {
            Task::Quadratic => ShiftParams::none(),
            _ => shift_params(cfg.seed, client_id, cfg.similarity),
        };
        let (n_train, n_val, n_test) = split_sizes(n);
        // Example order is shuffled once per client, then cut into splits.
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut RngStream::new(cfg.seed, "split", client_id as u64, 0).rng());
        let mut splits = [
            Split::with_capacity(n_train, in_w, t_w),
            Split::with_capacity(n_val, in_w, t_w),
            Split::with_capacity(n_test, in_w, t_w),
        ];
        for (pos, &local) in order.iter().enumerate() {
            let split = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
            let mut er = RngStream::new(cfg.seed, "example", client_id as u64, u64::from(local)).rng();
            let s = &mut splits[split];
            // Globally unique id: client in the high bits.
            s.ids.push(((client_id as u32) << 20) | local);
            match cfg.task {
                Task::Segmentation => draw_image(cfg.side, &shift, &mut er, &mut s.inputs, &mut s.targets),
                Task::Classification => draw_point(cfg, &shift, &mut er, &mut s.inputs, &mut s.targets),
                Task::Quadratic => {
                    s.inputs.push(0.0);
                    let c = &centers.as_ref().unwrap()[idx];
                    for v in c.iter() {
                        let noise: f64 = if cfg.quad_noise > 0.0 {
                            cfg.quad_noise * er.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        s.targets.push((v + noise) as f32);
                    }
                }
            }
        }
        let [train, val, test] = splits;
        clients.push(ClientShard {
            client_id,
            shift,
            train,
            val,
            test,
        });
    }
    Ok(FederationDataset {
        config: cfg.clone(),
        clients,
    })
}

const BACKGROUND: f64 = 0.25;
const CONTRAST: f64 = 0.35;
const PIXEL_NOISE: f64 = 0.08;
const POOL_SCALE: f64 = 0.1;

fn draw_image<R: Rng>(side: usize, shift: &ShiftParams, r: &mut R, img: &mut Vec<f32>, mask: &mut Vec<f32>) {
    let s = side as f64;
    let c0 = (s - 1.0) / 2.0;
    // Client rotation decides where the ellipse tends to sit and how it is
    // oriented; both carry per-image jitter.
    let radius = 0.2 * s;
    let cx = c0 + radius * shift.rotation.cos() + r.random_range(-0.12..0.12) * s;
    let cy = c0 + radius * shift.rotation.sin() + r.random_range(-0.12..0.12) * s;
    let a = s * r.random_range(0.14..0.24) * shift.fg_scale;
    let b = a * r.random_range(0.6..1.0);
    let theta = shift.rotation + r.random_range(-0.3..0.3);
    let (sin, cos) = theta.sin_cos();
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let inside = u * u + v * v <= 1.0;
            let noise: f64 = r.sample(StandardNormal);
            let val = BACKGROUND + shift.brightness + if inside { CONTRAST } else { 0.0 } + PIXEL_NOISE * noise;
            img.push(val as f32);
            let flip = shift.label_noise > 0.0 && r.random::<f64>() < shift.label_noise;
            mask.push(if inside != flip { 1.0 } else { 0.0 });
        }
    }
}

fn draw_point<R: Rng>(cfg: &GenConfig, shift: &ShiftParams, r: &mut R, x: &mut Vec<f32>, y: &mut Vec<f32>) {
    let classes = cfg.classes;
    let mut label = r.random_range(0..classes);
    let angle = std::f64::consts::TAU * label as f64 / classes as f64 + shift.rotation;
    let radius = 2.0 * shift.fg_scale;
    for d in 0..cfg.feature_dim {
        let mean = match d {
            0 => radius * angle.cos(),
            1 => radius * angle.sin(),
            _ => 0.0,
        } + shift.brightness;
        let noise: f64 = r.sample(StandardNormal);
        x.push((mean + 0.6 * noise) as f32);
    }
    if shift.label_noise > 0.0 && r.random::<f64>() < shift.label_noise {
        label = r.random_range(0..classes);
    }
    for c in 0..classes {
        y.push(if c == label { 1.0 } else { 0.0 });
    }
}

// ---------------------------------------------------------------------------
// Model-ready views

/// Features per pixel fed to the segmenter: the 3×3 neighbourhood (edge
/// clamped) followed by the image median and standard deviation.
pub const PIXEL_FEATURES: usize = 11;
/// Cells per side of the pooling grid used for selector inputs.
pub const POOL_GRID: usize = 4;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn pixel_features(image: &[f32], side: usize, out: &mut Vec<f64>) {
    let px: Vec<f64> = image.iter().map(|v| f64::from(*v)).collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let std = (px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / px.len() as f64).sqrt();
    let med = median(&mut px.clone());
    let clamp = |i: isize| i.clamp(0, side as isize - 1) as usize;
    for y in 0..side as isize {
        for x in 0..side as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    out.push(px[clamp(y + dy) * side + clamp(x + dx)]);
                }
            }
            out.push(med);
            out.push(std);
        }
    }
}

/// Mean and standard deviation of each cell of a `POOL_GRID × POOL_GRID`
/// partition of the image, affinely rescaled by fixed constants so that
/// typical values span a few units.
pub fn pooled_features(image: &[f32], side: usize, out: &mut Vec<f64>) {
    let cell = |i: usize| (i * side / POOL_GRID, (i + 1) * side / POOL_GRID);
    for gy in 0..POOL_GRID {
        for gx in 0..POOL_GRID {
            let (y0, y1) = cell(gy);
            let (x0, x1) = cell(gx);
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = f64::from(image[y * side + x]);
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let m = s / n;
            out.push((m - BACKGROUND) / POOL_SCALE);
            out.push((s2 / n - m * m).max(0.0).sqrt() / POOL_SCALE);
        }
    }
}

/// Width of a model input row for the task.
pub fn model_input_width(cfg: &GenConfig) -> usize {
    match cfg.task {
        Task::Segmentation => cfg.side * cfg.side * PIXEL_FEATURES,
        _ => input_width(cfg),
    }
}

/// Width of a selector input row for the task.
pub fn selector_input_width(cfg: &GenConfig) -> usize {
    match cfg.task {
        Task::Segmentation => POOL_GRID * POOL_GRID * 2,
        _ => input_width(cfg),
    }
}

/// One split converted to model and selector inputs.
#[derive(Clone, Debug)]
pub struct SplitView {
    pub batch: Batch,
    pub selector_inputs: Matrix,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> SplitView {
        SplitView {
            batch: self.batch.select(idx),
            selector_inputs: self.selector_inputs.select_rows(idx),
        }
    }

    pub fn concat(parts: &[&SplitView]) -> Result<SplitView> {
        let batches: Vec<&Batch> = parts.iter().map(|p| &p.batch).collect();
        let sel: Vec<&Matrix> = parts.iter().map(|p| &p.selector_inputs).collect();
        Ok(SplitView {
            batch: Batch::concat(&batches)?,
            selector_inputs: Matrix::vstack(&sel)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ClientView {
    pub client_id: usize,
    pub train: SplitView,
    pub val: SplitView,
    pub test: SplitView,
}

pub fn view_split(cfg: &GenConfig, split: &Split) -> Result<SplitView> {
    let n = split.len();
    let (in_w, t_w) = (input_width(cfg), target_width(cfg));
    let targets = Matrix::from_vec(n, t_w, split.targets.iter().map(|v| f64::from(*v)).collect())?;
    let (inputs, sel) = match cfg.task {
        Task::Segmentation => {
            let mut feats = Vec::with_capacity(n * model_input_width(cfg));
            let mut pooled = Vec::with_capacity(n * selector_input_width(cfg));
            for img in split.inputs.chunks(in_w) {
                pixel_features(img, cfg.side, &mut feats);
                pooled_features(img, cfg.side, &mut pooled);
            }
            (
                Matrix::from_vec(n, model_input_width(cfg), feats)?,
                Matrix::from_vec(n, selector_input_width(cfg), pooled)?,
            )
        }
        _ => {
            let m = Matrix::from_vec(n, in_w, split.inputs.iter().map(|v| f64::from(*v)).collect())?;
            (m.clone(), m)
        }
    };
    Ok(SplitView {
        batch: Batch::new(inputs, targets)?,
        selector_inputs: sel,
    })
}

pub fn view(ds: &FederationDataset) -> Result<Vec<ClientView>> {
    ds.clients
        .iter()
        .map(|c| {
            Ok(ClientView {
                client_id: c.client_id,
                train: view_split(&ds.config, &c.train)?,
                val: view_split(&ds.config, &c.val)?,
                test: view_split(&ds.config, &c.test)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// FEDS file format
//
//   "FEDS" | version u8 | header_len u32 | header JSON | header crc32 u32
//   then, per client and per split (train, val, test), one section:
//   count u32 | ids u32[count] | inputs f32[count·in_w] | targets f32[count·t_w] | crc32 u32
//
// All integers and floats are little-endian; each crc covers the bytes of
// its section (or header) before the crc itself.

#[derive(Serialize, Deserialize)]
struct Header {
    config: GenConfig,
    input_width: usize,
    target_width: usize,
    shifts: Vec<ShiftParams>,
    split_sizes: Vec<[usize; 3]>,
}

pub fn save_dataset(ds: &FederationDataset, path: &Path) -> Result<()> {
    let header = Header {
        config: ds.config.clone(),
        input_width: ds.input_width(),
        target_width: ds.target_width(),
        shifts: ds.clients.iter().map(|c| c.shift).collect(),
        split_sizes: ds
            .clients
            .iter()
            .map(|c| [c.train.len(), c.val.len(), c.test.len()])
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    for c in &ds.clients {
        for split in [&c.train, &c.val, &c.test] {
            let start = buf.len();
            buf.extend_from_slice(&(split.len() as u32).to_le_bytes());
            for id in &split.ids {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            for v in split.inputs.iter().chain(&split.targets) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&buf[start..]);
            buf.extend_from_slice(&crc.to_le_bytes());
        }
    }
    let tmp = path.with_extension("feds.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_dataset(path: &Path) -> Result<FederationDataset> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut cur = Cursor { buf: &raw, pos: 0, path };
    if cur.take(4).map_err(|_| Error::format(path, "missing magic bytes"))? != MAGIC {
        return Err(Error::format(path, "bad magic bytes (not a FEDS file)"));
    }
    let version = cur.take(1)?[0];
    if version > FORMAT_VERSION || version == 0 {
        return Err(Error::UnsupportedVersion {
            found: u32::from(version),
            supported: u32::from(FORMAT_VERSION),
        });
    }
    let hlen = cur.u32()? as usize;
    let json = cur.take(hlen)?;
    if cur.u32()? != crc32fast::hash(json) {
        return Err(Error::Checksum {
            section: "header".into(),
        });
    }
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let cfg = header.config;
    if header.input_width != input_width(&cfg)
        || header.target_width != target_width(&cfg)
        || header.shifts.len() != cfg.sizes.len()
        || header.split_sizes.len() != cfg.sizes.len()
    {
        return Err(Error::format(path, "header fields are inconsistent"));
    }
    let (in_w, t_w) = (header.input_width, header.target_width);
    let mut clients = Vec::with_capacity(cfg.sizes.len());
    for (idx, shift) in header.shifts.iter().enumerate() {
        let mut splits = Vec::with_capacity(3);
        for (s, name) in ["train", "val", "test"].iter().enumerate() {
            let start = cur.pos;
            let n = cur.u32()? as usize;
            if n != header.split_sizes[idx][s] {
                return Err(Error::format(path, format!("client {} {name}: count disagrees with header", idx + 1)));
            }
            let ids = cur
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let floats = |bytes: &[u8]| -> Vec<f32> {
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            };
            let inputs = floats(cur.take(4 * n * in_w)?);
            let targets = floats(cur.take(4 * n * t_w)?);
            let crc = crc32fast::hash(&raw[start..cur.pos]);
            if cur.u32()? != crc {
                return Err(Error::Checksum {
                    section: format!("client {} {name}", idx + 1),
                });
            }
            splits.push(Split { ids, inputs, targets });
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        clients.push(ClientShard {
            client_id: idx + 1,
            shift: *shift,
            train,
            val,
            test,
        });
    }
    if cur.pos != raw.len() {
        return Err(Error::format(path, "trailing bytes after last section"));
    }
    Ok(FederationDataset { config: cfg, clients })
}

//! Synthetic multi-task scenes and the binary dataset format.
//!
//! A scene is a background plane plus a few layered primitives. Every
//! primitive carries a class, a color and a depth plane; pixels take the
//! nearest covering primitive, so segmentation, depth, normals and
//! boundaries are mutually consistent by construction.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::map_range;
use crate::tensor::Tensor;
use crate::tasks::{TaskId, TaskTarget};

pub const DATASET_MAGIC: &[u8; 4] = b"FGMD";
pub const DATASET_VERSION: u32 = 1;
/// Parts per object in the derived part-segmentation target.
pub const PARTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Including the background class 0.
    pub classes: usize,
    /// Inclusive range of primitives per scene.
    pub shapes: (usize, usize),
    /// Near and far depth; the background sits at `far`.
    pub depth_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            classes: 6,
            shapes: (2, 5),
            depth_range: (1.0, 10.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "scene size {}×{} must be positive and divisible by 32",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("class count {} outside [2, 255]", self.classes)));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(Error::Config("shape range is empty".into()));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0) || !(far - near >= 3.0) {
            return Err(Error::Config(format!(
                "depth range ({near}, {far}) needs near > 0 and far − near ≥ 3"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub height: usize,
    pub width: usize,
    /// `H×W×3`, values in [0, 1].
    pub image: Vec<f64>,
    pub seg: Vec<u16>,
    pub depth: Vec<f64>,
    /// `H×W×3` unit vectors.
    pub normal: Vec<f64>,
    pub boundary: Vec<u8>,
}

impl TaskSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, 3], self.image.clone()).expect("image size")
    }

    /// Salient foreground: every non-background pixel.
    pub fn saliency(&self) -> Vec<f64> {
        self.seg.iter().map(|&c| f64::from(u8::from(c != 0))).collect()
    }

    /// Part labels: 0 on background, otherwise one of four parts chosen by
    /// the sign pattern of the surface normal's x and y components.
    pub fn parts(&self) -> Vec<u16> {
        self.seg
            .iter()
            .zip(self.normal.chunks(3))
            .map(|(&c, n)| {
                if c == 0 {
                    0
                } else {
                    1 + u16::from(n[0] >= 0.0) + 2 * u16::from(n[1] >= 0.0)
                }
            })
            .collect()
    }

    pub fn target(&self, task: TaskId) -> TaskTarget {
        match task {
            TaskId::Seg => TaskTarget::Labels(self.seg.clone()),
            TaskId::PartSeg => TaskTarget::Labels(self.parts()),
            TaskId::Sal => TaskTarget::Dense(self.saliency()),
            TaskId::Depth => TaskTarget::Dense(self.depth.clone()),
            TaskId::Normal => TaskTarget::Dense(self.normal.clone()),
            TaskId::Bound => TaskTarget::Dense(self.boundary.iter().map(|&b| f64::from(b)).collect()),
        }
    }
}

/// Concatenate per-sample targets into one batch target.
pub fn batch_target(samples: &[&TaskSample], task: TaskId) -> TaskTarget {
    let parts: Vec<TaskTarget> = samples.iter().map(|s| s.target(task)).collect();
    match parts.first() {
        Some(TaskTarget::Labels(_)) => TaskTarget::Labels(
            parts
                .into_iter()
                .flat_map(|p| match p {
                    TaskTarget::Labels(l) => l,
                    TaskTarget::Dense(_) => unreachable!(),
                })
                .collect(),
        ),
        _ => TaskTarget::Dense(
            parts
                .into_iter()
                .flat_map(|p| match p {
                    TaskTarget::Dense(d) => d,
                    TaskTarget::Labels(_) => unreachable!(),
                })
                .collect(),
        ),
    }
}

/// Stack images into `[B×H×W×3]`.
pub fn batch_images(samples: &[&TaskSample]) -> Result<Tensor> {
    let (h, w) = (samples[0].height, samples[0].width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Shape("batch mixes image sizes".into()));
    }
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(&[samples.len(), h, w, 3], data)
}

/// Fixed class palette; class 0 is the background.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.50],
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.10],
    ];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        let h = crate::params::fnv1a(&(class as u64).to_le_bytes());
        [0, 1, 2].map(|k| 0.15 + 0.8 * ((h >> (k * 16)) & 0xffff) as f64 / 65535.0)
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rect { y0: f64, y1: f64, x0: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Tri { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, y1, x0, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Tri { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

struct Primitive {
    shape: Shape,
    class: usize,
    /// Depth plane `d0 + a·u + b·v` over image-normalized `u, v ∈ [−1, 1]`.
    plane: (f64, f64, f64),
}

/// Render sample `index` of the scene family `cfg`. Pure in `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> TaskSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let (near, far) = cfg.depth_range;
    let side = h.min(w) as f64;
    let count = rng.gen_range(cfg.shapes.0..=cfg.shapes.1);
    let prims: Vec<Primitive> = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let size = rng.gen_range(0.12..0.3) * side;
            let shape = match rng.gen_range(0..3) {
                0 => {
                    let hy = size * rng.gen_range(0.5..1.0);
                    let hx = size * rng.gen_range(0.5..1.0);
                    Shape::Rect {
                        y0: cy - hy,
                        y1: cy + hy,
                        x0: cx - hx,
                        x1: cx + hx,
                    }
                }
                1 => Shape::Disk { cy, cx, r: size },
                _ => {
                    let mut vertex = || {
                        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        let r = size * rng.gen_range(0.7..1.3);
                        (cy + r * a.sin(), cx + r * a.cos())
                    };
                    Shape::Tri {
                        p: [vertex(), vertex(), vertex()],
                    }
                }
            };
            let class = rng.gen_range(1..cfg.classes);
            // |a|, |b| ≤ 0.5 keeps every plane within [near, far − 1].
            let d0 = rng.gen_range(near + 1.0..far - 2.0);
            let plane = (d0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            Primitive { shape, class, plane }
        })
        .collect();
    let noise: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(-0.02..0.02)).collect();

    let n = h * w;
    let mut seg = vec![0u16; n];
    let mut depth = vec![far; n];
    let mut normal = vec![0.0; n * 3];
    let mut image = vec![0.0; n * 3];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (u, v) = (2.0 * x / w as f64 - 1.0, 2.0 * y / h as f64 - 1.0);
            let p = i * w + j;
            let mut nrm = [0.0, 0.0, 1.0];
            let mut class = 0;
            for prim in &prims {
                if !prim.shape.contains(y, x) {
                    continue;
                }
                let (d0, a, b) = prim.plane;
                let d = d0 + a * u + b * v;
                if d < depth[p] {
                    depth[p] = d;
                    class = prim.class;
                    let len = (a * a + b * b + 1.0).sqrt();
                    nrm = [-a / len, -b / len, 1.0 / len];
                }
            }
            seg[p] = class as u16;
            normal[p * 3..p * 3 + 3].copy_from_slice(&nrm);
            let base = class_color(class);
            let shade = (0.55 + 0.45 * nrm[2]) * (1.0 - 0.35 * (depth[p] - near) / (far - near));
            for k in 0..3 {
                let tint = 0.08 * nrm[k.min(1)];
                image[p * 3 + k] = (base[k] * shade + tint + noise[p * 3 + k]).clamp(0.0, 1.0);
            }
        }
    }
    let boundary = seg_boundaries(&seg, h, w);
    TaskSample {
        height: h,
        width: w,
        image,
        seg,
        depth,
        normal,
        boundary,
    }
}

/// 1 where any 4-neighbour carries a different class.
pub fn seg_boundaries(seg: &[u16], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let c = seg[i * w + j];
            let differs = (i > 0 && seg[(i - 1) * w + j] != c)
                || (i + 1 < h && seg[(i + 1) * w + j] != c)
                || (j > 0 && seg[i * w + j - 1] != c)
                || (j + 1 < w && seg[i * w + j + 1] != c);
            out[i * w + j] = u8::from(differs);
        }
    }
    out
}

/// Samples `start..start + count`, generated in parallel by index.
pub fn generate_dataset(cfg: &SceneConfig, start: u64, count: usize) -> Result<Vec<TaskSample>> {
    cfg.validate()?;
    Ok(map_range(count, |i| generate_scene(cfg, start + i as u64)))
}

/// Train and eval splits drawn from disjoint index ranges.
pub fn generate_splits(cfg: &SceneConfig, train: usize, eval: usize) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    Ok((generate_dataset(cfg, 0, train)?, generate_dataset(cfg, 1 << 32, eval)?))
}

pub fn encode_dataset(samples: &[TaskSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&(s.height as u32).to_le_bytes());
        buf.extend_from_slice(&(s.width as u32).to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.seg {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in s.depth.iter().chain(&s.normal) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.boundary);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_dataset(samples: &[TaskSample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskSample>> {
    decode_dataset(&fs::read(path)?)
}

/// Little-endian cursor whose reads fail with a format error naming the field.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(field, "length overflow"))?, field)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            "magic",
            format!("expected {:?}", std::str::from_utf8(magic).unwrap()),
        ));
    }
    if bytes.len() < 8 {
        return Err(Error::format("version", "truncated"));
    }
    Ok(())
}

/// Validate the trailing CRC-32, which covers every byte before it.
pub(crate) fn check_crc(bytes: &[u8], body_end: usize) -> Result<()> {
    let mut r = Reader::new(&bytes[body_end..]);
    let stored = r.u32("crc32")?;
    if r.remaining() != 0 {
        return Err(Error::format("crc32", format!("{} trailing bytes after checksum", r.remaining())));
    }
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(
            "crc32",
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<TaskSample>> {
    check_magic(bytes, DATASET_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = r.u32("sample_count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let h = r.u32(&format!("sample[{k}].height"))? as usize;
        let w = r.u32(&format!("sample[{k}].width"))? as usize;
        let n = h
            .checked_mul(w)
            .ok_or_else(|| Error::format(format!("sample[{k}].width"), "size overflow"))?;
        // 59 bytes per pixel; refuse sizes the remaining bytes cannot hold.
        if n.checked_mul(59).is_none_or(|need| need > r.remaining()) {
            return Err(Error::format(
                format!("sample[{k}].image"),
                format!("truncated: {h}×{w} sample does not fit in {} bytes", r.remaining()),
            ));
        }
        let image = r.f64s(n * 3, &format!("sample[{k}].image"))?;
        let seg = r
            .take(n * 2, &format!("sample[{k}].seg"))?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let depth = r.f64s(n, &format!("sample[{k}].depth"))?;
        let normal = r.f64s(n * 3, &format!("sample[{k}].normal"))?;
        let boundary = r.take(n, &format!("sample[{k}].boundary"))?.to_vec();
        samples.push(TaskSample {
            height: h,
            width: w,
            image,
            seg,
            depth,
            normal,
            boundary,
        });
    }
    let end = r.pos();
    check_crc(bytes, end)?;
    Ok(samples)
}

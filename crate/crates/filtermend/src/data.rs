//! Procedural shifted-dataset generation, IDX ingestion, low-level shift
//! transforms and the binary tensor interchange format.

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ResponseTensor;

/// Images (3-channel, values in [0,1]) with labels and generation metadata.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub images: ResponseTensor,
    pub labels: Vec<usize>,
    pub generator: String,
    pub shift: String,
    pub seed: u64,
}

impl DatasetBundle {
    pub fn new(
        images: ResponseTensor,
        labels: Vec<usize>,
        generator: &str,
        shift: &str,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != images.n_images() {
            return Err(Error::CountMismatch {
                images: images.n_images(),
                labels: labels.len(),
            });
        }
        if images.n_filters() != 3 {
            return Err(Error::DimMismatch {
                axis: "color channels",
                expected: 3,
                actual: images.n_filters(),
            });
        }
        if !images.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::NonFinite("pixel values outside [0,1]"));
        }
        Ok(Self {
            images,
            labels,
            generator: generator.to_string(),
            shift: shift.to_string(),
            seed,
        })
    }

    pub fn n_images(&self) -> usize {
        self.images.n_images()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Keep only the listed image indices.
    pub fn subset(&self, indices: &[usize]) -> Result<DatasetBundle> {
        let [_, c, h, w] = self.images.dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let start = self.images.index(i, 0, 0, 0);
            data.extend_from_slice(&self.images.data()[start..start + stride]);
            labels.push(self.labels[i]);
        }
        let images = ResponseTensor::new(data, [indices.len(), c, h, w])?;
        DatasetBundle::new(images, labels, &self.generator, &self.shift, self.seed)
    }
}

/// The low-level shift transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    Gray,
    Dark,
    Tint,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(ShiftKind::Gray),
            "dark" => Ok(ShiftKind::Dark),
            "tint" => Ok(ShiftKind::Tint),
            other => Err(Error::UnknownShift(other.to_string())),
        }
    }
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShiftKind::Gray => write!(f, "gray"),
            ShiftKind::Dark => write!(f, "dark"),
            ShiftKind::Tint => write!(f, "tint"),
        }
    }
}

const SHAPE_NAMES: [&str; 8] = [
    "bar", "cross", "disk", "ring", "triangle", "ell", "tee", "checker",
];

/// Render the eight shape classes at jittered position/scale/rotation, each
/// instance tinted with a random saturated color. Deterministic per seed.
pub fn gen_shapes(
    n_per_class: usize,
    n_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if n_classes == 0 || n_classes > SHAPE_NAMES.len() {
        return Err(Error::DimMismatch {
            axis: "n_classes",
            expected: SHAPE_NAMES.len(),
            actual: n_classes,
        });
    }
    if image_size < 16 {
        return Err(Error::DimMismatch {
            axis: "image_size",
            expected: 16,
            actual: image_size,
        });
    }
    if n_per_class == 0 {
        return Err(Error::EmptySamples("n_per_class"));
    }
    let s = image_size;
    let n = n_per_class * n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; n * 3 * s * s];
    let mut labels = Vec::with_capacity(n);

    const BG: f64 = 0.08;
    for class in 0..n_classes {
        for inst in 0..n_per_class {
            let img = class * n_per_class + inst;
            labels.push(class);
            let hue: f64 = rng.gen_range(0.0..6.0);
            let value: f64 = rng.gen_range(0.55..1.0);
            let tint = hsv_to_rgb(hue, 1.0, value);
            let cx = s as f64 * rng.gen_range(0.42..0.58);
            let cy = s as f64 * rng.gen_range(0.42..0.58);
            let radius = s as f64 * rng.gen_range(0.30..0.42);
            let theta: f64 = rng.gen_range(-0.35..0.35);
            let (sin_t, cos_t) = theta.sin_cos();

            for py in 0..s {
                for px in 0..s {
                    let noise: f64 = rng.gen_range(-0.02..0.02);
                    // 2x2 supersampled coverage
                    let mut hits = 0;
                    for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                        let x = (px as f64 + dx - cx) / radius;
                        let y = (py as f64 + dy - cy) / radius;
                        let u = cos_t * x + sin_t * y;
                        let v = -sin_t * x + cos_t * y;
                        if point_in_shape(class, u, v) {
                            hits += 1;
                        }
                    }
                    let coverage = hits as f64 / 4.0;
                    for ch in 0..3 {
                        let base = BG + (tint[ch] - BG) * coverage + noise;
                        let idx = ((img * 3 + ch) * s + py) * s + px;
                        data[idx] = base.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let images = ResponseTensor::new(data, [n, 3, s, s])?;
    DatasetBundle::new(images, labels, "shapes", "none", seed)
}

fn point_in_shape(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u.abs() <= 0.22 && v.abs() <= 0.85,
        1 => (u.abs() <= 0.22 && v.abs() <= 0.80) || (v.abs() <= 0.22 && u.abs() <= 0.80),
        2 => u * u + v * v <= 0.49,
        3 => {
            let r2 = u * u + v * v;
            (0.16..=0.49).contains(&r2)
        }
        4 => {
            // equilateral triangle, circumradius 0.8, apex up
            let verts = [
                (0.0, -0.8),
                (0.8 * 0.866_025, 0.4),
                (-0.8 * 0.866_025, 0.4),
            ];
            let mut inside = true;
            for i in 0..3 {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % 3];
                let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                if cross < 0.0 {
                    inside = false;
                    break;
                }
            }
            inside
        }
        5 => {
            ((-0.6..=-0.25).contains(&u) && v.abs() <= 0.8)
                || ((-0.6..=0.6).contains(&u) && (-0.8..=-0.45).contains(&v))
        }
        6 => {
            ((0.45..=0.8).contains(&v) && u.abs() <= 0.7)
                || (u.abs() <= 0.175 && (-0.8..=0.45).contains(&v))
        }
        7 => {
            if u.abs() > 0.8 || v.abs() > 0.8 {
                return false;
            }
            let cell = 1.6 / 3.0;
            let cu = ((u + 0.8) / cell).floor() as i64;
            let cv = ((v + 0.8) / cell).floor() as i64;
            (cu + cv) % 2 == 0
        }
        _ => false,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// ITU-R BT.601 luminance weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Apply a low-level shift. Labels and image count never change.
pub fn apply_shift(bundle: &DatasetBundle, kind: ShiftKind, seed: u64) -> Result<DatasetBundle> {
    let [n, _, h, w] = bundle.images.dims();
    let mut out = bundle.images.data().to_vec();
    match kind {
        ShiftKind::Gray => {
            for img in 0..n {
                for py in 0..h {
                    for px in 0..w {
                        let mut luma = 0.0;
                        for ch in 0..3 {
                            luma += LUMA[ch] * bundle.images.get(img, ch, py, px);
                        }
                        for ch in 0..3 {
                            out[bundle.images.index(img, ch, py, px)] = luma;
                        }
                    }
                }
            }
        }
        ShiftKind::Dark => {
            for v in &mut out {
                *v = (0.3 * *v).powf(1.8);
            }
        }
        ShiftKind::Tint => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for img in 0..n {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (sin_a, cos_a) = angle.sin_cos();
                for py in 0..h {
                    for px in 0..w {
                        let r = bundle.images.get(img, 0, py, px);
                        let g = bundle.images.get(img, 1, py, px);
                        let b = bundle.images.get(img, 2, py, px);
                        // hue rotation in the YIQ color space
                        let y = 0.299 * r + 0.587 * g + 0.114 * b;
                        let i = 0.596 * r - 0.274 * g - 0.322 * b;
                        let q = 0.211 * r - 0.523 * g + 0.312 * b;
                        let i2 = cos_a * i - sin_a * q;
                        let q2 = sin_a * i + cos_a * q;
                        let nr = y + 0.956 * i2 + 0.621 * q2;
                        let ng = y - 0.272 * i2 - 0.647 * q2;
                        let nb = y - 1.106 * i2 + 1.703 * q2;
                        out[bundle.images.index(img, 0, py, px)] = nr.clamp(0.0, 1.0);
                        out[bundle.images.index(img, 1, py, px)] = ng.clamp(0.0, 1.0);
                        out[bundle.images.index(img, 2, py, px)] = nb.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let images = ResponseTensor::new(out, bundle.images.dims())?;
    DatasetBundle::new(
        images,
        bundle.labels.clone(),
        &bundle.generator,
        &kind.to_string(),
        seed,
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image/label file pair. Grayscale bytes scale to [0,1] and are
/// replicated to 3 channels.
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P) -> Result<DatasetBundle> {
    let img_display = images_path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(&images_path)?);
    let magic = r.read_u32::<BigEndian>().map_err(|e| Error::Corrupt {
        path: img_display.clone(),
        detail: e.to_string(),
    })?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: img_display,
            expected: IDX_IMAGES_MAGIC.to_be_bytes(),
            actual: magic.to_be_bytes(),
        });
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let h = r.read_u32::<BigEndian>()? as usize;
    let w = r.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw).map_err(|e| Error::Corrupt {
        path: img_display.clone(),
        detail: format!("truncated pixel payload: {e}"),
    })?;

    let lbl_display = labels_path.as_ref().display().to_string();
    let mut lr = BufReader::new(File::open(&labels_path)?);
    let lmagic = lr.read_u32::<BigEndian>().map_err(|e| Error::Corrupt {
        path: lbl_display.clone(),
        detail: e.to_string(),
    })?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lbl_display,
            expected: IDX_LABELS_MAGIC.to_be_bytes(),
            actual: lmagic.to_be_bytes(),
        });
    }
    let ln = lr.read_u32::<BigEndian>()? as usize;
    if ln != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    let mut lraw = vec![0u8; ln];
    lr.read_exact(&mut lraw).map_err(|e| Error::Corrupt {
        path: lbl_display,
        detail: format!("truncated label payload: {e}"),
    })?;

    let mut data = vec![0.0f64; n * 3 * h * w];
    for img in 0..n {
        for py in 0..h {
            for px in 0..w {
                let v = raw[(img * h + py) * w + px] as f64 / 255.0;
                for ch in 0..3 {
                    data[((img * 3 + ch) * h + py) * w + px] = v;
                }
            }
        }
    }
    let images = ResponseTensor::new(data, [n, 3, h, w])?;
    let labels = lraw.into_iter().map(|b| b as usize).collect();
    DatasetBundle::new(images, labels, "idx", "none", 0)
}

const FTEN_MAGIC: [u8; 4] = *b"FTEN";
const FTEN_VERSION: u16 = 1;
const FTEN_MAX_ELEMENTS: u64 = 1 << 33;

/// Write a tensor as 32-bit floats: magic `FTEN`, u16 version, four u32
/// dims, then little-endian f32 data row-major.
pub fn save_tensor<P: AsRef<Path>>(path: P, t: &ResponseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FTEN_MAGIC)?;
    w.write_u16::<LittleEndian>(FTEN_VERSION)?;
    for d in t.dims() {
        if d > u32::MAX as usize {
            return Err(Error::Corrupt {
                path: String::new(),
                detail: format!("dim {d} overflows the 32-bit header"),
            });
        }
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite("tensor value exceeds 32-bit float range"));
        }
        w.write_f32::<LittleEndian>(f)?;
    }
    Ok(())
}

pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<ResponseTensor> {
    let display = path.as_ref().display().to_string();
    let mut r = BufReader::new(File::open(&path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Corrupt {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    if magic != FTEN_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: FTEN_MAGIC,
            actual: magic,
        });
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != FTEN_VERSION {
        return Err(Error::BadVersion {
            path: display,
            expected: FTEN_VERSION,
            got: version,
        });
    }
    let mut dims = [0usize; 4];
    let mut product: u64 = 1;
    for d in &mut dims {
        let v = r.read_u32::<LittleEndian>()? as usize;
        if v == 0 {
            return Err(Error::Corrupt {
                path: display,
                detail: "zero-length dimension".into(),
            });
        }
        *d = v;
        product = product.saturating_mul(v as u64);
    }
    if product > FTEN_MAX_ELEMENTS {
        return Err(Error::Corrupt {
            path: display,
            detail: format!("dim product {product} overflows the supported range"),
        });
    }
    let count = product as usize;
    let mut data = vec![0.0f64; count];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(|e| Error::Corrupt {
            path: display.clone(),
            detail: format!("truncated data block: {e}"),
        })? as f64;
    }
    ResponseTensor::new(data, dims)
}

/// One label per line, plain text.
pub fn save_labels<P: AsRef<Path>>(path: P, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

pub fn load_labels<P: AsRef<Path>>(path: P) -> Result<Vec<usize>> {
    let display = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse::<usize>().map_err(|e| Error::Corrupt {
                path: display.clone(),
                detail: format!("bad label line `{l}`: {e}"),
            })
        })
        .collect()
}

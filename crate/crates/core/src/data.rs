//! Synthetic sequence generators and the on-disk sequence format.
//!
//! File layout, little-endian:
//!
//! ```text
//! "RJPA1\0"  u16 version  u32 count  u32 T  u32 height  u32 width  u32 channels
//! count·T·height·width·channels f32 (sequence-major, time-major, row-major)
//! u32 CRC-32 of the payload
//! ```
//!
//! Every sequence `i` of a generator is drawn from `Rng::new(seed).split(i)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, Matrix, Rng};

pub const DATASET_MAGIC: &[u8; 6] = b"RJPA1\0";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 6 + 2 + 5 * 4;

/// Manifest metadata kept in a `key=value` sidecar.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub generator: String,
    pub split: String,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `count · t · patch_dim` values.
    pub data: Vec<f32>,
    pub manifest: Manifest,
}

impl SequenceDataset {
    pub fn empty(t: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            t,
            height,
            width,
            channels,
            data: Vec::new(),
            manifest: Manifest::default(),
        }
    }

    pub fn from_sequences(
        seqs: &[Vec<Vec<f64>>],
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        let t = seqs.first().map_or(0, Vec::len);
        let patch = height * width * channels;
        let mut data = Vec::with_capacity(seqs.len() * t * patch);
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != t {
                return Err(Error::Validation(format!(
                    "sequence {i} has {} steps, expected {t}",
                    s.len()
                )));
            }
            for p in s {
                if p.len() != patch {
                    return Err(Error::Validation(format!(
                        "sequence {i} has a patch of {} values, expected {patch}",
                        p.len()
                    )));
                }
                data.extend(p.iter().map(|&v| v as f32));
            }
        }
        Ok(Self {
            t,
            height,
            width,
            channels,
            data,
            manifest: Manifest::default(),
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        let per = self.t * self.patch_dim();
        if per == 0 {
            0
        } else {
            self.data.len() / per
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sequence(&self, i: usize) -> Vec<Vec<f64>> {
        let p = self.patch_dim();
        let base = i * self.t * p;
        (0..self.t)
            .map(|t| {
                self.data[base + t * p..base + (t + 1) * p]
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect()
    }

    pub fn sequences(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.len()).map(|i| self.sequence(i)).collect()
    }

    /// Adds a constant to every value; the shift is recorded in the manifest.
    pub fn add_offset(&mut self, offset: f64) {
        if offset == 0.0 {
            return;
        }
        let v = offset as f32;
        self.data.iter_mut().for_each(|x| *x += v);
        self.manifest.extra.insert("offset".into(), format!("{offset}"));
    }

    /// Contiguous disjoint `(train, test)` split at `train_count`.
    pub fn split(&self, train_count: usize) -> Result<(SequenceDataset, SequenceDataset)> {
        if train_count > self.len() {
            return Err(Error::Validation(format!(
                "train split of {train_count} from {} sequences",
                self.len()
            )));
        }
        let cut = train_count * self.t * self.patch_dim();
        let part = |data: &[f32], split: &str| SequenceDataset {
            data: data.to_vec(),
            manifest: Manifest {
                split: split.into(),
                ..self.manifest.clone()
            },
            ..self.clone()
        };
        Ok((part(&self.data[..cut], "train"), part(&self.data[cut..], "test")))
    }
}

/// Gaussian AR(1) latent process `z(t) = U z(t−1) + b(t)`, `b ~ N(0, Σ)`,
/// observed as `patch = emission · z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProcessParams {
    pub u: Matrix,
    pub sigma: Matrix,
    /// `patch_dim × latent_dim`
    pub emission: Matrix,
}

/// Spectral radius at or above this is rejected.
pub const MAX_SPECTRAL_RADIUS: f64 = 0.999;
pub const BURN_IN: usize = 100;

impl LatentProcessParams {
    pub fn latent_dim(&self) -> usize {
        self.u.rows()
    }

    /// Diagonal `U` with persistences linearly spaced over
    /// `[rho_min, rho_max]`, `Σ = diag(1 − ρ²)` so every latent has unit
    /// stationary variance, and an orthonormal emission.
    pub fn graded(latent_dim: usize, patch_dim: usize, rho_min: f64, rho_max: f64, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > patch_dim {
            return Err(Error::Validation(format!(
                "latent dimension {latent_dim} must be in 1..={patch_dim}"
            )));
        }
        if !(0.0..MAX_SPECTRAL_RADIUS).contains(&rho_min.abs()) || !(0.0..MAX_SPECTRAL_RADIUS).contains(&rho_max.abs()) {
            return Err(Error::Validation(format!(
                "persistence range [{rho_min}, {rho_max}] must lie inside (-{MAX_SPECTRAL_RADIUS}, {MAX_SPECTRAL_RADIUS})"
            )));
        }
        let last = (latent_dim - 1).max(1) as f64;
        let rhos: Vec<f64> = (0..latent_dim)
            .map(|i| {
                let f = i as f64 / last;
                (1.0 - f) * rho_min + f * rho_max
            })
            .collect();
        let sig: Vec<f64> = rhos.iter().map(|r| 1.0 - r * r).collect();
        let mut rng = Rng::new(seed);
        let p = Self {
            u: Matrix::diag(&rhos),
            sigma: Matrix::diag(&sig),
            emission: Matrix::random_orthogonal(patch_dim, latent_dim, &mut rng),
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks shapes, stability and that `Σ` is symmetric positive
    /// semidefinite (`Σ = 0` is allowed).
    pub fn validate(&self) -> Result<()> {
        let d = self.u.rows();
        if !self.u.is_square() || self.sigma.shape() != (d, d) || self.emission.cols() != d {
            return Err(Error::Validation(format!(
                "latent shapes U {:?}, Σ {:?}, emission {:?}",
                self.u.shape(),
                self.sigma.shape(),
                self.emission.shape()
            )));
        }
        let rho = spectral_radius(&self.u)?;
        if rho >= MAX_SPECTRAL_RADIUS {
            return Err(Error::Validation(format!(
                "transition spectral radius {rho:.4} is not below {MAX_SPECTRAL_RADIUS}"
            )));
        }
        if !self.sigma.is_symmetric(1e-9) {
            return Err(Error::Validation("noise covariance is not symmetric".into()));
        }
        let (vals, _) = sym_eig(&self.sigma)?;
        if vals.last().copied().unwrap_or(0.0) < -1e-12 * vals[0].abs().max(1.0) {
            return Err(Error::Validation("noise covariance is not positive semidefinite".into()));
        }
        Ok(())
    }
}

/// Spectral radius: eigenvalues for symmetric `U`, otherwise
/// `‖U^k‖_F^{1/k}` by repeated squaring with `k = 2^19`.
pub fn spectral_radius(u: &Matrix) -> Result<f64> {
    if u.is_symmetric(1e-12) {
        let (vals, _) = sym_eig(u)?;
        return Ok(vals.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    let mut p = u.clone();
    let mut log_c = 0.0;
    let mut k = 1.0;
    let mut est = 0.0;
    for _ in 0..20 {
        let f = p.frobenius();
        if f == 0.0 {
            return Ok(0.0);
        }
        p.scale_in_place(1.0 / f);
        log_c += f.ln();
        est = (log_c / k).exp();
        p = p.matmul(&p)?;
        log_c *= 2.0;
        k *= 2.0;
    }
    Ok(est)
}

fn cholesky_psd(sigma: &Matrix) -> Result<Matrix> {
    // eigen-decomposition handles semidefinite Σ
    let (vals, vecs) = sym_eig(sigma)?;
    let root: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    vecs.matmul(&Matrix::diag(&root))
}

/// Latent trajectories `z(1..=T)` after a burn-in started from zero.
pub fn gen_latent_paths(p: &LatentProcessParams, count: usize, t: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    p.validate()?;
    let root = cholesky_psd(&p.sigma)?;
    let base = Rng::new(seed);
    let d = p.latent_dim();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.split(i as u64);
            let mut z = vec![0.0; d];
            let mut out = Vec::with_capacity(t);
            for step in 0..BURN_IN + t {
                let noise = root.matvec(&rng.normal_vec(d, 1.0))?;
                z = p.u.matvec(&z)?.iter().zip(&noise).map(|(a, b)| a + b).collect();
                if step >= BURN_IN {
                    out.push(z.clone());
                }
            }
            Ok(out)
        })
        .collect()
}

/// AR(1) latents observed through the emission map; patch shape is
/// `height × width × channels` with `height·width·channels = emission.rows()`.
pub fn gen_latent_sequences(
    p: &LatentProcessParams,
    count: usize,
    t: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<SequenceDataset> {
    let (h, w, c) = shape;
    if h * w * c != p.emission.rows() {
        return Err(Error::Validation(format!(
            "patch shape {h}x{w}x{c} does not match emission rows {}",
            p.emission.rows()
        )));
    }
    let paths = gen_latent_paths(p, count, t, seed)?;
    let seqs: Vec<Vec<Vec<f64>>> = paths
        .iter()
        .map(|path| path.iter().map(|z| p.emission.matvec(z)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut ds = SequenceDataset::from_sequences(&seqs, h, w, c)?;
    if count == 0 {
        ds = SequenceDataset::empty(t, h, w, c);
    }
    ds.manifest = Manifest {
        seed,
        generator: "latent".into(),
        split: "all".into(),
        extra: BTreeMap::new(),
    };
    Ok(ds)
}

/// Procedural image and fixation-walk knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageParams {
    pub image_size: usize,
    pub channels: usize,
    pub blobs: usize,
    /// Blob standard deviation range in pixels.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Fixation step length scale (pixels) for small moves.
    pub step: f64,
    /// Probability of a long saccade at each step.
    pub saccade_prob: f64,
    /// Draw blob amplitudes from `[0, 1]` instead of `[−1, 1]`.
    pub positive: bool,
}

impl Default for ImageParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            blobs: 32,
            sigma_min: 2.0,
            sigma_max: 8.0,
            step: 2.0,
            saccade_prob: 0.1,
            positive: false,
        }
    }
}

/// Renders a sum of `blobs` random oriented Gaussian blobs.
pub fn render_image(p: &ImageParams, rng: &mut Rng) -> Vec<f64> {
    let s = p.image_size;
    let mut img = vec![0.0; s * s * p.channels];
    for _ in 0..p.blobs {
        let cx = rng.uniform_range(0.0, s as f64);
        let cy = rng.uniform_range(0.0, s as f64);
        let sa = rng.uniform_range(p.sigma_min, p.sigma_max);
        let sb = rng.uniform_range(p.sigma_min, p.sigma_max);
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let amps: Vec<f64> = (0..p.channels)
            .map(|_| {
                if p.positive {
                    rng.uniform()
                } else {
                    rng.uniform_range(-1.0, 1.0)
                }
            })
            .collect();
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = ct * dx + st * dy;
                let v = -st * dx + ct * dy;
                let g = (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp();
                for (c, a) in amps.iter().enumerate() {
                    img[(y * s + x) * p.channels + c] += a * g;
                }
            }
        }
    }
    img
}

fn crop(img: &[f64], p: &ImageParams, patch: usize, top: usize, left: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch * patch * p.channels);
    for y in top..top + patch {
        let start = (y * p.image_size + left) * p.channels;
        out.extend_from_slice(&img[start..start + patch * p.channels]);
    }
    out
}

/// One image per sequence; fixations follow a clamped random walk with
/// Gaussian small steps and occasional uniform relocations (saccades).
pub fn gen_scanpath_sequences(
    p: &ImageParams,
    count: usize,
    t: usize,
    patch: usize,
    seed: u64,
) -> Result<SequenceDataset> {
    if patch == 0 || patch > p.image_size {
        return Err(Error::Validation(format!(
            "patch {patch} does not fit image {}",
            p.image_size
        )));
    }
    let base = Rng::new(seed);
    let span = (p.image_size - patch) as f64;
    let seqs: Vec<Vec<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.split(i as u64);
            let img = render_image(p, &mut rng);
            let mut fy = rng.uniform_range(0.0, span);
            let mut fx = rng.uniform_range(0.0, span);
            (0..t)
                .map(|step| {
                    if step > 0 {
                        if rng.uniform() < p.saccade_prob {
                            fy = rng.uniform_range(0.0, span);
                            fx = rng.uniform_range(0.0, span);
                        } else {
                            fy = (fy + p.step * rng.normal()).clamp(0.0, span);
                            fx = (fx + p.step * rng.normal()).clamp(0.0, span);
                        }
                    }
                    crop(&img, p, patch, fy.round() as usize, fx.round() as usize)
                })
                .collect()
        })
        .collect();
    let mut ds = if count == 0 {
        SequenceDataset::empty(t, patch, patch, p.channels)
    } else {
        SequenceDataset::from_sequences(&seqs, patch, patch, p.channels)?
    };
    ds.manifest = Manifest {
        seed,
        generator: "scanpath".into(),
        split: "all".into(),
        extra: BTreeMap::new(),
    };
    Ok(ds)
}

pub fn encode_dataset(ds: &SequenceDataset) -> Result<Vec<u8>> {
    let dims = [ds.len(), ds.t, ds.height, ds.width, ds.channels];
    let mut out = Vec::with_capacity(HEADER_LEN + ds.data.len() * 4 + 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for d in dims {
        let v = u32::try_from(d).map_err(|_| Error::Format {
            offset: out.len() as u64,
            msg: format!("dimension {d} exceeds u32"),
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let start = out.len();
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SequenceDataset> {
    if bytes.len() < DATASET_MAGIC.len() {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated magic".into(),
        });
    }
    if let Some(pos) = bytes.iter().zip(DATASET_MAGIC).position(|(a, b)| a != b) {
        return Err(Error::Format {
            offset: pos as u64,
            msg: "bad magic".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 6,
            msg: format!("unsupported version {version}"),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as u64;
    let (count, t, h, w, c) = (dim(0), dim(1), dim(2), dim(3), dim(4));
    let values = [count, t, h, w, c]
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d))
        .filter(|v| v.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
        .ok_or(Error::Format {
            offset: 8,
            msg: "dimension product overflows".into(),
        })?;
    let payload_end = (HEADER_LEN as u64).checked_add(values * 4).ok_or(Error::Format {
        offset: 8,
        msg: "dimension product overflows".into(),
    })?;
    if (bytes.len() as u64) < payload_end + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: need {} bytes", payload_end + 4),
        });
    }
    if bytes.len() as u64 > payload_end + 4 {
        return Err(Error::Format {
            offset: payload_end + 4,
            msg: "trailing bytes after checksum".into(),
        });
    }
    let payload_end = payload_end as usize;
    let payload = &bytes[HEADER_LEN..payload_end];
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Format {
            offset: payload_end as u64,
            msg: "payload checksum mismatch".into(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(SequenceDataset {
        t: t as usize,
        height: h as usize,
        width: w as usize,
        channels: c as usize,
        data,
        manifest: Manifest::default(),
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the dataset and its `<path>.manifest` sidecar.
pub fn write_dataset(ds: &SequenceDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    std::fs::write(manifest_path(path), format_manifest(&ds.manifest))?;
    Ok(())
}

/// Reads a dataset; the manifest sidecar is optional.
pub fn read_dataset(path: &Path) -> Result<SequenceDataset> {
    let bytes = std::fs::read(path)?;
    let mut ds = decode_dataset(&bytes)?;
    let mp = manifest_path(path);
    if mp.exists() {
        ds.manifest = parse_manifest(&std::fs::read_to_string(mp)?)?;
    }
    Ok(ds)
}

pub fn format_manifest(m: &Manifest) -> String {
    let mut s = format!("seed={}\ngenerator={}\nsplit={}\n", m.seed, m.generator, m.split);
    for (k, v) in &m.extra {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut m = Manifest::default();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or(Error::Format {
                offset,
                msg: format!("manifest line without '=': {trimmed}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => {
                    m.seed = v.parse().map_err(|_| Error::Format {
                        offset,
                        msg: format!("bad seed {v}"),
                    })?
                }
                "generator" => m.generator = v.into(),
                "split" => m.split = v.into(),
                _ => {
                    m.extra.insert(k.into(), v.into());
                }
            }
        }
        offset += line.len() as u64 + 1;
    }
    Ok(m)
}

/// Ratio of second-half to first-half variance, pooled over sequences
/// and coordinates.
pub fn variance_drift(seqs: &[Vec<Vec<f64>>]) -> f64 {
    let var = |range: std::ops::Range<usize>| -> f64 {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut k = 0usize;
        for s in seqs {
            for v in s[range.clone()].iter().flatten() {
                sum += v;
                sq += v * v;
                k += 1;
            }
        }
        let mean = sum / k.max(1) as f64;
        sq / k.max(1) as f64 - mean * mean
    };
    let t = seqs.first().map_or(0, Vec::len);
    var(t / 2..t) / var(0..t / 2)
}

//! Slice preprocessing and unpaired sampling.
//!
//! Chain per slice: slice-axis resampling of the volume, min-max
//! normalization, bicubic resize, crop, optional flip and rotation,
//! clamp to [0, 1], then `x ↦ 2x − 1` into the network range.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{self, Modality, VolumeRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_slices: usize,
    pub resize_dim: usize,
    pub crop_dim: usize,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_slices: 80,
            resize_dim: 286,
            crop_dim: 256,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            augment: true,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_slices < 1 {
            return Err(Error::Validation("target_slices must be >= 1".into()));
        }
        if self.crop_dim > self.resize_dim {
            return Err(Error::Validation(format!(
                "crop_dim {} exceeds resize_dim {}",
                self.crop_dim, self.resize_dim
            )));
        }
        if self.crop_dim < 8 || !self.crop_dim.is_multiple_of(4) {
            return Err(Error::Validation(format!(
                "crop_dim must be a multiple of 4 and >= 8, got {}",
                self.crop_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Validation(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::Validation("max_rotation_deg must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The random choices applied to one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
}

/// One preprocessed network input.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// crop_dim × crop_dim, values in [-1, 1].
    pub pixels: Array2<f64>,
    pub modality: Modality,
    pub source_id: String,
    pub slice_index: usize,
    pub augmentation: AugmentDraw,
    pub crop_offset: (usize, usize),
}

impl SliceSample {
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.pixels.dim();
        Tensor::from_image(h, w, self.pixels.iter().copied().collect()).expect("dims match")
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.pixels.dim() != (dim, dim) {
            return Err(Error::Contract(format!(
                "sample {}:{} has shape {:?}, expected {dim}x{dim}",
                self.source_id,
                self.slice_index,
                self.pixels.dim()
            )));
        }
        let (lo, hi) = min_max(&self.pixels);
        if lo < -1.0 || hi > 1.0 {
            return Err(Error::Contract(format!("sample values [{lo}, {hi}] leave [-1, 1]")));
        }
        Ok(())
    }
}

fn min_max(a: &Array2<f64>) -> (f64, f64) {
    a.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Linear interpolation along the slice axis to exactly `target` slices.
/// Output slice k samples the source at `k·(S−1)/(target−1)`.
pub fn resample_slices(v: &VolumeRecord, target: usize) -> Result<VolumeRecord> {
    if target < 1 {
        return Err(Error::Validation("target slice count must be >= 1".into()));
    }
    let (h, w, s) = v.shape();
    if s == target {
        return Ok(v.clone());
    }
    let mut out = Array3::zeros((h, w, target));
    for k in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            k as f64 * (s - 1) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        let t = pos - lo as f64;
        let a = v.voxels.index_axis(Axis(2), lo);
        let b = v.voxels.index_axis(Axis(2), hi);
        let mut dst = out.index_axis_mut(Axis(2), k);
        ndarray::Zip::from(&mut dst)
            .and(&a)
            .and(&b)
            .for_each(|d, &p, &q| *d = if t == 0.0 { p } else { (1.0 - t) * p + t * q });
    }
    Ok(VolumeRecord {
        voxels: out,
        modality: v.modality,
        voxel_spacing: v.voxel_spacing.map(|[a, b, c]| {
            let scale = if target > 1 { (s.max(2) - 1) as f64 / (target - 1) as f64 } else { 1.0 };
            [a, b, c * scale]
        }),
        source_id: v.source_id.clone(),
    })
}

/// `(x − min) / (max − min)`; a constant slice maps to zeros.
pub fn minmax_normalize(slice: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = min_max(slice);
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return Array2::zeros(slice.dim());
    }
    slice.mapv(|v| (v - lo) / range)
}

/// Cubic convolution kernel with a = −0.5.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps and weights for sampling a line of length `n` at `pos` with edge clamping.
#[inline]
fn taps(pos: f64, n: usize) -> ([usize; 4], [f64; 4]) {
    let base = pos.floor();
    let t = pos - base;
    let base = base as isize;
    let last = n as isize - 1;
    let idx = [-1isize, 0, 1, 2].map(|o| (base + o).clamp(0, last) as usize);
    let w = [cubic_weight(t + 1.0), cubic_weight(t), cubic_weight(1.0 - t), cubic_weight(2.0 - t)];
    (idx, w)
}

fn resize_axis(src: &Array2<f64>, out_len: usize, axis: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let in_len = if axis == 0 { h } else { w };
    let scale = in_len as f64 / out_len as f64;
    let plan: Vec<([usize; 4], [f64; 4])> = (0..out_len)
        .map(|o| taps((o as f64 + 0.5) * scale - 0.5, in_len))
        .collect();
    if axis == 1 {
        Array2::from_shape_fn((h, out_len), |(y, x)| {
            let (idx, wt) = plan[x];
            (0..4).map(|i| wt[i] * src[[y, idx[i]]]).sum()
        })
    } else {
        Array2::from_shape_fn((out_len, w), |(y, x)| {
            let (idx, wt) = plan[y];
            (0..4).map(|i| wt[i] * src[[idx[i], x]]).sum()
        })
    }
}

/// Separable bicubic resize to `dim`×`dim`, half-pixel centers, edge clamping.
pub fn resize_bicubic(slice: &Array2<f64>, dim: usize) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    if h < 4 || w < 4 {
        return Err(Error::Validation(format!("bicubic resize needs at least 4x4, got {h}x{w}")));
    }
    if dim == 0 {
        return Err(Error::Validation("resize target must be positive".into()));
    }
    let rows = if w == dim { slice.clone() } else { resize_axis(slice, dim, 1) };
    Ok(if h == dim { rows } else { resize_axis(&rows, dim, 0) })
}

/// Copies the `dim`×`dim` window whose top-left corner is `offset` (row, col).
pub fn random_crop(slice: &Array2<f64>, dim: usize, offset: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    if dim > h || dim > w || offset.0 > h - dim || offset.1 > w - dim {
        return Err(Error::Validation(format!(
            "crop of {dim} at {offset:?} does not fit a {h}x{w} slice"
        )));
    }
    Ok(slice
        .slice(s![offset.0..offset.0 + dim, offset.1..offset.1 + dim])
        .to_owned())
}

pub fn center_offset(size: usize, dim: usize) -> (usize, usize) {
    let o = (size - dim) / 2;
    (o, o)
}

fn sample_bicubic(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = src.dim();
    let (iy, wy) = taps(y, h);
    let (ix, wx) = taps(x, w);
    let mut acc = 0.0;
    for a in 0..4 {
        let mut row = 0.0;
        for b in 0..4 {
            row += wx[b] * src[[iy[a], ix[b]]];
        }
        acc += wy[a] * row;
    }
    acc
}

/// Optional horizontal flip, then rotation by `angle_deg` about the image
/// center (counter-clockwise as displayed, rows pointing down) with
/// bicubic resampling. Pixels that map outside the source take the slice
/// minimum.
pub fn augment(slice: &Array2<f64>, draw: AugmentDraw) -> Array2<f64> {
    let flipped = if draw.flip {
        slice.slice(s![.., ..;-1]).to_owned()
    } else {
        slice.clone()
    };
    if draw.angle_deg == 0.0 {
        return flipped;
    }
    let (h, w) = flipped.dim();
    let fill = min_max(&flipped).0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = draw.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // Inverse map of a counter-clockwise rotation in display coordinates.
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
            fill
        } else {
            sample_bicubic(&flipped, sy, sx)
        }
    })
}

/// Resampled, normalized and resized slices of one volume.
#[derive(Clone, Debug)]
struct PreparedVolume {
    source_id: String,
    slices: Vec<Array2<f64>>,
}

fn prepare(v: &VolumeRecord, cfg: &PreprocessConfig) -> Result<PreparedVolume> {
    let resampled = resample_slices(v, cfg.target_slices)?;
    let slices = (0..resampled.n_slices())
        .map(|k| resize_bicubic(&minmax_normalize(&resampled.slice(k)), cfg.resize_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedVolume {
        source_id: v.source_id.clone(),
        slices,
    })
}

fn finish(pixels: Array2<f64>) -> Array2<f64> {
    pixels.mapv(|v| 2.0 * v.clamp(0.0, 1.0) - 1.0)
}

/// Deterministic evaluation preprocessing: center crop, no augmentation.
pub fn preprocess_for_eval(v: &VolumeRecord, cfg: &PreprocessConfig) -> Result<Vec<SliceSample>> {
    cfg.validate()?;
    let prepared = prepare(v, cfg)?;
    let offset = center_offset(cfg.resize_dim, cfg.crop_dim);
    prepared
        .slices
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(SliceSample {
                pixels: finish(random_crop(s, cfg.crop_dim, offset)?),
                modality: v.modality,
                source_id: v.source_id.clone(),
                slice_index: k,
                augmentation: AugmentDraw::default(),
                crop_offset: offset,
            })
        })
        .collect()
}

struct Pool {
    modality: Modality,
    /// (volume index, slice index)
    items: Vec<(usize, usize)>,
    volumes: Vec<PreparedVolume>,
}

impl Pool {
    fn new(volumes: &[VolumeRecord], modality: Modality, cfg: &PreprocessConfig) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Validation(format!("no {modality} volumes to sample from")));
        }
        let mut prepared = Vec::with_capacity(volumes.len());
        let mut items = Vec::new();
        for (vi, v) in volumes.iter().enumerate() {
            if v.modality != modality {
                return Err(Error::Validation(format!(
                    "volume {} is {}, expected {modality}",
                    v.source_id, v.modality
                )));
            }
            let p = prepare(v, cfg)?;
            items.extend((0..p.slices.len()).map(|k| (vi, k)));
            prepared.push(p);
        }
        Ok(Pool {
            modality,
            items,
            volumes: prepared,
        })
    }
}

/// Serves independently shuffled CT and MR samples.
///
/// An epoch has `max(#CT slices, #MR slices)` pairs; the shorter stream
/// wraps around its own permutation. Every random choice is keyed by
/// (seed, epoch, position, modality), never by worker or call order.
pub struct UnpairedLoader {
    cfg: PreprocessConfig,
    ct: Pool,
    mr: Pool,
}

impl UnpairedLoader {
    pub fn from_dirs(ct_dir: &Path, mr_dir: &Path, cfg: PreprocessConfig) -> Result<Self> {
        let load = |dir: &Path, m: Modality| -> Result<Vec<VolumeRecord>> {
            let paths = volume::list_volumes(dir)?;
            if paths.is_empty() {
                return Err(Error::Validation(format!(
                    "{} contains no volume files",
                    dir.display()
                )));
            }
            paths.iter().map(|p| volume::load_volume(p, m)).collect()
        };
        let ct = load(ct_dir, Modality::Ct)?;
        let mr = load(mr_dir, Modality::Mr)?;
        Self::from_volumes(&ct, &mr, cfg)
    }

    pub fn from_volumes(ct: &[VolumeRecord], mr: &[VolumeRecord], cfg: PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(UnpairedLoader {
            ct: Pool::new(ct, Modality::Ct, &cfg)?,
            mr: Pool::new(mr, Modality::Mr, &cfg)?,
            cfg,
        })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.ct.items.len().max(self.mr.items.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn order(&self, pool: &Pool, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..pool.items.len()).collect();
        let mut r = rng::stream_rng(
            self.cfg.seed,
            &[rng::label("order"), rng::label(pool.modality.tag()), epoch],
        );
        idx.shuffle(&mut r);
        idx
    }

    fn sample(&self, pool: &Pool, order: &[usize], epoch: u64, position: usize) -> Result<SliceSample> {
        let (vi, si) = pool.items[order[position % order.len()]];
        let vol = &pool.volumes[vi];
        let resized = &vol.slices[si];
        let cfg = &self.cfg;
        let mut r = rng::stream_rng(
            cfg.seed,
            &[rng::label("augment"), rng::label(pool.modality.tag()), epoch, position as u64],
        );
        let span = cfg.resize_dim - cfg.crop_dim;
        let offset = (r.gen_range(0..=span), r.gen_range(0..=span));
        let draw = if cfg.augment {
            let flip = r.gen::<f64>() < cfg.flip_prob;
            let angle_deg = if cfg.max_rotation_deg > 0.0 {
                r.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            };
            AugmentDraw { flip, angle_deg }
        } else {
            AugmentDraw::default()
        };
        let cropped = random_crop(resized, cfg.crop_dim, offset)?;
        Ok(SliceSample {
            pixels: finish(augment(&cropped, draw)),
            modality: pool.modality,
            source_id: vol.source_id.clone(),
            slice_index: si,
            augmentation: draw,
            crop_offset: offset,
        })
    }

    /// Pair `position` of `epoch`.
    pub fn pair(&self, epoch: u64, position: usize) -> Result<(SliceSample, SliceSample)> {
        let ct_order = self.order(&self.ct, epoch);
        let mr_order = self.order(&self.mr, epoch);
        Ok((
            self.sample(&self.ct, &ct_order, epoch, position)?,
            self.sample(&self.mr, &mr_order, epoch, position)?,
        ))
    }

    /// Lazily yields every pair of `epoch` starting at `start`.
    pub fn epoch_from(&self, epoch: u64, start: usize) -> impl Iterator<Item = Result<(SliceSample, SliceSample)>> + '_ {
        let ct_order = self.order(&self.ct, epoch);
        let mr_order = self.order(&self.mr, epoch);
        (start..self.len()).map(move |p| {
            Ok((
                self.sample(&self.ct, &ct_order, epoch, p)?,
                self.sample(&self.mr, &mr_order, epoch, p)?,
            ))
        })
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<(SliceSample, SliceSample)>> + '_ {
        self.epoch_from(epoch, 0)
    }

    /// The whole epoch, prepared on `workers` threads. Output equals [`Self::epoch`].
    pub fn epoch_parallel(&self, epoch: u64, workers: usize) -> Result<Vec<(SliceSample, SliceSample)>> {
        let ct_order = self.order(&self.ct, epoch);
        let mr_order = self.order(&self.mr, epoch);
        let n = self.len();
        let workers = workers.clamp(1, n.max(1));
        let chunk = n.div_ceil(workers);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (ct_order, mr_order) = (&ct_order, &mr_order);
                    scope.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(n))
                            .map(|p| {
                                Ok((
                                    self.sample(&self.ct, ct_order, epoch, p)?,
                                    self.sample(&self.mr, mr_order, epoch, p)?,
                                ))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(n);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

/// Convenience constructor matching the directory-based entry point.
pub fn make_loader(ct_dir: &Path, mr_dir: &Path, cfg: PreprocessConfig) -> Result<UnpairedLoader> {
    UnpairedLoader::from_dirs(ct_dir, mr_dir, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minmax_examples() {
        let a = array![[2.0, 4.0, 6.0]];
        assert_eq!(minmax_normalize(&a), array![[0.0, 0.5, 1.0]]);
        assert_eq!(minmax_normalize(&Array2::from_elem((3, 3), 7.0)), Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        // Partition of unity.
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s = cubic_weight(t + 1.0) + cubic_weight(t) + cubic_weight(1.0 - t) + cubic_weight(2.0 - t);
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_corners_and_bounds() {
        let a = Array2::from_shape_fn((6, 6), |(y, x)| (y * 6 + x) as f64);
        assert_eq!(random_crop(&a, 4, (0, 0)).unwrap()[[0, 0]], 0.0);
        let br = random_crop(&a, 4, (2, 2)).unwrap();
        assert_eq!(br[[3, 3]], 35.0);
        assert!(random_crop(&a, 4, (3, 0)).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let a = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f64);
        let d = AugmentDraw { flip: true, angle_deg: 0.0 };
        assert_eq!(augment(&augment(&a, d), d), a);
        assert_eq!(augment(&a, AugmentDraw::default()), a);
        assert_ne!(augment(&a, d), a);
    }

    #[test]
    fn config_validation() {
        let mut c = PreprocessConfig::default();
        c.validate().unwrap();
        c.crop_dim = 300;
        assert!(c.validate().is_err());
        let c = PreprocessConfig { flip_prob: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

//! Embedding similarity, SSIM index, mutual information and pixel cosine.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, SsimConstants};
use crate::networks::{Direction, ModelBundle};
use crate::pipeline::{self, PreprocessConfig, SliceSample};
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{Modality, VolumeRecord};

pub const DEFAULT_MI_BINS: usize = 64;
pub const MAX_FID_PAIRS: usize = 10_000;
/// Side of the pooled image fed to the random projection.
pub const POOL_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    PretrainedDensenet121,
    FixedRandomProjection,
}

/// Frozen image embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExtractor {
    pub kind: ExtractorKind,
    pub embedding_dim: usize,
    pub weights_ref: String,
    /// embedding_dim × POOL_SIZE², row-major.
    projection: Vec<f64>,
}

impl EmbeddingExtractor {
    /// Seeded Gaussian map of the area-pooled 32×32 image, N(0, 1/1024) entries.
    pub fn fixed_random_projection(seed: u64, embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        let inputs = POOL_SIZE * POOL_SIZE;
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("valid std");
        let mut r = rng::stream_rng(seed, &[rng::label("fid-projection")]);
        Ok(EmbeddingExtractor {
            kind: ExtractorKind::FixedRandomProjection,
            embedding_dim,
            weights_ref: format!("random-projection:seed={seed}:dim={embedding_dim}"),
            projection: (0..embedding_dim * inputs).map(|_| normal.sample(&mut r)).collect(),
        })
    }

    pub fn default_projection() -> Self {
        Self::fixed_random_projection(0, 256).expect("valid defaults")
    }

    /// No DenseNet-121 weights ship with this crate, so this always fails.
    pub fn pretrained_densenet121(weights_ref: &str) -> Result<Self> {
        Err(Error::Unsupported(format!(
            "pretrained_densenet121 extractor needs ImageNet weights ({weights_ref:?}); \
             none are bundled, use fixed_random_projection"
        )))
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "fixed_random_projection" | "random" => Self::fixed_random_projection(seed, 256),
            "pretrained_densenet121" | "densenet121" => Self::pretrained_densenet121("densenet121"),
            other => Err(Error::Validation(format!("unknown extractor {other:?}"))),
        }
    }

    pub fn embed(&self, image: &Array2<f64>) -> Vec<f64> {
        let pooled = area_resize(image, POOL_SIZE);
        let v: Vec<f64> = pooled.iter().copied().collect();
        self.projection
            .chunks_exact(v.len())
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Box-filter resize with fractional cell overlaps.
pub fn area_resize(image: &Array2<f64>, dim: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let weights = |n: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / dim as f64;
        (0..dim)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                (lo.floor() as usize..(hi.ceil() as usize).min(n))
                    .filter_map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                        (overlap > 0.0).then_some((i, overlap))
                    })
                    .collect()
            })
            .collect()
    };
    let (wy, wx) = (weights(h), weights(w));
    Array2::from_shape_fn((dim, dim), |(y, x)| {
        let mut acc = 0.0;
        for &(iy, a) in &wy[y] {
            for &(ix, b) in &wx[x] {
                acc += a * b * image[[iy, ix]];
            }
        }
        acc
    })
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|a| a / n).collect()
    }
}

fn canonical(mut set: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    set.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    set
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine between L2-normalized embeddings of every (generated, real)
/// pair, or of `MAX_FID_PAIRS` pairs drawn with `pair_seed` when there are
/// more. Higher means more similar.
pub fn fid_similarity(
    generated: &[Array2<f64>],
    real: &[Array2<f64>],
    ex: &EmbeddingExtractor,
    pair_seed: u64,
) -> Result<f64> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::Validation("fid_similarity needs non-empty image sets".into()));
    }
    let g = canonical(generated.iter().map(|i| normalize(ex.embed(i))).collect());
    let r = canonical(real.iter().map(|i| normalize(ex.embed(i))).collect());
    let pairs = g.len() * r.len();
    if pairs <= MAX_FID_PAIRS {
        let mut acc = 0.0;
        for a in &g {
            for b in &r {
                acc += dot(a, b);
            }
        }
        return Ok(acc / pairs as f64);
    }
    let mut rng = rng::stream_rng(pair_seed, &[rng::label("fid-pairs")]);
    let mut acc = 0.0;
    for _ in 0..MAX_FID_PAIRS {
        let (i, j) = (rng.gen_range(0..g.len()), rng.gen_range(0..r.len()));
        acc += dot(&g[i], &r[j]);
    }
    Ok(acc / MAX_FID_PAIRS as f64)
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Contract(format!("{what}: empty images")));
    }
    Ok(())
}

/// Whole-image SSIM of two [-1, 1] images, taken on [0, 1].
pub fn ssim_index(a: &Array2<f64>, b: &Array2<f64>, k: SsimConstants) -> Result<f64> {
    check_pair(a, b, "ssim_index")?;
    let ua: Vec<f64> = a.iter().map(|v| (v + 1.0) * 0.5).collect();
    let ub: Vec<f64> = b.iter().map(|v| (v + 1.0) * 0.5).collect();
    Ok(losses::ssim_global(&ua, &ub, k))
}

fn bin_of(v: f64, bins: usize) -> usize {
    let t = ((v + 1.0) * 0.5 * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Joint histogram over [-1, 1] with `bins` cells per axis, as probabilities.
pub fn joint_histogram(a: &Array2<f64>, b: &Array2<f64>, bins: usize) -> Vec<f64> {
    let mut joint = vec![0.0; bins * bins];
    for (&p, &q) in a.iter().zip(b) {
        joint[bin_of(p, bins) * bins + bin_of(q, bins)] += 1.0;
    }
    let n = a.len() as f64;
    joint.iter_mut().for_each(|c| *c /= n);
    joint
}

/// Binned mutual information in nats.
pub fn mutual_information(a: &Array2<f64>, b: &Array2<f64>, bins: usize) -> Result<f64> {
    check_pair(a, b, "mutual_information")?;
    if bins < 2 {
        return Err(Error::Validation(format!("mutual_information needs >= 2 bins, got {bins}")));
    }
    let joint = joint_histogram(a, b, bins);
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Binned marginal entropy in nats.
pub fn entropy(a: &Array2<f64>, bins: usize) -> f64 {
    let mut p = vec![0.0; bins];
    for &v in a {
        p[bin_of(v, bins)] += 1.0;
    }
    let n = a.len() as f64;
    p.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Cosine similarity of the flattened images.
pub fn pixacc(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_pair(a, b, "pixacc")?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("pixacc is undefined for an all-zero image".into()));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub fid: f64,
    pub ssim: f64,
    pub mi: f64,
    pub pixacc: f64,
    pub n_slices: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_slices >= 1
            && (-1.0..=1.0).contains(&self.pixacc)
            && (-1.0..=1.0).contains(&self.ssim)
            && self.mi >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("metrics report out of range: {self:?}")))
        }
    }
}

/// Metrics of one test slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub direction: Direction,
    pub source_id: String,
    pub slice_index: usize,
    pub ssim: f64,
    pub mi: f64,
    pub pixacc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mi_bins: usize,
    pub fid_pair_seed: u64,
    pub ssim_constants: SsimConstants,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mi_bins: DEFAULT_MI_BINS,
            fid_pair_seed: 0,
            ssim_constants: SsimConstants::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// CT→MR then MR→CT.
    pub reports: [MetricsReport; 2],
    /// Sorted by direction, source id and slice index.
    pub per_slice: Vec<SliceMetrics>,
}

fn image_of(t: &Tensor) -> Array2<f64> {
    let (_, _, h, w) = t.dims4();
    Array2::from_shape_vec((h, w), t.data().to_vec()).expect("dims match")
}

fn unit(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| (v + 1.0) * 0.5)
}

/// Evaluation preprocessing of a set of volumes, sorted by (source id, slice).
pub fn eval_slices(volumes: &[VolumeRecord], modality: Modality, cfg: &PreprocessConfig) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for v in volumes {
        if v.modality != modality {
            return Err(Error::Validation(format!(
                "test volume {} is {}, expected {modality}",
                v.source_id, v.modality
            )));
        }
        out.extend(pipeline::preprocess_for_eval(v, cfg)?);
    }
    out.sort_by(|a, b| (&a.source_id, a.slice_index).cmp(&(&b.source_id, b.slice_index)));
    Ok(out)
}

fn evaluate_direction(
    bundle: &ModelBundle,
    direction: Direction,
    inputs: &[SliceSample],
    real_targets: &[SliceSample],
    ex: &EmbeddingExtractor,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<SliceMetrics>)> {
    if inputs.is_empty() {
        return Err(Error::Validation(format!("no {} test slices", direction.source())));
    }
    let forward = bundle.generator_to(direction.target());
    let backward = bundle.generator_to(direction.source());
    let mut translated_set = Vec::with_capacity(inputs.len());
    let mut per_slice = Vec::with_capacity(inputs.len());
    for s in inputs {
        let ctx = |e: Error| match e {
            Error::Contract(m) | Error::Validation(m) => {
                Error::Contract(format!("{direction} slice {}:{}: {m}", s.source_id, s.slice_index))
            }
            other => other,
        };
        let x = s.to_tensor();
        let t = forward.translate(&x)?;
        let r = backward.translate(&t)?;
        let (t, r) = (image_of(&t), image_of(&r));
        per_slice.push(SliceMetrics {
            direction,
            source_id: s.source_id.clone(),
            slice_index: s.slice_index,
            ssim: ssim_index(&s.pixels, &t, opts.ssim_constants).map_err(ctx)?,
            mi: mutual_information(&s.pixels, &t, opts.mi_bins).map_err(ctx)?,
            pixacc: pixacc(&unit(&s.pixels), &unit(&r)).map_err(ctx)?,
        });
        translated_set.push(t);
    }
    let real: Vec<Array2<f64>> = real_targets.iter().map(|s| s.pixels.clone()).collect();
    let n = per_slice.len() as f64;
    let mean = |f: fn(&SliceMetrics) -> f64| per_slice.iter().map(f).sum::<f64>() / n;
    let report = MetricsReport {
        direction,
        fid: fid_similarity(&translated_set, &real, ex, opts.fid_pair_seed)?,
        ssim: mean(|m| m.ssim),
        mi: mean(|m| m.mi),
        pixacc: mean(|m| m.pixacc),
        n_slices: per_slice.len(),
    };
    Ok((report, per_slice))
}

/// Both translation directions over the test volumes.
pub fn evaluate_model(
    bundle: &ModelBundle,
    ct_test: &[VolumeRecord],
    mr_test: &[VolumeRecord],
    cfg: &PreprocessConfig,
    ex: &EmbeddingExtractor,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let ct = eval_slices(ct_test, Modality::Ct, cfg)?;
    let mr = eval_slices(mr_test, Modality::Mr, cfg)?;
    let (a, mut per_a) = evaluate_direction(bundle, Direction::CtToMr, &ct, &mr, ex, opts)?;
    let (b, per_b) = evaluate_direction(bundle, Direction::MrToCt, &mr, &ct, ex, opts)?;
    per_a.extend(per_b);
    Ok(Evaluation {
        reports: [a, b],
        per_slice: per_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_level_self_information_is_ln2() {
        let a = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { -1.0 } else { 1.0 });
        let mi = mutual_information(&a, &a, 2).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_no_information() {
        let a = Array2::from_elem((5, 5), 0.3);
        let b = Array2::from_shape_fn((5, 5), |(y, x)| ((y * 5 + x) as f64 / 12.0) - 1.0);
        assert_eq!(mutual_information(&a, &b, 8).unwrap(), 0.0);
    }

    #[test]
    fn pixacc_cases() {
        let a = Array2::from_shape_fn((3, 3), |(y, x)| (y + x) as f64 + 1.0);
        assert!((pixacc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let mut p = Array2::zeros((2, 2));
        let mut q = Array2::zeros((2, 2));
        p[[0, 0]] = 1.0;
        q[[1, 1]] = 2.0;
        assert_eq!(pixacc(&p, &q).unwrap(), 0.0);
        assert!(pixacc(&p, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn area_resize_preserves_constants_and_means() {
        let c = Array2::from_elem((50, 70), 0.25);
        assert!(area_resize(&c, 32).iter().all(|v| (v - 0.25).abs() < 1e-12));
        let r = Array2::from_shape_fn((64, 64), |(y, x)| (y * 64 + x) as f64);
        let p = area_resize(&r, 32);
        assert!((p.mean().unwrap() - r.mean().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn densenet_is_unsupported() {
        assert!(matches!(
            EmbeddingExtractor::by_name("pretrained_densenet121", 0),
            Err(Error::Unsupported(_))
        ));
    }
}

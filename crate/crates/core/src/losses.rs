//! Generator and discriminator objectives.
//!
//! Least-squares adversarial terms, mean-reduced L1 cycle and identity
//! terms, and an SSIM term. Network outputs live in [-1, 1]; the SSIM
//! statistics are taken after remapping to [0, 1] because the stabilizing
//! constants assume that range.
//!
//! The plain functions here are the same kernels the autograd tape calls,
//! so a value logged during training is bitwise equal to evaluating these
//! functions on the same tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants { c1: 0.0001, c2: 0.009 }
    }
}

impl SsimConstants {
    pub fn validate(&self) -> Result<()> {
        if self.c1 > 0.0 && self.c2 > 0.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "SSIM constants must be positive, got c1={} c2={}",
                self.c1, self.c2
            )))
        }
    }
}

/// How the SSIM term is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// One mean/variance/covariance per image pair.
    #[default]
    Global,
    /// Mean SSIM over Gaussian windows (valid positions only).
    Windowed { size: usize, sigma: f64 },
    /// Batch-level, non-central moments between the two translations,
    /// with the numerator written as (μa·μb + c1). Not a similarity
    /// index (a pair with itself does not score 1); kept for comparison runs.
    Literal,
}

impl SsimMode {
    pub fn windowed_default() -> Self {
        SsimMode::Windowed { size: 11, sigma: 1.5 }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SsimMode::Global),
            "windowed" => Ok(Self::windowed_default()),
            "literal" => Ok(SsimMode::Literal),
            other => Err(Error::Validation(format!(
                "unknown ssim_mode {other:?} (expected global, windowed or literal)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SsimMode::Global => "global",
            SsimMode::Windowed { .. } => "windowed",
            SsimMode::Literal => "literal",
        }
    }
}

/// Coefficients of the composite generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            lambda_ssim: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("lambda_ssim", self.lambda_ssim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted generator terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorTerms {
    pub gan: f64,
    pub cycle: f64,
    pub identity: f64,
    pub ssim: f64,
}

/// Every loss value logged for one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub cycle: f64,
    pub identity: f64,
    pub ssim: f64,
    pub generator_total: f64,
    pub dis_ct: f64,
    pub dis_mr: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,gan,cycle,identity,ssim,generator_total,dis_ct,dis_mr";

impl LossBreakdown {
    pub fn terms(&self) -> GeneratorTerms {
        GeneratorTerms {
            gan: self.gan,
            cycle: self.cycle,
            identity: self.identity,
            ssim: self.ssim,
        }
    }

    /// One loss-log row. `{}` formatting of f64 round-trips exactly.
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            step, self.gan, self.cycle, self.identity, self.ssim, self.generator_total, self.dis_ct, self.dis_mr
        )
    }

    pub fn parse_csv_row(line: &str) -> std::result::Result<(u64, LossBreakdown), String> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(format!("expected 8 fields, found {}", fields.len()));
        }
        let step = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| format!("bad step {:?}: {e}", fields[0]))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.trim().parse::<f64>().map_err(|e| format!("bad value {f:?}: {e}"))?;
        }
        Ok((
            step,
            LossBreakdown {
                gan: v[0],
                cycle: v[1],
                identity: v[2],
                ssim: v[3],
                generator_total: v[4],
                dis_ct: v[5],
                dis_mr: v[6],
            },
        ))
    }

    /// Names the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("gan", self.gan),
            ("cycle", self.cycle),
            ("identity", self.identity),
            ("ssim", self.ssim),
            ("generator_total", self.generator_total),
            ("dis_ct", self.dis_ct),
            ("dis_mr", self.dis_mr),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub(crate) fn mean_squared_deviation(x: &[f64], target: f64) -> f64 {
    let mut acc = 0.0;
    for &v in x {
        let d = v - target;
        acc += d * d;
    }
    acc / x.len() as f64
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (p, q) in a.iter().zip(b) {
        acc += (p - q).abs();
    }
    acc / a.len() as f64
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Adversarial generator term: mean (D(fake) - 1)² summed over both directions.
pub fn gan_loss(d_scores_on_translated_mr: &Tensor, d_scores_on_translated_ct: &Tensor) -> f64 {
    let a = mean_squared_deviation(d_scores_on_translated_mr.data(), 1.0);
    let b = mean_squared_deviation(d_scores_on_translated_ct.data(), 1.0);
    1.0 * a + 1.0 * b
}

pub fn cycle_loss(x_mr: &Tensor, recovered_mr: &Tensor, x_ct: &Tensor, recovered_ct: &Tensor) -> Result<f64> {
    check_same(x_mr, recovered_mr, "cycle loss (MR)")?;
    check_same(x_ct, recovered_ct, "cycle loss (CT)")?;
    let a = mean_abs_diff(recovered_mr.data(), x_mr.data());
    let b = mean_abs_diff(recovered_ct.data(), x_ct.data());
    Ok(1.0 * a + 1.0 * b)
}

pub fn identity_loss(g_ct_on_ct: &Tensor, x_ct: &Tensor, g_mr_on_mr: &Tensor, x_mr: &Tensor) -> Result<f64> {
    check_same(g_ct_on_ct, x_ct, "identity loss (CT)")?;
    check_same(g_mr_on_mr, x_mr, "identity loss (MR)")?;
    let a = mean_abs_diff(g_ct_on_ct.data(), x_ct.data());
    let b = mean_abs_diff(g_mr_on_mr.data(), x_mr.data());
    Ok(1.0 * a + 1.0 * b)
}

/// 1 - SSIM between two [-1, 1] images (batch mean for N > 1), global statistics.
pub fn ssim_loss(x: &Tensor, y: &Tensor, k: SsimConstants) -> Result<f64> {
    ssim_loss_with_mode(x, y, k, SsimMode::Global)
}

pub fn ssim_loss_with_mode(x: &Tensor, y: &Tensor, k: SsimConstants, mode: SsimMode) -> Result<f64> {
    check_same(x, y, "ssim loss")?;
    if let SsimMode::Windowed { size, .. } = mode {
        let (_, _, h, w) = x.dims4();
        if size > h || size > w {
            return Err(Error::Contract(format!("SSIM window {size} larger than {h}x{w} image")));
        }
    }
    Ok(ssim_loss_batch(x, y, k, mode))
}

/// The generator's SSIM term: each input against its own translation,
/// averaged over the two directions. In literal mode the two translations
/// are compared with each other instead.
pub fn ssim_term(
    x_ct: &Tensor,
    translated_mr: &Tensor,
    x_mr: &Tensor,
    translated_ct: &Tensor,
    k: SsimConstants,
    mode: SsimMode,
) -> Result<f64> {
    if mode == SsimMode::Literal {
        return ssim_loss_with_mode(translated_mr, translated_ct, k, mode);
    }
    let a = ssim_loss_with_mode(x_ct, translated_mr, k, mode)?;
    let b = ssim_loss_with_mode(x_mr, translated_ct, k, mode)?;
    Ok(0.5 * a + 0.5 * b)
}

pub fn generator_total_loss(parts: GeneratorTerms, w: LossWeights) -> f64 {
    parts.gan + w.lambda_cyc * parts.cycle + w.lambda_id * parts.identity + w.lambda_ssim * parts.ssim
}

/// mean (D(real) - 1)² + mean D(translated)², no ½ factor.
pub fn discriminator_loss(d_on_real: &Tensor, d_on_translated: &Tensor) -> f64 {
    let a = mean_squared_deviation(d_on_real.data(), 1.0);
    let b = mean_squared_deviation(d_on_translated.data(), 0.0);
    1.0 * a + 1.0 * b
}

#[inline]
fn unit(v: f64) -> f64 {
    (v + 1.0) * 0.5
}

struct Moments {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn central_moments(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (&p, &q) in a.iter().zip(b) {
        let (da, db) = (p - mu_a, q - mu_b);
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    Moments {
        mu_a,
        mu_b,
        var_a: var_a / n,
        var_b: var_b / n,
        cov: cov / n,
    }
}

fn ssim_from_moments(m: &Moments, k: SsimConstants) -> f64 {
    let num = (2.0 * m.mu_a * m.mu_b + k.c1) * (2.0 * m.cov + k.c2);
    let den = (m.mu_a * m.mu_a + m.mu_b * m.mu_b + k.c1) * (m.var_a + m.var_b + k.c2);
    num / den
}

/// Whole-image SSIM of two equally sized images already in [0, 1].
pub fn ssim_global(a: &[f64], b: &[f64], k: SsimConstants) -> f64 {
    ssim_from_moments(&central_moments(a, b), k)
}

/// d SSIM / d a and d SSIM / d b for [`ssim_global`].
fn ssim_global_grad(a: &[f64], b: &[f64], k: SsimConstants) -> (Vec<f64>, Vec<f64>) {
    let m = central_moments(a, b);
    let n = a.len() as f64;
    let a1 = 2.0 * m.mu_a * m.mu_b + k.c1;
    let a2 = 2.0 * m.cov + k.c2;
    let b1 = m.mu_a * m.mu_a + m.mu_b * m.mu_b + k.c1;
    let b2 = m.var_a + m.var_b + k.c2;
    let s = a1 * a2 / (b1 * b2);
    let den = b1 * b2;
    let grad = |own: &[f64], other: &[f64], mu_own: f64, mu_other: f64| -> Vec<f64> {
        own.iter()
            .zip(other)
            .map(|(&p, &q)| {
                let d_a1 = 2.0 * mu_other / n;
                let d_a2 = 2.0 * (q - mu_other) / n;
                let d_b1 = 2.0 * mu_own / n;
                let d_b2 = 2.0 * (p - mu_own) / n;
                (d_a1 * a2 + a1 * d_a2 - s * (d_b1 * b2 + b1 * d_b2)) / den
            })
            .collect()
    };
    (grad(a, b, m.mu_a, m.mu_b), grad(b, a, m.mu_b, m.mu_a))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an h×w image.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| win[j] * img[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| win[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let g = map[y * ow + x];
            for j in 0..k {
                rows[(y + j) * ow + x] += win[j] * g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let g = rows[y * ow + x];
            for j in 0..k {
                out[y * w + x + j] += win[j] * g;
            }
        }
    }
    out
}

struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn local_stats(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> LocalStats {
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
    LocalStats {
        mu_a: filter_valid(a, h, w, win),
        mu_b: filter_valid(b, h, w, win),
        e_aa: filter_valid(&sq(a, a), h, w, win),
        e_bb: filter_valid(&sq(b, b), h, w, win),
        e_ab: filter_valid(&sq(a, b), h, w, win),
    }
}

fn ssim_windowed(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64], k: SsimConstants) -> f64 {
    let st = local_stats(a, b, h, w, win);
    let p = st.mu_a.len();
    let mut acc = 0.0;
    for i in 0..p {
        let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
        let m = Moments {
            mu_a: ma,
            mu_b: mb,
            var_a: st.e_aa[i] - ma * ma,
            var_b: st.e_bb[i] - mb * mb,
            cov: st.e_ab[i] - ma * mb,
        };
        acc += ssim_from_moments(&m, k);
    }
    acc / p as f64
}

fn ssim_windowed_grad(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    win: &[f64],
    k: SsimConstants,
) -> (Vec<f64>, Vec<f64>) {
    let st = local_stats(a, b, h, w, win);
    let p = st.mu_a.len();
    let inv_p = 1.0 / p as f64;
    let mut g_mu_a = vec![0.0; p];
    let mut g_mu_b = vec![0.0; p];
    let mut g_eaa = vec![0.0; p];
    let mut g_ebb = vec![0.0; p];
    let mut g_eab = vec![0.0; p];
    for i in 0..p {
        let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
        let a1 = 2.0 * ma * mb + k.c1;
        let a2 = 2.0 * (st.e_ab[i] - ma * mb) + k.c2;
        let b1 = ma * ma + mb * mb + k.c1;
        let b2 = (st.e_aa[i] - ma * ma) + (st.e_bb[i] - mb * mb) + k.c2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        g_mu_a[i] = inv_p * (2.0 * mb * a2 - 2.0 * mb * a1 - s * (2.0 * ma * b2 - 2.0 * ma * b1)) / den;
        g_mu_b[i] = inv_p * (2.0 * ma * a2 - 2.0 * ma * a1 - s * (2.0 * mb * b2 - 2.0 * mb * b1)) / den;
        g_eaa[i] = -inv_p * s / b2;
        g_ebb[i] = -inv_p * s / b2;
        g_eab[i] = inv_p * 2.0 * a1 / den;
    }
    let u_mu_a = filter_valid_adjoint(&g_mu_a, h, w, win);
    let u_mu_b = filter_valid_adjoint(&g_mu_b, h, w, win);
    let u_eaa = filter_valid_adjoint(&g_eaa, h, w, win);
    let u_ebb = filter_valid_adjoint(&g_ebb, h, w, win);
    let u_eab = filter_valid_adjoint(&g_eab, h, w, win);
    let n = h * w;
    let ga = (0..n).map(|i| u_mu_a[i] + 2.0 * a[i] * u_eaa[i] + b[i] * u_eab[i]).collect();
    let gb = (0..n).map(|i| u_mu_b[i] + 2.0 * b[i] * u_ebb[i] + a[i] * u_eab[i]).collect();
    (ga, gb)
}

fn literal_parts(a: &[f64], b: &[f64], k: SsimConstants) -> (f64, [f64; 7]) {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let s_a = a.iter().map(|v| v * v).sum::<f64>() / n;
    let s_b = b.iter().map(|v| v * v).sum::<f64>() / n;
    let s_ab = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / n;
    let a1 = mu_a * mu_b + k.c1;
    let a2 = 2.0 * s_ab + k.c2;
    let b1 = mu_a * mu_a + mu_b * mu_b + k.c1;
    let b2 = s_a * s_a + s_b * s_b + k.c2;
    (a1 * a2 / (b1 * b2), [mu_a, mu_b, s_a, s_b, a1, a2, b1 * b2])
}

fn unit_planes(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, c, h, w) = t.dims4();
    let plane = c * h * w;
    (0..n)
        .map(|i| t.data()[i * plane..(i + 1) * plane].iter().map(|&v| unit(v)).collect())
        .collect()
}

/// Batch mean of 1 - SSIM for network-range tensors.
pub(crate) fn ssim_loss_batch(a: &Tensor, b: &Tensor, k: SsimConstants, mode: SsimMode) -> f64 {
    let (_, c, h, w) = a.dims4();
    match mode {
        SsimMode::Literal => {
            let a: Vec<f64> = a.data().iter().map(|&v| unit(v)).collect();
            let b: Vec<f64> = b.data().iter().map(|&v| unit(v)).collect();
            1.0 - literal_parts(&a, &b, k).0
        }
        SsimMode::Global | SsimMode::Windowed { .. } => {
            let (pa, pb) = (unit_planes(a), unit_planes(b));
            let win = match mode {
                SsimMode::Windowed { size, sigma } => gaussian_window(size, sigma),
                _ => Vec::new(),
            };
            let mut acc = 0.0;
            for (x, y) in pa.iter().zip(&pb) {
                let s = if win.is_empty() {
                    ssim_global(x, y, k)
                } else {
                    assert_eq!(c, 1, "windowed SSIM expects single-channel images");
                    ssim_windowed(x, y, h, w, &win, k)
                };
                acc += 1.0 - s;
            }
            acc / pa.len() as f64
        }
    }
}

/// Gradients of [`ssim_loss_batch`] with respect to both network-range inputs.
pub(crate) fn ssim_loss_batch_grad(a: &Tensor, b: &Tensor, k: SsimConstants, mode: SsimMode) -> (Tensor, Tensor) {
    let (n, _, h, w) = a.dims4();
    let (mut ga, mut gb) = (Tensor::zeros(a.shape()), Tensor::zeros(b.shape()));
    match mode {
        SsimMode::Literal => {
            let ua: Vec<f64> = a.data().iter().map(|&v| unit(v)).collect();
            let ub: Vec<f64> = b.data().iter().map(|&v| unit(v)).collect();
            let (s, [mu_a, mu_b, s_a, s_b, a1, a2, den]) = literal_parts(&ua, &ub, k);
            let cnt = ua.len() as f64;
            let b1 = mu_a * mu_a + mu_b * mu_b + k.c1;
            let b2 = s_a * s_a + s_b * s_b + k.c2;
            for i in 0..ua.len() {
                let (p, q) = (ua[i], ub[i]);
                let da = (mu_b / cnt * a2 + a1 * 2.0 * q / cnt - s * (2.0 * mu_a / cnt * b2 + b1 * 4.0 * s_a * p / cnt)) / den;
                let db = (mu_a / cnt * a2 + a1 * 2.0 * p / cnt - s * (2.0 * mu_b / cnt * b2 + b1 * 4.0 * s_b * q / cnt)) / den;
                // loss = 1 - s and d unit / d v = 1/2.
                ga.data_mut()[i] = -0.5 * da;
                gb.data_mut()[i] = -0.5 * db;
            }
        }
        SsimMode::Global | SsimMode::Windowed { .. } => {
            let (pa, pb) = (unit_planes(a), unit_planes(b));
            let win = match mode {
                SsimMode::Windowed { size, sigma } => gaussian_window(size, sigma),
                _ => Vec::new(),
            };
            let plane = pa[0].len();
            let scale = -0.5 / n as f64;
            for (i, (x, y)) in pa.iter().zip(&pb).enumerate() {
                let (dx, dy) = if win.is_empty() {
                    ssim_global_grad(x, y, k)
                } else {
                    ssim_windowed_grad(x, y, h, w, &win, k)
                };
                for j in 0..plane {
                    ga.data_mut()[i * plane + j] = scale * dx[j];
                    gb.data_mut()[i * plane + j] = scale * dy[j];
                }
            }
        }
    }
    (ga, gb)
}

//! Helpers and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use ctmr_core::autograd::Graph;
use ctmr_core::config::Settings;
use ctmr_core::losses::{self, GeneratorTerms, SsimConstants};
use ctmr_core::networks::ModelBundle;
use ctmr_core::phantom::{self, PhantomSpec};
use ctmr_core::pipeline::UnpairedLoader;
use ctmr_core::trainer::{self, Batch};
use ctmr_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

pub fn image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| r.gen_range(-1.0..1.0))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---- elementwise oracles -------------------------------------------------

pub fn msd_oracle(t: &Tensor, target: f64) -> f64 {
    let mut acc = 0.0;
    for &v in t.data() {
        acc += (v - target) * (v - target);
    }
    acc / t.len() as f64
}

pub fn l1_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a.data()[i] - b.data()[i]).abs();
    }
    acc / a.len() as f64
}

/// 1 − SSIM per batch item with double-loop moments on [0, 1], averaged over the batch.
pub fn ssim_loss_oracle(x: &Tensor, y: &Tensor, k: SsimConstants) -> f64 {
    let (n, _, h, w) = x.dims4();
    let mut total = 0.0;
    for i in 0..n {
        let xi = x.batch_item(i);
        let yi = y.batch_item(i);
        let px = |r: usize, c: usize| (xi.data()[r * w + c] + 1.0) / 2.0;
        let py = |r: usize, c: usize| (yi.data()[r * w + c] + 1.0) / 2.0;
        let m = (h * w) as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                mx += px(r, c);
                my += py(r, c);
            }
        }
        mx /= m;
        my /= m;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                vx += (px(r, c) - mx).powi(2);
                vy += (py(r, c) - my).powi(2);
                cxy += (px(r, c) - mx) * (py(r, c) - my);
            }
        }
        vx /= m;
        vy /= m;
        cxy /= m;
        let s = ((2.0 * mx * my + k.c1) * (2.0 * cxy + k.c2)) / ((mx * mx + my * my + k.c1) * (vx + vy + k.c2));
        total += 1.0 - s;
    }
    total / n as f64
}

/// Mutual information from an independently built joint histogram over [-1, 1].
pub fn mi_oracle(a: &Array2<f64>, b: &Array2<f64>, bins: usize) -> f64 {
    let bin = |v: f64| {
        let mut i = 0;
        while i + 1 < bins && v >= -1.0 + 2.0 * (i + 1) as f64 / bins as f64 {
            i += 1;
        }
        i
    };
    let mut counts = vec![vec![0usize; bins]; bins];
    for (p, q) in a.iter().zip(b.iter()) {
        counts[bin(*p)][bin(*q)] += 1;
    }
    let n = a.len() as f64;
    let row: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64 / n).collect();
    let col: Vec<f64> = (0..bins).map(|j| counts.iter().map(|r| r[j]).sum::<usize>() as f64 / n).collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = counts[i][j] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (row[i] * col[j])).ln();
            }
        }
    }
    mi
}

// ---- toy networks ----------------------------------------------------------

/// 16×16 networks small enough for finite differences.
pub fn toy_settings() -> Settings {
    let mut s = Settings::default().with_seed(11);
    s.generator.base_channels = 8;
    s.generator.n_resblocks = 1;
    s.discriminator.base_channels = 8;
    s.discriminator.n_layers = 2;
    s.preprocess.target_slices = 1;
    s.preprocess.resize_dim = 16;
    s.preprocess.crop_dim = 16;
    s.train.replay_buffer_size = 4;
    s
}

/// Smooth random images kept away from zero (CT positive, MR negative), so
/// that the L1 residuals of a freshly built model sit far from their kinks.
pub fn toy_batch(seed: u64, n: usize, size: usize) -> Batch {
    let mut r = rng(seed);
    let mut make = |sign: f64| {
        let items: Vec<Tensor> = (0..n)
            .map(|_| {
                let (fy, fx, ph) = (r.gen_range(0.5..2.0), r.gen_range(0.5..2.0), r.gen_range(0.0..6.0));
                let data = (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64 / size as f64, (i % size) as f64 / size as f64);
                        let v = 0.55 + 0.3 * (fy * 6.0 * y + ph).sin() * (fx * 6.0 * x).cos() + r.gen_range(-0.05..0.05);
                        sign * v
                    })
                    .collect();
                Tensor::from_image(size, size, data).unwrap()
            })
            .collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>()).unwrap()
    };
    let ct = make(1.0);
    let mr = make(-1.0);
    Batch { ct, mr }
}

/// Generator terms computed without the tape: eager forwards plus the loss functions.
pub fn eager_terms(bundle: &ModelBundle, batch: &Batch, s: &Settings) -> GeneratorTerms {
    let t_mr = bundle.g_mr.translate(&batch.ct).unwrap();
    let r_ct = bundle.g_ct.translate(&t_mr).unwrap();
    let t_ct = bundle.g_ct.translate(&batch.mr).unwrap();
    let r_mr = bundle.g_mr.translate(&t_ct).unwrap();
    let id_ct = bundle.g_ct.translate(&batch.ct).unwrap();
    let id_mr = bundle.g_mr.translate(&batch.mr).unwrap();
    let s_mr = bundle.d_mr.score(&t_mr).unwrap();
    let s_ct = bundle.d_ct.score(&t_ct).unwrap();
    GeneratorTerms {
        gan: losses::gan_loss(&s_mr, &s_ct),
        cycle: losses::cycle_loss(&batch.mr, &r_mr, &batch.ct, &r_ct).unwrap(),
        identity: losses::identity_loss(&id_ct, &batch.ct, &id_mr, &batch.mr).unwrap(),
        ssim: losses::ssim_term(&batch.ct, &t_mr, &batch.mr, &t_ct, s.ssim_constants, s.ssim_mode).unwrap(),
    }
}

/// (network, parameter index, element index) of a generator scalar.
#[derive(Clone, Copy, Debug)]
pub struct Coord {
    pub net: usize,
    pub param: usize,
    pub elem: usize,
}

pub fn gen_param_mut(bundle: &mut ModelBundle, c: Coord) -> &mut f64 {
    let g = if c.net == 0 { &mut bundle.g_ct } else { &mut bundle.g_mr };
    &mut g.params.params[c.param].value.data_mut()[c.elem]
}

/// Draws generator scalars uniformly, alternating between the two networks.
pub fn coord_stream(bundle: &ModelBundle, seed: u64) -> impl Iterator<Item = Coord> + '_ {
    let mut r = rng(seed);
    (0..).map(move |i: usize| {
        let net = i % 2;
        let g = if net == 0 { &bundle.g_ct } else { &bundle.g_mr };
        let mut k = r.gen_range(0..g.params.num_scalars());
        let mut param = 0;
        while k >= g.params.params[param].value.len() {
            k -= g.params.params[param].value.len();
            param += 1;
        }
        Coord { net, param, elem: k }
    })
}

/// Toy model whose generator weights are scaled up from the N(0, 0.02)
/// initialization. At the initial scale the instance-normalized activations
/// are so sensitive to single weights that a 1e-4 stencil crosses ReLU kinks
/// for most coordinates.
pub fn toy_bundle(s: &Settings, seed: u64) -> ModelBundle {
    let mut b = ModelBundle::build(s.generator, s.discriminator, seed).unwrap();
    for g in [&mut b.g_ct, &mut b.g_mr] {
        for p in g.params.params.iter_mut().filter(|p| p.name.ends_with(".weight")) {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
    }
    b
}

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose stencil straddles a ReLU or |·| kink.
    pub kinked: usize,
    /// Coordinates with no gradient at all (e.g. biases feeding a normalization).
    pub flat: usize,
}

fn central(bundle: &ModelBundle, c: Coord, h: f64, eager: &impl Fn(&ModelBundle) -> f64) -> f64 {
    let mut b = bundle.clone();
    let base = *gen_param_mut(&mut b, c);
    *gen_param_mut(&mut b, c) = base + h;
    let up = eager(&b);
    *gen_param_mut(&mut b, c) = base - h;
    (up - eager(&b)) / (2.0 * h)
}

/// Compares `analytic` with central differences of step [`FD_STEP`] until
/// `count` coordinates with a nonzero derivative have been checked. A
/// coordinate is skipped when the function is not smooth across its stencil,
/// detected by the step-h and step-h/10 differences disagreeing well beyond
/// truncation error; this test never looks at the analytic value.
pub fn fd_check(
    bundle: &ModelBundle,
    count: usize,
    seed: u64,
    analytic: impl Fn(Coord) -> f64,
    eager: impl Fn(&ModelBundle) -> f64,
) -> GradReport {
    let mut rep = GradReport::default();
    for c in coord_stream(bundle, seed).take(20 * count) {
        if rep.checked == count {
            break;
        }
        let coarse = central(bundle, c, FD_STEP, &eager);
        let a = analytic(c);
        if a.abs() < 1e-9 && coarse.abs() < 1e-9 {
            rep.flat += 1;
            continue;
        }
        let fine = central(bundle, c, FD_STEP / 10.0, &eager);
        if rel_err(coarse, fine) > 1e-4 {
            rep.kinked += 1;
            continue;
        }
        rep.checked += 1;
        rep.worst = rep.worst.max(rel_err(a, coarse));
    }
    assert_eq!(rep.checked, count, "too few usable coordinates: {rep:?}");
    rep
}

/// Gradient check of one node of the recorded generator objective against
/// `eager`, which evaluates the same scalar without the tape.
pub fn grad_check(
    bundle: &ModelBundle,
    batch: &Batch,
    s: &Settings,
    count: usize,
    seed: u64,
    pick: impl Fn(&trainer::GeneratorObjective) -> ctmr_core::autograd::NodeId,
    eager: impl Fn(&ModelBundle) -> f64,
) -> GradReport {
    let mut g = Graph::new();
    let obj = trainer::record_generator_objective(&mut g, bundle, batch, s).unwrap();
    let grads = g.backward(pick(&obj));
    let analytic = |c: Coord| {
        let ids = if c.net == 0 { &obj.g_ct_params } else { &obj.g_mr_params };
        grads.get(ids[c.param]).map_or(0.0, |t| t.data()[c.elem])
    };
    fd_check(bundle, count, seed, analytic, eager)
}

// ---- phantom experiments ---------------------------------------------------

pub fn write_phantoms(dir: &Path, n: usize, size: usize, seed: u64) {
    let spec = PhantomSpec {
        image_size: size,
        seed,
        ..PhantomSpec::default()
    };
    phantom::export_phantom_dataset(&spec, n, dir).unwrap();
}

/// Settings for single-slice 64×64 phantom training.
pub fn phantom_settings(seed: u64, base: usize, resblocks: usize, disc_base: usize) -> Settings {
    let mut s = Settings::default().with_seed(seed);
    s.generator.base_channels = base;
    s.generator.n_resblocks = resblocks;
    s.discriminator.base_channels = disc_base;
    s.preprocess.target_slices = 1;
    s.preprocess.resize_dim = 72;
    s.preprocess.crop_dim = 64;
    s.train.checkpoint_every = 0;
    s.train.log_every = 0;
    s
}

pub fn phantom_loader(dir: &Path, s: &Settings) -> UnpairedLoader {
    UnpairedLoader::from_dirs(&dir.join("ct"), &dir.join("mr"), s.preprocess.clone()).unwrap()
}

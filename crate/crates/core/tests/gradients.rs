mod common;

use common::*;
use ctmr_core::autograd::Graph;
use ctmr_core::config::Settings;
use ctmr_core::losses::{self, SsimMode};
use ctmr_core::networks::{forward_cycle, Direction, ModelBundle};
use ctmr_core::pipeline::{AugmentDraw, SliceSample};
use ctmr_core::trainer::{self, Batch};
use ctmr_core::volume::Modality;
use ndarray::Array2;

const TOL: f64 = 1e-3;
const COUNT: usize = 12;

fn setup() -> (ModelBundle, Batch, Settings) {
    let s = toy_settings();
    (toy_bundle(&s, 5), toy_batch(9, 1, 16), s)
}

fn assert_report(what: &str, r: GradReport) {
    assert!(r.worst < TOL, "{what}: {r:?}");
    assert!(r.checked >= 10);
}

#[test]
fn gan_term_gradient() {
    let (b, batch, s) = setup();
    let r = grad_check(&b, &batch, &s, COUNT, 1, |o| o.gan, |m| eager_terms(m, &batch, &s).gan);
    assert_report("gan", r);
}

#[test]
fn cycle_term_gradient() {
    let (b, batch, s) = setup();
    let r = grad_check(&b, &batch, &s, COUNT, 2, |o| o.cycle, |m| eager_terms(m, &batch, &s).cycle);
    assert_report("cycle", r);
}

#[test]
fn identity_term_gradient() {
    let (b, batch, s) = setup();
    let r = grad_check(&b, &batch, &s, COUNT, 3, |o| o.identity.unwrap(), |m| eager_terms(m, &batch, &s).identity);
    assert_report("identity", r);
}

#[test]
fn ssim_term_gradient_in_every_mode() {
    let (b, batch, mut s) = setup();
    for mode in [SsimMode::Global, SsimMode::Windowed { size: 5, sigma: 1.0 }, SsimMode::Literal] {
        s.ssim_mode = mode;
        let r = grad_check(&b, &batch, &s, COUNT, 4, |o| o.ssim.unwrap(), |m| eager_terms(m, &batch, &s).ssim);
        assert_report(mode.name(), r);
    }
}

#[test]
fn composite_objective_gradient() {
    let (b, batch, s) = setup();
    let w = s.train.weights;
    let r = grad_check(&b, &batch, &s, 2 * COUNT, 5, |o| o.total, |m| {
        losses::generator_total_loss(eager_terms(m, &batch, &s), w)
    });
    assert_report("total", r);
}

#[test]
fn recorded_terms_equal_eager_terms() {
    let (b, batch, s) = setup();
    let mut g = Graph::new();
    let obj = trainer::record_generator_objective(&mut g, &b, &batch, &s).unwrap();
    let e = eager_terms(&b, &batch, &s);
    assert_eq!(obj.terms, e);
    assert_eq!(g.scalar(obj.total), losses::generator_total_loss(e, s.train.weights));
}

fn sample_from(t: &ctmr_core::Tensor, modality: Modality) -> SliceSample {
    let (_, _, h, w) = t.dims4();
    SliceSample {
        pixels: Array2::from_shape_vec((h, w), t.batch_item(0).data().to_vec()).unwrap(),
        modality,
        source_id: "toy".into(),
        slice_index: 0,
        augmentation: AugmentDraw::default(),
        crop_offset: (0, 0),
    }
}

#[test]
fn forward_cycle_l1_gradient() {
    let (b, batch, _) = setup();
    let x = sample_from(&batch.ct, Modality::Ct);
    let input = x.to_tensor();

    let mut g = Graph::new();
    let ct_ids: Vec<_> = b.g_ct.params.iter().map(|p| g.param(p.value.clone())).collect();
    let mr_ids: Vec<_> = b.g_mr.params.iter().map(|p| g.param(p.value.clone())).collect();
    let xi = g.constant(input.clone());
    let t = b.g_mr.forward(&mut g, &mr_ids, &xi);
    let rec = b.g_ct.forward(&mut g, &ct_ids, &t);
    let loss = g.mean_abs_diff(rec, xi);
    let grads = g.backward(loss);

    let eager = |m: &ModelBundle| {
        let out = forward_cycle(m, &x, Direction::CtToMr, None).unwrap();
        l1_oracle(&out.recovered, &input)
    };
    assert_eq!(g.scalar(loss), eager(&b));
    let analytic = |c: Coord| {
        let ids = if c.net == 0 { &ct_ids } else { &mr_ids };
        grads.get(ids[c.param]).map_or(0.0, |t| t.data()[c.elem])
    };
    assert_report("forward_cycle", fd_check(&b, COUNT, 6, analytic, eager));
}

#[test]
fn kinks_are_rare_enough_to_sample_around() {
    let (b, batch, s) = setup();
    let r = grad_check(&b, &batch, &s, 40, 7, |o| o.total, |m| {
        losses::generator_total_loss(eager_terms(m, &batch, &s), s.train.weights)
    });
    assert!(r.kinked * 4 < r.checked, "{r:?}");
}

#[test]
fn normalized_biases_have_no_gradient() {
    // A bias followed by instance normalization cancels out exactly.
    let (b, batch, s) = setup();
    let (_, grads) = trainer::generator_gradients(&b, &batch, &s).unwrap();
    let stem_bias = b.g_ct.params.params.iter().position(|p| p.name == "stem.conv.bias").unwrap();
    assert!(grads[stem_bias].data().iter().all(|g| g.abs() < 1e-12));
    let head_bias = b.g_ct.params.params.iter().position(|p| p.name == "head.conv.bias").unwrap();
    assert!(grads[head_bias].data().iter().any(|g| g.abs() > 1e-9));
}


mod common;

use common::*;
use ctmr_core::networks::{
    forward_cycle, Direction, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelBundle,
};
use ctmr_core::pipeline::{AugmentDraw, SliceSample};
use ctmr_core::volume::Modality;
use ctmr_core::Tensor;
use ndarray::Array2;

const GENERATOR_PARAMS: usize = 11_365_633;
const DISCRIMINATOR_PARAMS: usize = 2_762_689;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn generator_count(c: usize, blocks: usize) -> usize {
    conv(1, c, 7) + conv(c, 2 * c, 3) + conv(2 * c, 4 * c, 3)
        + blocks * 2 * conv(4 * c, 4 * c, 3)
        + conv(4 * c, 2 * c, 3)
        + conv(2 * c, c, 3)
        + conv(c, 1, 7)
}

fn discriminator_count(c: usize) -> usize {
    conv(1, c, 4) + conv(c, 2 * c, 4) + conv(2 * c, 4 * c, 4) + conv(4 * c, 8 * c, 4) + conv(8 * c, 1, 4)
}

// Each 4×4 pad-1 conv maps n to floor((n + 2 - 4) / stride) + 1.
fn patch_side(mut n: usize, strides: &[usize]) -> usize {
    for s in strides {
        n = (n - 2) / s + 1;
    }
    n
}

#[test]
fn default_parameter_counts_match_committed_constants() {
    assert_eq!(generator_count(64, 9), GENERATOR_PARAMS);
    assert_eq!(discriminator_count(64), DISCRIMINATOR_PARAMS);
    let g = Generator::build(GeneratorConfig::default(), 0).unwrap();
    let d = Discriminator::build(DiscriminatorConfig::default(), 0).unwrap();
    assert_eq!(g.num_params(), GENERATOR_PARAMS);
    assert_eq!(d.num_params(), DISCRIMINATOR_PARAMS);
    assert_eq!(g.summary(256, 256).iter().map(|l| l.params).sum::<usize>(), GENERATOR_PARAMS);
    assert_eq!(d.summary(256, 256).iter().map(|l| l.params).sum::<usize>(), DISCRIMINATOR_PARAMS);
}

#[test]
fn reduced_width_counts_follow_the_same_formula() {
    for (c, blocks) in [(8, 1), (16, 3), (32, 9)] {
        let cfg = GeneratorConfig {
            base_channels: c,
            n_resblocks: blocks,
            ..GeneratorConfig::default()
        };
        assert_eq!(Generator::build(cfg, 1).unwrap().num_params(), generator_count(c, blocks));
        let dcfg = DiscriminatorConfig {
            base_channels: c,
            ..DiscriminatorConfig::default()
        };
        assert_eq!(Discriminator::build(dcfg, 1).unwrap().num_params(), discriminator_count(c));
    }
}

#[test]
fn default_generator_keeps_256_shape_in_open_interval() {
    let g = Generator::build(GeneratorConfig::default(), 3).unwrap();
    let mut r = rng(1);
    let x = uniform(&[1, 1, 256, 256], -1.0, 1.0, &mut r);
    let y = g.translate(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 256, 256]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
    assert!(y.data().iter().any(|v| *v != 0.0));
}

#[test]
fn default_discriminator_emits_30_by_30_map() {
    assert_eq!(patch_side(256, &[2, 2, 2, 1, 1]), 30);
    let d = Discriminator::build(DiscriminatorConfig::default(), 3).unwrap();
    assert_eq!(d.output_size(256, 256), (30, 30));
    let mut r = rng(2);
    let s = d.score(&uniform(&[1, 1, 256, 256], -1.0, 1.0, &mut r)).unwrap();
    assert_eq!(s.shape(), &[1, 1, 30, 30]);
    assert_eq!(d.summary(256, 256).last().unwrap().out_shape, [1, 30, 30]);
}

#[test]
fn small_inputs_keep_their_shape() {
    let cfg = GeneratorConfig {
        base_channels: 8,
        n_resblocks: 1,
        ..GeneratorConfig::default()
    };
    let g = Generator::build(cfg, 0).unwrap();
    let mut r = rng(3);
    for n in [16, 64] {
        let y = g.translate(&uniform(&[2, 1, n, n], -1.0, 1.0, &mut r)).unwrap();
        assert_eq!(y.shape(), &[2, 1, n, n]);
    }
    assert!(g.translate(&Tensor::zeros(&[1, 1, 18, 18])).is_err());
    assert!(g.translate(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
}

#[test]
fn zeroed_generator_is_a_constant_map() {
    let s = toy_settings();
    let mut g = Generator::build(s.generator, 0).unwrap();
    for p in g.params.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut r = rng(4);
    let y = g.translate(&uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut r)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn builds_are_deterministic_and_symmetric() {
    let s = toy_settings();
    let a = ModelBundle::build(s.generator, s.discriminator, 7).unwrap();
    let b = ModelBundle::build(s.generator, s.discriminator, 7).unwrap();
    assert_eq!(a, b);
    a.check_symmetry().unwrap();
    assert_ne!(a.g_ct.params, a.g_mr.params);
    assert_ne!(a, ModelBundle::build(s.generator, s.discriminator, 8).unwrap());
    let mut r = rng(5);
    let x = uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut r);
    assert_eq!(a.g_mr.translate(&x).unwrap(), b.g_mr.translate(&x).unwrap());
}

#[test]
fn mismatched_configs_are_rejected() {
    assert!(Generator::build(GeneratorConfig { base_channels: 4, ..GeneratorConfig::default() }, 0).is_err());
    assert!(Generator::build(GeneratorConfig { n_resblocks: 0, ..GeneratorConfig::default() }, 0).is_err());
    assert!(Discriminator::build(DiscriminatorConfig { n_layers: 0, ..DiscriminatorConfig::default() }, 0).is_err());
}

fn sample(pixels: Array2<f64>, modality: Modality) -> SliceSample {
    SliceSample {
        pixels,
        modality,
        source_id: "s".into(),
        slice_index: 0,
        augmentation: AugmentDraw::default(),
        crop_offset: (0, 0),
    }
}

#[test]
fn identity_hook_returns_inputs_unchanged() {
    let s = toy_settings();
    let b = ModelBundle::build(s.generator, s.discriminator, 1).unwrap().with_identity_generators();
    let mut r = rng(6);
    let ct = sample(image(16, 16, &mut r), Modality::Ct);
    let mr = sample(image(16, 16, &mut r), Modality::Mr);
    let out = forward_cycle(&b, &ct, Direction::CtToMr, Some(&mr)).unwrap();
    assert_eq!(out.translated, ct.to_tensor());
    assert_eq!(out.recovered, ct.to_tensor());
    assert_eq!(out.identity.unwrap(), mr.to_tensor());
    assert!(forward_cycle(&b, &mr, Direction::CtToMr, None).is_err());
    assert!(forward_cycle(&b, &ct, Direction::CtToMr, Some(&ct)).is_err());
}

#[test]
fn cycle_uses_the_matching_generators() {
    let s = toy_settings();
    let b = ModelBundle::build(s.generator, s.discriminator, 2).unwrap();
    let mut r = rng(7);
    let mr = sample(image(16, 16, &mut r), Modality::Mr);
    let out = forward_cycle(&b, &mr, Direction::MrToCt, None).unwrap();
    let t = b.g_ct.translate(&mr.to_tensor()).unwrap();
    assert_eq!(out.translated, t);
    assert_eq!(out.recovered, b.g_mr.translate(&t).unwrap());
    assert!(out.identity.is_none());
}

#[test]
fn direction_labels_round_trip() {
    for d in Direction::BOTH {
        assert_eq!(Direction::parse(d.label()).unwrap(), d);
        assert_ne!(d.source(), d.target());
    }
    assert!(Direction::parse("sideways").is_err());
}

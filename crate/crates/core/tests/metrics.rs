mod common;

use common::*;
use ctmr_core::losses::SsimConstants;
use ctmr_core::metrics::{self, EmbeddingExtractor};
use ndarray::Array2;
use proptest::prelude::*;
use std::f64::consts::LN_2;

const K: SsimConstants = SsimConstants { c1: 0.0001, c2: 0.009 };

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn fid_oracle(gen: &[Array2<f64>], real: &[Array2<f64>], ex: &EmbeddingExtractor) -> f64 {
    let g: Vec<_> = gen.iter().map(|i| normalized(ex.embed(i))).collect();
    let r: Vec<_> = real.iter().map(|i| normalized(ex.embed(i))).collect();
    let mut acc = 0.0;
    for a in &g {
        for b in &r {
            acc += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    acc / (g.len() * r.len()) as f64
}

#[test]
fn ssim_index_of_self_is_one() {
    let mut r = rng(1);
    for _ in 0..10 {
        let x = image(32, 32, &mut r);
        assert_eq!(metrics::ssim_index(&x, &x, K).unwrap(), 1.0);
    }
    let x = image(8, 8, &mut r);
    assert!(metrics::ssim_index(&x, &image(8, 9, &mut r), K).is_err());
}

#[test]
fn two_level_self_pair_has_ln2_information() {
    let a = Array2::from_shape_fn((16, 16), |(y, x)| if (y + x) % 2 == 0 { -0.9 } else { 0.9 });
    let mi = metrics::mutual_information(&a, &a, 2).unwrap();
    assert!((mi - LN_2).abs() < 1e-9);
}

#[test]
fn mutual_information_matches_histogram_oracle() {
    let mut r = rng(2);
    for bins in [2, 8, 64] {
        let a = image(40, 40, &mut r);
        let b = image(40, 40, &mut r).mapv(|v| 0.6 * v) + &a.mapv(|v| 0.4 * v);
        let got = metrics::mutual_information(&a, &b, bins).unwrap();
        assert!(rel_err(got, mi_oracle(&a, &b, bins)) < 1e-12, "bins {bins}");
    }
    let a = image(4, 4, &mut r);
    assert!(metrics::mutual_information(&a, &a, 1).is_err());
}

#[test]
fn pixacc_is_scale_invariant() {
    let mut r = rng(3);
    let a = image(24, 24, &mut r);
    let b = image(24, 24, &mut r);
    let base = metrics::pixacc(&a, &b).unwrap();
    for c in [0.5, 2.0, 7.25] {
        assert!((metrics::pixacc(&a.mapv(|v| c * v), &b).unwrap() - base).abs() < 1e-15);
        assert!((metrics::pixacc(&a, &b.mapv(|v| c * v)).unwrap() - base).abs() < 1e-15);
    }
}

#[test]
fn fid_similarity_matches_embedding_oracle() {
    let ex = EmbeddingExtractor::fixed_random_projection(4, 256).unwrap();
    let mut r = rng(4);
    let gen: Vec<_> = (0..5).map(|_| image(64, 64, &mut r)).collect();
    let real: Vec<_> = (0..7).map(|_| image(64, 64, &mut r)).collect();
    let got = metrics::fid_similarity(&gen, &real, &ex, 0).unwrap();
    assert!(rel_err(got, fid_oracle(&gen, &real, &ex)) < 1e-10);
    let same = metrics::fid_similarity(&gen[..1], &gen[..1], &ex, 0).unwrap();
    assert!((same - 1.0).abs() < 1e-12);
    assert!(metrics::fid_similarity(&[], &real, &ex, 0).is_err());
}

#[test]
fn fid_similarity_ignores_set_order() {
    let ex = EmbeddingExtractor::default_projection();
    let mut r = rng(5);
    let gen: Vec<_> = (0..4).map(|_| image(48, 48, &mut r)).collect();
    let real: Vec<_> = (0..3).map(|_| image(48, 48, &mut r)).collect();
    let a = metrics::fid_similarity(&gen, &real, &ex, 0).unwrap();
    let rev_g: Vec<_> = gen.iter().rev().cloned().collect();
    let rev_r: Vec<_> = real.iter().rev().cloned().collect();
    assert_eq!(a, metrics::fid_similarity(&rev_g, &rev_r, &ex, 0).unwrap());
}

#[test]
fn sampled_fid_is_seeded() {
    let ex = EmbeddingExtractor::fixed_random_projection(1, 16).unwrap();
    let mut r = rng(6);
    let gen: Vec<_> = (0..101).map(|_| image(32, 32, &mut r)).collect();
    let real: Vec<_> = (0..100).map(|_| image(32, 32, &mut r)).collect();
    let a = metrics::fid_similarity(&gen, &real, &ex, 9).unwrap();
    assert_eq!(a, metrics::fid_similarity(&gen, &real, &ex, 9).unwrap());
    assert!((a - fid_oracle(&gen, &real, &ex)).abs() < 0.05);
}

#[test]
fn projection_is_reproducible_per_seed() {
    let a = EmbeddingExtractor::fixed_random_projection(3, 32).unwrap();
    assert_eq!(a, EmbeddingExtractor::fixed_random_projection(3, 32).unwrap());
    assert_ne!(a, EmbeddingExtractor::fixed_random_projection(4, 32).unwrap());
    assert!(EmbeddingExtractor::fixed_random_projection(3, 0).is_err());
}

fn img_strategy(n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |d| Array2::from_shape_vec((n, n), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded(a in img_strategy(8), b in img_strategy(8)) {
        let s = metrics::ssim_index(&a, &b, K).unwrap();
        prop_assert_eq!(s, metrics::ssim_index(&b, &a, K).unwrap());
        prop_assert!((-1.0..=1.0).contains(&s));
        let mi = metrics::mutual_information(&a, &b, 16).unwrap();
        prop_assert!((mi - metrics::mutual_information(&b, &a, 16).unwrap()).abs() < 1e-12);
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= metrics::entropy(&a, 16).min(metrics::entropy(&b, 16)) + 1e-12);
        let p = metrics::pixacc(&a, &b).unwrap();
        prop_assert!((p - metrics::pixacc(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&p));
    }
}

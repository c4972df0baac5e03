use ctmr_core::phantom::{self, ClassContrast, PhantomSpec, BACKGROUND, BONE, TISSUE};
use ctmr_core::volume::{self, Modality};
use ctmr_core::Error;
use ndarray::Array2;
use proptest::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Mean of clamp(N(mu, sigma²), 0, 1).
fn clipped_normal_mean(mu: f64, sigma: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let (a, b) = ((0.0 - mu) / sigma, (1.0 - mu) / sigma);
    let inside = mu * (n.cdf(b) - n.cdf(a)) + sigma * (n.pdf(a) - n.pdf(b));
    inside + (1.0 - n.cdf(b))
}

#[test]
fn class_means_match_clipped_noise_expectation() {
    let spec = PhantomSpec::default();
    let mut sums = [[0.0; 3]; 2];
    let mut counts = [0usize; 3];
    for i in 0..100 {
        let p = phantom::generate_phantom(&spec, i).unwrap();
        for ((&c, &ct), &mr) in p.structure_map.iter().zip(&p.ct_image).zip(&p.mr_image) {
            sums[0][c as usize] += ct;
            sums[1][c as usize] += mr;
            counts[c as usize] += 1;
        }
    }
    for class in [BACKGROUND, BONE, TISSUE] {
        let n = counts[class as usize] as f64;
        assert!(n > 0.0);
        let tol = 2.0 * spec.noise_sigma / n.sqrt();
        for (m, contrast) in [spec.ct_contrast, spec.mr_contrast].iter().enumerate() {
            let want = clipped_normal_mean(contrast.of(class), spec.noise_sigma);
            let got = sums[m][class as usize] / n;
            assert!((got - want).abs() < tol, "class {class} modality {m}: {got} vs {want} (tol {tol})");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let quiet = PhantomSpec {
        image_size: 64,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    assert_eq!(phantom::generate_phantom(&quiet, 0).unwrap(), phantom::generate_phantom(&quiet, 0).unwrap());
    let noisy = PhantomSpec { image_size: 64, ..PhantomSpec::default() };
    let a = phantom::generate_phantom(&noisy, 3).unwrap();
    assert_eq!(a, phantom::generate_phantom(&noisy, 3).unwrap());
    assert_ne!(a.ct_image, phantom::generate_phantom(&noisy, 4).unwrap().ct_image);
    assert_eq!(a.id, phantom::phantom_id(3));
}

fn edges(img: &Array2<f64>) -> Array2<bool> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = img[[y, x]];
        (x + 1 < w && img[[y, x + 1]] != v) || (y + 1 < h && img[[y + 1, x]] != v)
    })
}

#[test]
fn noiseless_edge_maps_coincide() {
    let spec = PhantomSpec {
        image_size: 96,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    for i in 0..10 {
        let p = phantom::generate_phantom(&spec, i).unwrap();
        let e = edges(&p.ct_image);
        assert_eq!(e, edges(&p.mr_image));
        assert_eq!(e, edges(&p.structure_map.mapv(f64::from)));
        assert!(e.iter().any(|&b| b));
    }
}

#[test]
fn invalid_specs_name_the_broken_invariant() {
    let msg = |s: PhantomSpec| match phantom::generate_phantom(&s, 0) {
        Err(Error::Validation(m)) => m,
        other => panic!("expected a validation error, got {other:?}"),
    };
    assert!(msg(PhantomSpec { image_size: 32, ..PhantomSpec::default() }).contains("image_size"));
    assert!(msg(PhantomSpec { image_size: 66, ..PhantomSpec::default() }).contains("divisible by 4"));
    let same = PhantomSpec {
        mr_contrast: PhantomSpec::default().ct_contrast,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    assert!(msg(same).contains("degenerate"));
    let out_of_range = PhantomSpec {
        ct_contrast: ClassContrast { bone: 1.5, ..PhantomSpec::default().ct_contrast },
        ..PhantomSpec::default()
    };
    assert!(msg(out_of_range).contains("[0, 1]"));
}

#[test]
fn export_counts_and_manifest_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { image_size: 64, seed: 4, ..PhantomSpec::default() };
    let entries = phantom::export_phantom_dataset(&spec, 4, tmp.path()).unwrap();
    assert_eq!(volume::list_volumes(&tmp.path().join("ct")).unwrap().len(), 4);
    assert_eq!(volume::list_volumes(&tmp.path().join("mr")).unwrap().len(), 4);
    let manifest = phantom::read_manifest(&tmp.path().join(phantom::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, entries);
    for (i, e) in manifest.iter().enumerate() {
        let pair = phantom::generate_phantom(&spec, i as u64).unwrap();
        assert_eq!(e.id, pair.id);
        let ct = volume::load_volume(&tmp.path().join(&e.ct_path), Modality::Ct).unwrap();
        let mr = volume::load_volume(&tmp.path().join(&e.mr_path), Modality::Mr).unwrap();
        assert_eq!(ct.n_slices(), 1);
        let same = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-6);
        assert!(same(&ct.slice(0), &pair.ct_image));
        assert!(same(&mr.slice(0), &pair.mr_image));
    }
}

#[test]
fn export_orders_differ_between_modalities() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { image_size: 64, seed: 8, ..PhantomSpec::default() };
    let entries = phantom::export_phantom_dataset(&spec, 100, tmp.path()).unwrap();
    let slot = |p: &std::path::Path| volume::source_id_of(p)[3..].parse::<usize>().unwrap();
    let ct: Vec<_> = entries.iter().map(|e| slot(&e.ct_path)).collect();
    let mr: Vec<_> = entries.iter().map(|e| slot(&e.mr_path)).collect();
    assert_ne!(ct, mr);
    assert_ne!(ct, (0..100).collect::<Vec<_>>());
    let mut sorted = ct.clone();
    sorted.sort();
    assert_eq!(sorted, (0..100).collect::<Vec<_>>());
}

#[test]
fn malformed_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.csv");
    std::fs::write(&p, "id,ct_path\nx,y\n").unwrap();
    assert!(phantom::read_manifest(&p).is_err());
    std::fs::write(&p, "id,ct_path,mr_path\nx,y\n").unwrap();
    assert!(phantom::read_manifest(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_pixel_is_in_unit_range(seed in 0u64..10_000, index in 0u64..1000, sigma in 0.0f64..0.5) {
        let spec = PhantomSpec { image_size: 64, seed, noise_sigma: sigma, ..PhantomSpec::default() };
        let p = phantom::generate_phantom(&spec, index).unwrap();
        prop_assert!(p.ct_image.iter().chain(&p.mr_image).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(p.structure_map.iter().all(|&c| c <= TISSUE));
    }
}

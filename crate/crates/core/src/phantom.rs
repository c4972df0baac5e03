//! Synthetic paired-structure phantoms.
//!
//! Each phantom is a soft-tissue body ellipse holding a few bone ellipses.
//! The CT and MR renderings share one label map and differ only in the
//! class-to-intensity mapping and in their independent noise draws.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{self, Modality, VolumeRecord};

pub const BACKGROUND: u8 = 0;
pub const BONE: u8 = 1;
pub const TISSUE: u8 = 2;

/// Intensity of each structure class, in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassContrast {
    pub background: f64,
    pub bone: f64,
    pub tissue: f64,
}

impl ClassContrast {
    pub fn of(&self, class: u8) -> f64 {
        match class {
            BONE => self.bone,
            TISSUE => self.tissue,
            _ => self.background,
        }
    }

    fn values(&self) -> [f64; 3] {
        [self.background, self.bone, self.tissue]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Ellipses per image: one body plus `n_structures - 1` bones.
    pub n_structures: usize,
    pub ct_contrast: ClassContrast,
    pub mr_contrast: ClassContrast,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 256,
            n_structures: 4,
            ct_contrast: ClassContrast {
                background: 0.05,
                bone: 0.95,
                tissue: 0.35,
            },
            mr_contrast: ClassContrast {
                background: 0.05,
                bone: 0.15,
                tissue: 0.80,
            },
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Validation(format!(
                "image_size must be >= 64 and divisible by 4, got {}",
                self.image_size
            )));
        }
        if self.n_structures < 1 {
            return Err(Error::Validation("n_structures must be >= 1".into()));
        }
        for (name, c) in [("ct_contrast", &self.ct_contrast), ("mr_contrast", &self.mr_contrast)] {
            if c.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("{name} intensities must lie in [0, 1]")));
            }
        }
        if self.ct_contrast == self.mr_contrast {
            return Err(Error::Validation(
                "ct_contrast and mr_contrast are identical for every class; the translation task is degenerate".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub structure_map: Array2<u8>,
    pub ct_image: Array2<f64>,
    pub mr_image: Array2<f64>,
    pub id: String,
}

pub fn phantom_id(index: u64) -> String {
    format!("phantom-{index:05}")
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn structure_map(spec: &PhantomSpec, index: u64) -> Array2<u8> {
    let n = spec.image_size;
    let s = n as f64;
    let mut r = rng::stream_rng(spec.seed, &[rng::label("phantom-geometry"), index]);
    let body = Ellipse {
        cy: s * (0.5 + r.gen_range(-0.04..0.04)),
        cx: s * (0.5 + r.gen_range(-0.04..0.04)),
        ry: s * r.gen_range(0.26..0.34),
        rx: s * r.gen_range(0.30..0.38),
        angle: r.gen_range(-0.3..0.3),
    };
    let bones: Vec<Ellipse> = (1..spec.n_structures)
        .map(|_| {
            let phi = r.gen_range(0.0..std::f64::consts::TAU);
            let rho = r.gen_range(0.0..0.6);
            Ellipse {
                cy: body.cy + rho * body.ry * phi.sin(),
                cx: body.cx + rho * body.rx * phi.cos(),
                ry: s * r.gen_range(0.04..0.08),
                rx: s * r.gen_range(0.04..0.08),
                angle: r.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        if !body.contains(py, px) {
            BACKGROUND
        } else if bones.iter().any(|b| b.contains(py, px)) {
            BONE
        } else {
            TISSUE
        }
    })
}

fn render(map: &Array2<u8>, contrast: &ClassContrast, sigma: f64, mut r: impl Rng) -> Array2<f64> {
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("valid sigma"));
    map.mapv(|class| {
        let v = contrast.of(class);
        match &noise {
            Some(n) => (v + n.sample(&mut r)).clamp(0.0, 1.0),
            None => v,
        }
    })
}

/// Deterministic in `(spec, index)`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<PhantomPair> {
    spec.validate()?;
    let map = structure_map(spec, index);
    let noise_rng = |m: Modality| rng::stream_rng(spec.seed, &[rng::label("phantom-noise"), rng::label(m.tag()), index]);
    Ok(PhantomPair {
        ct_image: render(&map, &spec.ct_contrast, spec.noise_sigma, noise_rng(Modality::Ct)),
        mr_image: render(&map, &spec.mr_contrast, spec.noise_sigma, noise_rng(Modality::Mr)),
        structure_map: map,
        id: phantom_id(index),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub ct_path: PathBuf,
    pub mr_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "id,ct_path,mr_path";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&format!("{},{},{}\n", e.id, e.ct_path.display(), e.mr_path.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, format!("expected header {MANIFEST_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::format(path, format!("line {}: expected 3 columns", i + 2)));
            }
            Ok(ManifestEntry {
                id: cols[0].to_string(),
                ct_path: PathBuf::from(cols[1]),
                mr_path: PathBuf::from(cols[2]),
            })
        })
        .collect()
}

fn single_slice(image: &Array2<f64>, modality: Modality, source_id: &str) -> Result<VolumeRecord> {
    let (h, w) = image.dim();
    let voxels = Array3::from_shape_fn((h, w, 1), |(y, x, _)| image[[y, x]]);
    VolumeRecord::new(voxels, modality, source_id)
}

/// Writes `n` phantoms as single-slice volumes under `out/ct` and `out/mr`,
/// each modality in its own shuffled order, plus the hidden pairing in
/// `out/manifest.csv`.
pub fn export_phantom_dataset(spec: &PhantomSpec, n: usize, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let ct_dir = out_dir.join("ct");
    let mr_dir = out_dir.join("mr");
    for d in [&ct_dir, &mr_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let order = |m: Modality| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng::stream_rng(spec.seed, &[rng::label("phantom-export"), rng::label(m.tag())]));
        p
    };
    // slot[i] = file position of phantom i
    let slots = |perm: Vec<usize>| {
        let mut slot = vec![0; n];
        for (pos, &i) in perm.iter().enumerate() {
            slot[i] = pos;
        }
        slot
    };
    let ct_slot = slots(order(Modality::Ct));
    let mr_slot = slots(order(Modality::Mr));
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let pair = generate_phantom(spec, i as u64)?;
        let ct_name = format!("ct_{:05}.vol", ct_slot[i]);
        let mr_name = format!("mr_{:05}.vol", mr_slot[i]);
        let ct = single_slice(&pair.ct_image, Modality::Ct, &format!("ct_{:05}", ct_slot[i]))?;
        let mr = single_slice(&pair.mr_image, Modality::Mr, &format!("mr_{:05}", mr_slot[i]))?;
        volume::save_volume(&ct, &ct_dir.join(&ct_name))?;
        volume::save_volume(&mr, &mr_dir.join(&mr_name))?;
        entries.push(ManifestEntry {
            id: pair.id,
            ct_path: Path::new("ct").join(ct_name),
            mr_path: Path::new("mr").join(mr_name),
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            image_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn all_classes_present() {
        let p = generate_phantom(&small(), 0).unwrap();
        for class in [BACKGROUND, BONE, TISSUE] {
            assert!(p.structure_map.iter().any(|&c| c == class), "class {class} missing");
        }
    }

    #[test]
    fn noiseless_rendering_is_the_contrast_map() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small() };
        let p = generate_phantom(&spec, 3).unwrap();
        for ((&c, &ct), &mr) in p.structure_map.iter().zip(&p.ct_image).zip(&p.mr_image) {
            assert_eq!(ct, spec.ct_contrast.of(c));
            assert_eq!(mr, spec.mr_contrast.of(c));
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.image_size = 66;
        assert!(s.validate().is_err());
        let mut s = small();
        s.mr_contrast = s.ct_contrast;
        s.noise_sigma = 0.0;
        assert!(s.validate().is_err());
    }
}

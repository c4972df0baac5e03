//! The two translation generators and the two patch discriminators.
//!
//! Generator (ResNet, single channel in and out, C = `base_channels`):
//!
//! | stage    | layer                                   | parameters              |
//! |----------|-----------------------------------------|-------------------------|
//! | stem     | reflect 3, conv 7×7 1→C, IN, ReLU        | 49·C + C                |
//! | down1    | conv 3×3 s2 C→2C, IN, ReLU               | 9·C·2C + 2C             |
//! | down2    | conv 3×3 s2 2C→4C, IN, ReLU              | 9·2C·4C + 4C            |
//! | res × n  | (reflect 1, conv 3×3 4C→4C, IN) ×2, skip | n·2·(9·16C² + 4C)       |
//! | up1      | conv-t 3×3 s2 4C→2C, IN, ReLU            | 9·4C·2C + 2C            |
//! | up2      | conv-t 3×3 s2 2C→C, IN, ReLU             | 9·2C·C + C              |
//! | head     | reflect 3, conv 7×7 C→1, tanh            | 49·C + 1                |
//!
//! Discriminator (patch classifier, 4×4 kernels, zero padding 1): conv s2
//! 1→C with LeakyReLU(0.2), then `n_layers - 1` more stride-2 stages and one
//! stride-1 stage doubling channels up to 8C, each with IN and LeakyReLU,
//! then a stride-1 conv to a single raw score channel.
//!
//! Instance normalization has no affine parameters and all convolutions
//! carry a bias. Weights start from N(0, 0.02), biases from zero.

use std::rc::Rc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::pipeline::SliceSample;
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::Modality;

pub const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Instance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_resblocks: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: Norm,
    pub pad: Padding,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_resblocks: 9,
            base_channels: 64,
            in_channels: 1,
            out_channels: 1,
            norm: Norm::Instance,
            pad: Padding::Reflect,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks < 1 {
            return Err(Error::Validation("generator needs n_resblocks >= 1".into()));
        }
        if self.base_channels < 8 {
            return Err(Error::Validation(format!(
                "generator base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(Error::Validation("only single-channel images are supported".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Number of stride-2 stages; one stride-1 stage and the score layer follow.
    pub n_layers: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            n_layers: 3,
            base_channels: 64,
            in_channels: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Validation("discriminator needs n_layers >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels != 1 {
            return Err(Error::Validation("discriminator needs base_channels >= 1 and one input channel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Names and shapes, for symmetry checks.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    fn eager_vars(&self) -> Vec<Rc<Tensor>> {
        self.params.iter().map(|p| Rc::new(p.value.clone())).collect()
    }
}

/// One row of an architecture dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub out_shape: [usize; 3],
    pub params: usize,
}

struct ParamBuilder {
    rng: rand_chacha::ChaCha8Rng,
    set: ParamSet,
}

impl ParamBuilder {
    fn new(seed: u64, tag: &str) -> Self {
        ParamBuilder {
            rng: rng::stream_rng(seed, &[rng::label(tag)]),
            set: ParamSet::default(),
        }
    }

    fn conv(&mut self, name: &str, shape: [usize; 4], bias_len: usize) {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.set.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::new(shape.to_vec(), w).expect("shape matches"),
        });
        self.set.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(&[bias_len]),
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorMode {
    Network,
    /// Testing hook: the generator returns its input unchanged.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamSet,
    pub mode: GeneratorMode,
}

impl Generator {
    pub fn build(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::build_tagged(cfg, seed, "generator")
    }

    pub(crate) fn build_tagged(cfg: GeneratorConfig, seed: u64, tag: &str) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let mut b = ParamBuilder::new(seed, tag);
        b.conv("stem.conv", [c, cfg.in_channels, 7, 7], c);
        b.conv("down1.conv", [2 * c, c, 3, 3], 2 * c);
        b.conv("down2.conv", [4 * c, 2 * c, 3, 3], 4 * c);
        for i in 0..cfg.n_resblocks {
            b.conv(&format!("res{i}.conv1"), [4 * c, 4 * c, 3, 3], 4 * c);
            b.conv(&format!("res{i}.conv2"), [4 * c, 4 * c, 3, 3], 4 * c);
        }
        // Transposed weights are Cin×Cout×k×k.
        b.conv("up1.convt", [4 * c, 2 * c, 3, 3], 2 * c);
        b.conv("up2.convt", [2 * c, c, 3, 3], c);
        b.conv("head.conv", [cfg.out_channels, c, 7, 7], cfg.out_channels);
        Ok(Generator {
            cfg,
            params: b.set,
            mode: GeneratorMode::Network,
        })
    }

    /// Replaces the network with the exact identity map.
    pub fn into_identity(mut self) -> Self {
        self.mode = GeneratorMode::Identity;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.mode == GeneratorMode::Identity
    }

    /// Records the forward pass. `p` must follow `self.params` order.
    pub fn forward<O: Ops>(&self, ops: &mut O, p: &[O::Var], x: &O::Var) -> O::Var {
        if self.is_identity() {
            return x.clone();
        }
        let mut it = p.chunks_exact(2);
        let mut next = || {
            let pair = it.next().expect("generator parameter list too short");
            (pair[0].clone(), pair[1].clone())
        };
        let (w, b) = next();
        let h = ops.reflect_pad(x, 3);
        let h = ops.conv2d(&h, &w, Some(&b), 1, 0);
        let h = ops.instance_norm(&h);
        let mut h = ops.relu(&h);
        for _ in 0..2 {
            let (w, b) = next();
            let t = ops.conv2d(&h, &w, Some(&b), 2, 1);
            let t = ops.instance_norm(&t);
            h = ops.relu(&t);
        }
        for _ in 0..self.cfg.n_resblocks {
            let (w1, b1) = next();
            let (w2, b2) = next();
            let t = ops.reflect_pad(&h, 1);
            let t = ops.conv2d(&t, &w1, Some(&b1), 1, 0);
            let t = ops.instance_norm(&t);
            let t = ops.relu(&t);
            let t = ops.reflect_pad(&t, 1);
            let t = ops.conv2d(&t, &w2, Some(&b2), 1, 0);
            let t = ops.instance_norm(&t);
            h = ops.add(&h, &t);
        }
        for _ in 0..2 {
            let (w, b) = next();
            let t = ops.conv_transpose2d(&h, &w, Some(&b), 2, 1, 1);
            let t = ops.instance_norm(&t);
            h = ops.relu(&t);
        }
        let (w, b) = next();
        let t = ops.reflect_pad(&h, 3);
        let t = ops.conv2d(&t, &w, Some(&b), 1, 0);
        ops.tanh(&t)
    }

    /// Evaluates the generator on an N×1×H×W batch without recording.
    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.cfg.in_channels, 4)?;
        if self.is_identity() {
            return Ok(x.clone());
        }
        let vars = self.params.eager_vars();
        let out = self.forward(&mut Eager, &vars, &Rc::new(x.clone()));
        Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Layer table for an `h`×`w` input.
    pub fn summary(&self, h: usize, w: usize) -> Vec<LayerInfo> {
        let c = self.cfg.base_channels;
        let count = |name: &str| {
            self.params
                .iter()
                .filter(|p| p.name.starts_with(&format!("{name}.")))
                .map(|p| p.value.len())
                .sum::<usize>()
        };
        let mut rows = vec![
            LayerInfo {
                name: "stem".into(),
                kind: "reflect3 conv7x7 IN ReLU".into(),
                out_shape: [c, h, w],
                params: count("stem"),
            },
            LayerInfo {
                name: "down1".into(),
                kind: "conv3x3/2 IN ReLU".into(),
                out_shape: [2 * c, h / 2, w / 2],
                params: count("down1"),
            },
            LayerInfo {
                name: "down2".into(),
                kind: "conv3x3/2 IN ReLU".into(),
                out_shape: [4 * c, h / 4, w / 4],
                params: count("down2"),
            },
        ];
        for i in 0..self.cfg.n_resblocks {
            rows.push(LayerInfo {
                name: format!("res{i}"),
                kind: "residual (reflect1 conv3x3 IN) x2".into(),
                out_shape: [4 * c, h / 4, w / 4],
                params: count(&format!("res{i}")),
            });
        }
        rows.push(LayerInfo {
            name: "up1".into(),
            kind: "convT3x3/2 IN ReLU".into(),
            out_shape: [2 * c, h / 2, w / 2],
            params: count("up1"),
        });
        rows.push(LayerInfo {
            name: "up2".into(),
            kind: "convT3x3/2 IN ReLU".into(),
            out_shape: [c, h, w],
            params: count("up2"),
        });
        rows.push(LayerInfo {
            name: "head".into(),
            kind: "reflect3 conv7x7 tanh".into(),
            out_shape: [self.cfg.out_channels, h, w],
            params: count("head"),
        });
        rows
    }
}

fn check_input(x: &Tensor, channels: usize, multiple: usize) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::Contract(format!("expected N×C×H×W input, got {:?}", x.shape())));
    }
    let (_, c, h, w) = x.dims4();
    if c != channels || h % multiple != 0 || w % multiple != 0 || h < 8 || w < 8 {
        return Err(Error::Contract(format!(
            "input {:?} must have {channels} channel(s) and sides divisible by {multiple}",
            x.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet,
}

struct DiscStage {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
    norm: bool,
    act: bool,
}

fn disc_stages(cfg: &DiscriminatorConfig) -> Vec<DiscStage> {
    let c = cfg.base_channels;
    let width = |i: usize| c * (1usize << i.min(3));
    let mut stages = vec![DiscStage {
        name: "conv0".into(),
        cin: cfg.in_channels,
        cout: c,
        stride: 2,
        norm: false,
        act: true,
    }];
    for i in 1..cfg.n_layers {
        stages.push(DiscStage {
            name: format!("conv{i}"),
            cin: width(i - 1),
            cout: width(i),
            stride: 2,
            norm: true,
            act: true,
        });
    }
    let n = cfg.n_layers;
    stages.push(DiscStage {
        name: format!("conv{n}"),
        cin: width(n - 1),
        cout: width(n),
        stride: 1,
        norm: true,
        act: true,
    });
    stages.push(DiscStage {
        name: "score".into(),
        cin: width(n),
        cout: 1,
        stride: 1,
        norm: false,
        act: false,
    });
    stages
}

impl Discriminator {
    pub fn build(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Self::build_tagged(cfg, seed, "discriminator")
    }

    pub(crate) fn build_tagged(cfg: DiscriminatorConfig, seed: u64, tag: &str) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed, tag);
        for s in disc_stages(&cfg) {
            b.conv(&s.name, [s.cout, s.cin, 4, 4], s.cout);
        }
        Ok(Discriminator { cfg, params: b.set })
    }

    pub fn forward<O: Ops>(&self, ops: &mut O, p: &[O::Var], x: &O::Var) -> O::Var {
        let mut h = x.clone();
        for (s, pair) in disc_stages(&self.cfg).iter().zip(p.chunks_exact(2)) {
            h = ops.conv2d(&h, &pair[0], Some(&pair[1]), s.stride, 1);
            if s.norm {
                h = ops.instance_norm(&h);
            }
            if s.act {
                h = ops.leaky_relu(&h, LEAKY_SLOPE);
            }
        }
        h
    }

    /// Patch scores for an N×1×H×W batch.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.cfg.in_channels, 4)?;
        let vars = self.params.eager_vars();
        let out = self.forward(&mut Eager, &vars, &Rc::new(x.clone()));
        Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Spatial size of the score map for an `h`×`w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        disc_stages(&self.cfg)
            .iter()
            .fold((h, w), |(h, w), s| ((h + 2 - 4) / s.stride + 1, (w + 2 - 4) / s.stride + 1))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn summary(&self, h: usize, w: usize) -> Vec<LayerInfo> {
        let mut size = (h, w);
        disc_stages(&self.cfg)
            .iter()
            .map(|s| {
                size = ((size.0 + 2 - 4) / s.stride + 1, (size.1 + 2 - 4) / s.stride + 1);
                let kind = format!(
                    "conv4x4/{}{}{}",
                    s.stride,
                    if s.norm { " IN" } else { "" },
                    if s.act { " LeakyReLU" } else { "" }
                );
                LayerInfo {
                    name: s.name.clone(),
                    kind,
                    out_shape: [s.cout, size.0, size.1],
                    params: 16 * s.cin * s.cout + s.cout,
                }
            })
            .collect()
    }
}

/// All four networks of the translation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    /// MR → CT.
    pub g_ct: Generator,
    /// CT → MR.
    pub g_mr: Generator,
    pub d_ct: Discriminator,
    pub d_mr: Discriminator,
}

impl ModelBundle {
    pub fn build(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Ok(ModelBundle {
            g_ct: Generator::build_tagged(gcfg, seed, "g_ct")?,
            g_mr: Generator::build_tagged(gcfg, seed, "g_mr")?,
            d_ct: Discriminator::build_tagged(dcfg, seed, "d_ct")?,
            d_mr: Discriminator::build_tagged(dcfg, seed, "d_mr")?,
        })
    }

    /// Swaps both generators for the identity map.
    pub fn with_identity_generators(mut self) -> Self {
        self.g_ct = self.g_ct.into_identity();
        self.g_mr = self.g_mr.into_identity();
        self
    }

    /// Generator producing images of `modality`.
    pub fn generator_to(&self, modality: Modality) -> &Generator {
        match modality {
            Modality::Ct => &self.g_ct,
            Modality::Mr => &self.g_mr,
        }
    }

    pub fn check_symmetry(&self) -> Result<()> {
        if self.g_ct.params.signature() != self.g_mr.params.signature() {
            return Err(Error::Contract("generator parameter shapes differ".into()));
        }
        if self.d_ct.params.signature() != self.d_mr.params.signature() {
            return Err(Error::Contract("discriminator parameter shapes differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    CtToMr,
    MrToCt,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::CtToMr, Direction::MrToCt];

    pub fn source(self) -> Modality {
        match self {
            Direction::CtToMr => Modality::Ct,
            Direction::MrToCt => Modality::Mr,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Direction::CtToMr => Modality::Mr,
            Direction::MrToCt => Modality::Ct,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::CtToMr => "CT->MR",
            Direction::MrToCt => "MR->CT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '>', '_'], "").as_str() {
            "ct2mr" | "ctmr" | "cttomr" => Ok(Direction::CtToMr),
            "mr2ct" | "mrct" | "mrtoct" => Ok(Direction::MrToCt),
            _ => Err(Error::Validation(format!("unknown direction {s:?} (use ct2mr or mr2ct)"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutputs {
    pub translated: Tensor,
    pub recovered: Tensor,
    pub identity: Option<Tensor>,
}

/// Translates `x` along `direction` and back. When `target_domain` is given,
/// the target generator is also applied to it for the identity term.
pub fn forward_cycle(
    bundle: &ModelBundle,
    x: &SliceSample,
    direction: Direction,
    target_domain: Option<&SliceSample>,
) -> Result<CycleOutputs> {
    if x.modality != direction.source() {
        return Err(Error::Contract(format!(
            "{direction} expects a {} input, got {}",
            direction.source(),
            x.modality
        )));
    }
    let forward = bundle.generator_to(direction.target());
    let backward = bundle.generator_to(direction.source());
    let input = x.to_tensor();
    let translated = forward.translate(&input)?;
    let recovered = backward.translate(&translated)?;
    let identity = match target_domain {
        Some(t) if t.modality != direction.target() => {
            return Err(Error::Contract(format!(
                "identity input for {direction} must be {}, got {}",
                direction.target(),
                t.modality
            )))
        }
        Some(t) => Some(forward.translate(&t.to_tensor())?),
        None => None,
    };
    Ok(CycleOutputs {
        translated,
        recovered,
        identity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_resblocks: 1,
            base_channels: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let g = Generator::build(small(), 3).unwrap();
        let x = Tensor::new(
            vec![2, 1, 16, 24],
            (0..768).map(|i| ((i % 50) as f64 / 25.0) - 1.0).collect(),
        )
        .unwrap();
        let y = g.translate(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn discriminator_zero_params_give_constant_map() {
        let mut d = Discriminator::build(DiscriminatorConfig { base_channels: 8, ..Default::default() }, 1).unwrap();
        for p in &mut d.params.params {
            p.value.data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![1, 1, 32, 32], (0..1024).map(|i| (i as f64).sin()).collect()).unwrap();
        let s = d.score(&x).unwrap();
        assert!(s.data().iter().all(|&v| v == s.data()[0]));
    }

    #[test]
    fn builds_are_seeded() {
        let a = ModelBundle::build(small(), DiscriminatorConfig::default(), 11).unwrap();
        let b = ModelBundle::build(small(), DiscriminatorConfig::default(), 11).unwrap();
        let c = ModelBundle::build(small(), DiscriminatorConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.g_ct.params, c.g_ct.params);
        assert_ne!(a.g_ct.params, a.g_mr.params);
        a.check_symmetry().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = GeneratorConfig { n_resblocks: 0, ..small() };
        assert!(matches!(Generator::build(bad, 0), Err(Error::Validation(_))));
        let bad = GeneratorConfig { base_channels: 4, ..small() };
        assert!(Generator::build(bad, 0).is_err());
        let bad = DiscriminatorConfig { n_layers: 0, ..Default::default() };
        assert!(Discriminator::build(bad, 0).is_err());
    }

    #[test]
    fn direction_parsing() {
        assert_eq!(Direction::parse("ct2mr").unwrap(), Direction::CtToMr);
        assert_eq!(Direction::parse("MR->CT").unwrap(), Direction::MrToCt);
        assert!(Direction::parse("xx").is_err());
    }
}

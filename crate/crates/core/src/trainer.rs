//! Adversarial optimization loop, replay buffers and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorTerms, LossBreakdown, LOSS_LOG_HEADER};
use crate::networks::{Discriminator, ModelBundle};
use crate::optim::{lr_at_epoch, AdamHyper, AdamState};
use crate::pipeline::{SliceSample, UnpairedLoader};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// History of past translations shown to a discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub images: Vec<Tensor>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            images: Vec::new(),
        }
    }

    /// Returns the image the discriminator should see in place of `image`.
    pub fn query(&mut self, image: Tensor, rng: &mut impl Rng) -> Tensor {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.gen::<f64>() > 0.5 {
            let i = rng.gen_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }

    /// Applies [`Self::query`] to each item of an N×1×H×W batch.
    pub fn query_batch(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Tensor {
        let n = batch.dims4().0;
        let items: Vec<Tensor> = (0..n).map(|i| self.query(batch.batch_item(i), rng)).collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>()).expect("items share a shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub bundle: ModelBundle,
    /// Moments of G_CT's parameters followed by G_MR's.
    pub adam_g: AdamState,
    pub adam_d_ct: AdamState,
    pub adam_d_mr: AdamState,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub replay_ct: ReplayBuffer,
    pub replay_mr: ReplayBuffer,
}

impl TrainState {
    pub fn new(settings: &Settings) -> Result<Self> {
        settings.validate()?;
        let bundle = ModelBundle::build(settings.generator, settings.discriminator, settings.train.seed)?;
        Ok(Self::from_bundle(bundle, settings))
    }

    pub fn from_bundle(bundle: ModelBundle, settings: &Settings) -> Self {
        let gen_tensors = bundle.g_ct.params.iter().chain(bundle.g_mr.params.iter()).map(|p| &p.value);
        let cap = settings.train.replay_buffer_size;
        TrainState {
            adam_g: AdamState::for_shapes(gen_tensors),
            adam_d_ct: AdamState::for_shapes(bundle.d_ct.params.iter().map(|p| &p.value)),
            adam_d_mr: AdamState::for_shapes(bundle.d_mr.params.iter().map(|p| &p.value)),
            bundle,
            step: 0,
            epoch: 0,
            rng: rng::stream_rng(settings.train.seed, &[rng::label("train")]),
            replay_ct: ReplayBuffer::new(cap),
            replay_mr: ReplayBuffer::new(cap),
        }
    }
}

/// One unpaired batch as N×1×H×W tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ct: Tensor,
    pub mr: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[(SliceSample, SliceSample)]) -> Result<Self> {
        let ct: Vec<Tensor> = pairs.iter().map(|(c, _)| c.to_tensor()).collect();
        let mr: Vec<Tensor> = pairs.iter().map(|(_, m)| m.to_tensor()).collect();
        Ok(Batch {
            ct: Tensor::stack(&ct.iter().collect::<Vec<_>>())?,
            mr: Tensor::stack(&mr.iter().collect::<Vec<_>>())?,
        })
    }
}

fn record_params(g: &mut Graph, params: &crate::networks::ParamSet, trainable: bool) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| {
            if trainable {
                g.param(p.value.clone())
            } else {
                g.constant(p.value.clone())
            }
        })
        .collect()
}

/// Node handles of a recorded generator objective.
pub struct GeneratorObjective {
    pub g_ct_params: Vec<NodeId>,
    pub g_mr_params: Vec<NodeId>,
    /// G_MR(x_ct)
    pub translated_mr: NodeId,
    /// G_CT(x_mr)
    pub translated_ct: NodeId,
    pub gan: NodeId,
    pub cycle: NodeId,
    pub identity: Option<NodeId>,
    pub ssim: Option<NodeId>,
    pub total: NodeId,
    /// Unweighted values of every term, including those left off the tape.
    pub terms: GeneratorTerms,
}

/// Records the composite generator objective on `g`. Discriminator
/// parameters enter as constants. Terms whose weight is zero are evaluated
/// for logging but not recorded, so they contribute nothing to gradients.
pub fn record_generator_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    batch: &Batch,
    settings: &Settings,
) -> Result<GeneratorObjective> {
    if !batch.ct.same_shape(&batch.mr) {
        return Err(Error::Contract(format!(
            "CT batch {:?} and MR batch {:?} differ in shape",
            batch.ct.shape(),
            batch.mr.shape()
        )));
    }
    let w = settings.train.weights;
    let (k, mode) = (settings.ssim_constants, settings.ssim_mode);
    let g_ct_params = record_params(g, &bundle.g_ct.params, true);
    let g_mr_params = record_params(g, &bundle.g_mr.params, true);
    let d_ct_params = record_params(g, &bundle.d_ct.params, false);
    let d_mr_params = record_params(g, &bundle.d_mr.params, false);
    let x_ct = g.constant(batch.ct.clone());
    let x_mr = g.constant(batch.mr.clone());

    let translated_mr = bundle.g_mr.forward(g, &g_mr_params, &x_ct);
    let recovered_ct = bundle.g_ct.forward(g, &g_ct_params, &translated_mr);
    let translated_ct = bundle.g_ct.forward(g, &g_ct_params, &x_mr);
    let recovered_mr = bundle.g_mr.forward(g, &g_mr_params, &translated_ct);

    let s_mr = bundle.d_mr.forward(g, &d_mr_params, &translated_mr);
    let s_ct = bundle.d_ct.forward(g, &d_ct_params, &translated_ct);
    let gan_mr = g.mean_squared_deviation(s_mr, 1.0);
    let gan_ct = g.mean_squared_deviation(s_ct, 1.0);
    let gan = g.linear(&[(gan_mr, 1.0), (gan_ct, 1.0)]);

    let cyc_mr = g.mean_abs_diff(recovered_mr, x_mr);
    let cyc_ct = g.mean_abs_diff(recovered_ct, x_ct);
    let cycle = g.linear(&[(cyc_mr, 1.0), (cyc_ct, 1.0)]);

    let (identity, identity_value) = if w.lambda_id != 0.0 {
        let id_ct = bundle.g_ct.forward(g, &g_ct_params, &x_ct);
        let id_mr = bundle.g_mr.forward(g, &g_mr_params, &x_mr);
        let a = g.mean_abs_diff(id_ct, x_ct);
        let b = g.mean_abs_diff(id_mr, x_mr);
        let node = g.linear(&[(a, 1.0), (b, 1.0)]);
        (Some(node), g.scalar(node))
    } else {
        let id_ct = bundle.g_ct.translate(&batch.ct)?;
        let id_mr = bundle.g_mr.translate(&batch.mr)?;
        (None, losses::identity_loss(&id_ct, &batch.ct, &id_mr, &batch.mr)?)
    };

    let (ssim, ssim_value) = if w.lambda_ssim != 0.0 {
        let node = match mode {
            losses::SsimMode::Literal => g.ssim_loss(translated_mr, translated_ct, k, mode),
            _ => {
                let a = g.ssim_loss(x_ct, translated_mr, k, mode);
                let b = g.ssim_loss(x_mr, translated_ct, k, mode);
                g.linear(&[(a, 0.5), (b, 0.5)])
            }
        };
        (Some(node), g.scalar(node))
    } else {
        let v = losses::ssim_term(&batch.ct, g.value(translated_mr), &batch.mr, g.value(translated_ct), k, mode)?;
        (None, v)
    };

    let mut parts = vec![(gan, 1.0), (cycle, w.lambda_cyc)];
    if let Some(id) = identity {
        parts.push((id, w.lambda_id));
    }
    if let Some(s) = ssim {
        parts.push((s, w.lambda_ssim));
    }
    let total = g.linear(&parts);
    let terms = GeneratorTerms {
        gan: g.scalar(gan),
        cycle: g.scalar(cycle),
        identity: identity_value,
        ssim: ssim_value,
    };
    Ok(GeneratorObjective {
        g_ct_params,
        g_mr_params,
        translated_mr,
        translated_ct,
        gan,
        cycle,
        identity,
        ssim,
        total,
        terms,
    })
}

/// Generator terms and gradients (G_CT parameters first, then G_MR) for one batch.
pub fn generator_gradients(bundle: &ModelBundle, batch: &Batch, settings: &Settings) -> Result<(GeneratorTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let obj = record_generator_objective(&mut g, bundle, batch, settings)?;
    let mut grads = g.backward(obj.total);
    let params = bundle.g_ct.params.iter().chain(bundle.g_mr.params.iter());
    let ids = obj.g_ct_params.iter().chain(&obj.g_mr_params);
    let out = ids
        .zip(params)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((obj.terms, out))
}

/// Loss of one discriminator and its gradients.
pub fn discriminator_gradients(d: &Discriminator, real: &Tensor, translated: &Tensor) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let ids = record_params(&mut g, &d.params, true);
    let real = g.constant(real.clone());
    let fake = g.constant(translated.clone());
    let s_real = d.forward(&mut g, &ids, &real);
    let s_fake = d.forward(&mut g, &ids, &fake);
    let a = g.mean_squared_deviation(s_real, 1.0);
    let b = g.mean_squared_deviation(s_fake, 0.0);
    let loss = g.linear(&[(a, 1.0), (b, 1.0)]);
    let mut grads = g.backward(loss);
    let out = ids
        .iter()
        .zip(d.params.iter())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    (g.scalar(loss), out)
}

fn hyper(settings: &Settings) -> AdamHyper {
    AdamHyper {
        beta1: settings.train.adam_beta1,
        beta2: settings.train.adam_beta2,
        ..AdamHyper::default()
    }
}

fn non_finite(terms: &[(&str, f64)], step: u64) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite {
            term: name.to_string(),
            step,
        }),
        None => Ok(()),
    }
}

fn adam_step_generators(
    state: &mut TrainState,
    grads: &[Tensor],
    lr: f64,
    h: AdamHyper,
) -> Result<()> {
    let bundle = &mut state.bundle;
    let mut params: Vec<&mut Tensor> = bundle
        .g_ct
        .params
        .params
        .iter_mut()
        .chain(bundle.g_mr.params.params.iter_mut())
        .map(|p| &mut p.value)
        .collect();
    let grads: Vec<&Tensor> = grads.iter().collect();
    state.adam_g.step(&mut params, &grads, lr, h)
}

fn adam_step_discriminator(d: &mut Discriminator, adam: &mut AdamState, grads: &[Tensor], lr: f64, h: AdamHyper) -> Result<()> {
    let mut params: Vec<&mut Tensor> = d.params.params.iter_mut().map(|p| &mut p.value).collect();
    let grads: Vec<&Tensor> = grads.iter().collect();
    adam.step(&mut params, &grads, lr, h)
}

/// Learning rate in effect for `state.epoch`.
pub fn current_lr(state: &TrainState, settings: &Settings) -> f64 {
    let t = &settings.train;
    lr_at_epoch(t.lr, state.epoch, t.epochs, t.lr_decay_start)
}

/// One generator update followed by one update of each discriminator.
/// The reported step number in errors is the 1-based step being computed.
pub fn train_step(state: &mut TrainState, batch: &Batch, settings: &Settings) -> Result<LossBreakdown> {
    let step_no = state.step + 1;
    let lr = current_lr(state, settings);
    let h = hyper(settings);
    let w = settings.train.weights;

    let (terms, translated_mr, translated_ct, grads) = {
        let mut g = Graph::new();
        let obj = record_generator_objective(&mut g, &state.bundle, batch, settings)?;
        let total = losses::generator_total_loss(obj.terms, w);
        non_finite(
            &[
                ("gan", obj.terms.gan),
                ("cycle", obj.terms.cycle),
                ("identity", obj.terms.identity),
                ("ssim", obj.terms.ssim),
                ("generator_total", total),
            ],
            step_no,
        )?;
        let mut grads = g.backward(obj.total);
        let params = state.bundle.g_ct.params.iter().chain(state.bundle.g_mr.params.iter());
        let ids = obj.g_ct_params.iter().chain(&obj.g_mr_params);
        let grads: Vec<Tensor> = ids
            .zip(params)
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        (obj.terms, g.value(obj.translated_mr).clone(), g.value(obj.translated_ct).clone(), grads)
    };
    adam_step_generators(state, &grads, lr, h)?;
    drop(grads);

    let pooled_ct = state.replay_ct.query_batch(&translated_ct, &mut state.rng);
    let pooled_mr = state.replay_mr.query_batch(&translated_mr, &mut state.rng);

    let (dis_ct, g_dct) = discriminator_gradients(&state.bundle.d_ct, &batch.ct, &pooled_ct);
    non_finite(&[("dis_ct", dis_ct)], step_no)?;
    adam_step_discriminator(&mut state.bundle.d_ct, &mut state.adam_d_ct, &g_dct, lr, h)?;
    let (dis_mr, g_dmr) = discriminator_gradients(&state.bundle.d_mr, &batch.mr, &pooled_mr);
    non_finite(&[("dis_mr", dis_mr)], step_no)?;
    adam_step_discriminator(&mut state.bundle.d_mr, &mut state.adam_d_mr, &g_dmr, lr, h)?;

    state.step = step_no;
    Ok(LossBreakdown {
        gan: terms.gan,
        cycle: terms.cycle,
        identity: terms.identity,
        ssim: terms.ssim,
        generator_total: losses::generator_total_loss(terms, w),
        dis_ct,
        dis_mr,
    })
}

/// Serialized training state plus the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub settings: Settings,
    pub state: TrainState,
    /// sha256 of the loss log text up to `state.step`.
    pub log_digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let payload = bincode::serialize(ckpt).map_err(|e| Error::Unsupported(format!("checkpoint encoding failed: {e}")))?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    const HEAD: usize = 8 + 4 + 8 + 32;
    if bytes.len() < HEAD || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "{} has format version {version}, this build reads version {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEAD..];
    if payload.len() != len {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header declares {len} (truncated?)", payload.len()),
        ));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    let ckpt: Checkpoint =
        bincode::deserialize(payload).map_err(|e| Error::format(path, format!("undecodable payload: {e}")))?;
    if ckpt.version != version {
        return Err(Error::format(path, "header and payload versions disagree"));
    }
    Ok(ckpt)
}

/// Writes atomically: a partial file never replaces an existing checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Checks that a checkpoint can be used under `current` settings. Network
/// shapes must agree; differing loss settings only produce warnings because
/// they matter at training time alone.
pub fn check_compatible(ckpt: &Settings, current: &Settings) -> Result<Vec<String>> {
    if ckpt.generator != current.generator || ckpt.discriminator != current.discriminator {
        return Err(Error::Incompatible(format!(
            "checkpoint networks {:?}/{:?} differ from configured {:?}/{:?}",
            ckpt.generator, ckpt.discriminator, current.generator, current.discriminator
        )));
    }
    let mut warnings = Vec::new();
    if ckpt.train.weights != current.train.weights {
        warnings.push(format!(
            "checkpoint was trained with loss weights {:?}, current settings use {:?}",
            ckpt.train.weights, current.train.weights
        ));
    }
    if ckpt.ssim_mode != current.ssim_mode || ckpt.ssim_constants != current.ssim_constants {
        warnings.push("checkpoint was trained with different SSIM settings".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(warnings)
}

/// Loss log writer that tracks the digest of everything written so far.
struct LossLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
    hasher: Sha256,
}

impl LossLog {
    fn create(path: &Path, previous: &[(u64, LossBreakdown)]) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = LossLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            hasher: Sha256::new(),
        };
        log.line(LOSS_LOG_HEADER)?;
        for (step, row) in previous {
            log.line(&row.csv_row(*step))?;
        }
        Ok(log)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        self.hasher.update(text.as_bytes());
        self.hasher.update(b"\n");
        writeln!(self.out, "{text}").map_err(|e| Error::io(&self.path, e))
    }

    fn digest(&self) -> String {
        hex(&self.hasher.clone().finalize())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Digest of a loss log holding `rows`.
pub fn log_digest(rows: &[(u64, LossBreakdown)]) -> String {
    let mut h = Sha256::new();
    h.update(LOSS_LOG_HEADER.as_bytes());
    h.update(b"\n");
    for (step, r) in rows {
        h.update(r.csv_row(*step).as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, LossBreakdown)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOSS_LOG_HEADER) {
        return Err(Error::format(path, format!("line 1: expected header {LOSS_LOG_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            LossBreakdown::parse_csv_row(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect()
}

pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<(u64, LossBreakdown)>,
}

pub fn steps_per_epoch(loader: &UnpairedLoader, batch_size: usize) -> u64 {
    loader.len().div_ceil(batch_size) as u64
}

/// Total optimization steps of a run.
pub fn total_steps(loader: &UnpairedLoader, settings: &Settings) -> u64 {
    let all = settings.train.epochs * steps_per_epoch(loader, settings.train.batch_size);
    settings.train.max_steps.map_or(all, |m| m.min(all))
}

/// Batch `step` (0-based) of the deterministic schedule.
pub fn batch_for_step(loader: &UnpairedLoader, settings: &Settings, step: u64) -> Result<Batch> {
    let bs = settings.train.batch_size;
    let spe = steps_per_epoch(loader, bs);
    let epoch = step / spe;
    let start = (step % spe) as usize * bs;
    let end = (start + bs).min(loader.len());
    let pairs = (start..end).map(|p| loader.pair(epoch, p)).collect::<Result<Vec<_>>>()?;
    Batch::from_pairs(&pairs)
}

fn checkpoint_of(state: &TrainState, settings: &Settings, digest: String) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        settings: settings.clone(),
        state: state.clone(),
        log_digest: digest,
    }
}

/// Runs the full schedule, writing `losses.csv`, periodic
/// `checkpoint_<step>.ckpt` files and `final.ckpt` into `out_dir`.
pub fn fit(settings: &Settings, loader: &UnpairedLoader, out_dir: &Path, resume: Option<Checkpoint>) -> Result<FitOutcome> {
    settings.validate()?;
    if loader.is_empty() {
        return Err(Error::Validation("training loader is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let (mut state, mut rows) = match resume {
        Some(ckpt) => {
            check_compatible(&ckpt.settings, settings)?;
            let done = ckpt.state.step;
            let rows: Vec<_> = match read_loss_log(&log_path) {
                Ok(r) => r.into_iter().filter(|(s, _)| *s <= done).collect(),
                Err(_) => Vec::new(),
            };
            if log_digest(&rows) != ckpt.log_digest {
                log::warn!(
                    "loss log in {} does not match the checkpoint; steps 1..={done} are missing from the new log",
                    out_dir.display()
                );
            }
            (ckpt.state, rows)
        }
        None => (TrainState::new(settings)?, Vec::new()),
    };
    let mut log = LossLog::create(&log_path, &rows)?;
    let total = total_steps(loader, settings);
    let spe = steps_per_epoch(loader, settings.train.batch_size);
    let t = &settings.train;

    let run = (|| -> Result<()> {
        while state.step < total {
            state.epoch = state.step / spe;
            let batch = batch_for_step(loader, settings, state.step)?;
            let row = train_step(&mut state, &batch, settings)?;
            log.line(&row.csv_row(state.step))?;
            rows.push((state.step, row));
            if t.log_every > 0 && state.step % t.log_every == 0 {
                log::info!(
                    "step {}/{total} epoch {} generator_total {:.5} dis_ct {:.5} dis_mr {:.5}",
                    state.step,
                    state.epoch,
                    row.generator_total,
                    row.dis_ct,
                    row.dis_mr
                );
            }
            if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
                log.flush()?;
                let path = out_dir.join(format!("checkpoint_{:06}.ckpt", state.step));
                save_checkpoint(&checkpoint_of(&state, settings, log.digest()), &path)?;
            }
        }
        Ok(())
    })();
    let flushed = log.flush();
    run?;
    flushed?;
    state.epoch = state.step / spe;
    let checkpoint = checkpoint_of(&state, settings, log.digest());
    save_checkpoint(&checkpoint, &out_dir.join(FINAL_CHECKPOINT))?;
    Ok(FitOutcome { checkpoint, log: rows })
}

/// Bundle of a trained checkpoint, after a compatibility check.
pub fn bundle_for_eval(ckpt: &Checkpoint, current: &Settings) -> Result<(ModelBundle, Vec<String>)> {
    let warnings = check_compatible(&ckpt.settings, current)?;
    Ok((ckpt.state.bundle.clone(), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn replay_policy() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let img = |v: f64| Tensor::full(&[1, 1, 2, 2], v);
        let mut zero = ReplayBuffer::new(0);
        assert_eq!(zero.query(img(3.0), &mut r), img(3.0));
        assert!(zero.images.is_empty());

        let mut b = ReplayBuffer::new(2);
        assert_eq!(b.query(img(1.0), &mut r), img(1.0));
        assert_eq!(b.query(img(2.0), &mut r), img(2.0));
        let mut swapped = 0;
        for i in 0..200 {
            let out = b.query(img(10.0 + i as f64), &mut r);
            assert!(b.images.len() <= 2);
            if out != img(10.0 + i as f64) {
                swapped += 1;
            }
        }
        assert!((60..140).contains(&swapped), "swap count {swapped}");
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = Settings::default();
        s.generator.base_channels = 8;
        s.generator.n_resblocks = 1;
        s.discriminator.base_channels = 8;
        let state = TrainState::new(&s).unwrap();
        let ckpt = checkpoint_of(&state, &s, log_digest(&[]));
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let p = Path::new("mem");
        assert_eq!(decode_checkpoint(&bytes, p).unwrap(), ckpt);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
        let mut other = bytes.clone();
        other[8] = 9;
        assert!(matches!(decode_checkpoint(&other, p), Err(Error::Incompatible(_))));
    }
}

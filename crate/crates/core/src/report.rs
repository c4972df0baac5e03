//! Volume translation, comparison tables, image grids and loss plots.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{GrayImage, ImageEncoder, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{self, EmbeddingExtractor, EvalOptions, Evaluation, MetricsReport};
use crate::networks::{Direction, ModelBundle};
use crate::pipeline::{self, PreprocessConfig, SliceSample};
use crate::trainer;
use crate::volume::VolumeRecord;

pub const METRICS_HEADER: &str = "model,direction,fid,ssim,mi,pixacc,n_slices";
pub const PER_SLICE_HEADER: &str = "model,direction,source_id,slice_index,ssim,mi,pixacc";

/// Translates every preprocessed slice of `v` and returns the result in [0, 1].
pub fn translate_volume(
    bundle: &ModelBundle,
    v: &VolumeRecord,
    direction: Direction,
    cfg: &PreprocessConfig,
) -> Result<VolumeRecord> {
    if v.modality != direction.source() {
        log::warn!(
            "{} is a {} volume but {direction} expects {}",
            v.source_id,
            v.modality,
            direction.source()
        );
    }
    let g = bundle.generator_to(direction.target());
    let slices = pipeline::preprocess_for_eval(v, cfg)?;
    let d = cfg.crop_dim;
    let mut voxels = Array3::zeros((d, d, slices.len()));
    for (k, s) in slices.iter().enumerate() {
        let out = g.translate(&s.to_tensor())?;
        for (i, &p) in out.data().iter().enumerate() {
            voxels[[i / d, i % d, k]] = (p + 1.0) * 0.5;
        }
    }
    VolumeRecord::new(voxels, direction.target(), format!("{}_{}", v.source_id, direction.target().tag().to_lowercase()))
}

/// Provenance written next to every translated volume.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub model_sha256: String,
    pub checkpoint: String,
    pub direction: String,
    pub source: String,
    pub created: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_provenance(out: &Path, checkpoint: &Path, direction: Direction, source: &Path) -> Result<PathBuf> {
    let p = Provenance {
        model_sha256: file_sha256(checkpoint)?,
        checkpoint: checkpoint.display().to_string(),
        direction: direction.label().to_string(),
        source: source.display().to_string(),
        created: humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string(),
    };
    let path = PathBuf::from(format!("{}.json", out.display()));
    let text = serde_json::to_string_pretty(&p).expect("plain struct serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Result of evaluating one named model.
#[derive(Clone, Debug)]
pub struct ModelRows {
    pub name: String,
    pub evaluation: Evaluation,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_csv(rows: &[ModelRows]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        for r in &m.evaluation.reports {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.name,
                r.direction.label(),
                fmt(r.fid),
                fmt(r.ssim),
                fmt(r.mi),
                fmt(r.pixacc),
                r.n_slices
            ));
        }
    }
    s
}

pub fn per_slice_csv(rows: &[ModelRows]) -> String {
    let mut s = String::from(PER_SLICE_HEADER);
    s.push('\n');
    for m in rows {
        for p in &m.evaluation.per_slice {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.name,
                p.direction.label(),
                p.source_id,
                p.slice_index,
                fmt(p.ssim),
                fmt(p.mi),
                fmt(p.pixacc)
            ));
        }
    }
    s
}

/// Model × (CT→MR, MR→CT) × (FID, SSIM, MI, pixacc) text table.
pub fn comparison_table(rows: &[ModelRows]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let cols = ["FID", "SSIM", "MI", "pixacc"];
    let block = |r: &MetricsReport| {
        [r.fid, r.ssim, r.mi, r.pixacc]
            .iter()
            .map(|v| format!("{v:>8.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let heads = cols.iter().map(|c| format!("{c:>8}")).collect::<Vec<_>>().join(" ");
    let span = heads.len();
    let mut s = format!(
        "{:name_w$} | {:^span$} | {:^span$}\n",
        "Model",
        Direction::CtToMr.label(),
        Direction::MrToCt.label()
    );
    s.push_str(&format!("{:name_w$} | {heads} | {heads}\n", ""));
    s.push_str(&format!("{}-+-{}-+-{}\n", "-".repeat(name_w), "-".repeat(span), "-".repeat(span)));
    for m in rows {
        let [a, b] = &m.evaluation.reports;
        s.push_str(&format!("{:name_w$} | {} | {}\n", m.name, block(a), block(b)));
    }
    s
}

/// Paths written by [`write_report`].
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub per_slice_csv: PathBuf,
    pub table: PathBuf,
}

pub fn write_report(rows: &[ModelRows], out_dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(Error::Validation("no model could be evaluated; nothing to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        metrics_csv: out_dir.join("metrics.csv"),
        per_slice_csv: out_dir.join("per_slice.csv"),
        table: out_dir.join("table.txt"),
    };
    for (path, text) in [
        (&files.metrics_csv, metrics_csv(rows)),
        (&files.per_slice_csv, per_slice_csv(rows)),
        (&files.table, comparison_table(rows)),
    ] {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// Name of a model that could not be evaluated, with the reason.
pub type CheckpointFailure = (String, Error);

/// Evaluates each named checkpoint. Failing models are returned separately
/// so the remaining rows can still be reported.
pub fn evaluate_checkpoints(
    checkpoints: &[(String, PathBuf)],
    ct_test: &[VolumeRecord],
    mr_test: &[VolumeRecord],
    cfg: &PreprocessConfig,
    ex: &EmbeddingExtractor,
    opts: &EvalOptions,
) -> Result<(Vec<ModelRows>, Vec<CheckpointFailure>)> {
    if checkpoints.is_empty() {
        return Err(Error::Validation("at least one checkpoint is required".into()));
    }
    // Fails early, before any model is loaded, when the test set is empty.
    let ct = metrics::eval_slices(ct_test, crate::volume::Modality::Ct, cfg)?;
    let mr = metrics::eval_slices(mr_test, crate::volume::Modality::Mr, cfg)?;
    if ct.is_empty() || mr.is_empty() {
        return Err(Error::Validation("test set has zero slices".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, path) in checkpoints {
        let result = trainer::load_checkpoint(path).and_then(|ck| {
            metrics::evaluate_model(&ck.state.bundle, ct_test, mr_test, cfg, ex, opts)
        });
        match result {
            Ok(evaluation) => rows.push(ModelRows {
                name: name.clone(),
                evaluation,
            }),
            Err(e) => {
                log::error!("model {name}: {e}");
                failures.push((name.clone(), e));
            }
        }
    }
    Ok((rows, failures))
}

/// Role of one grid column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridColumn {
    Real,
    /// Translation by model `i`.
    Translated(usize),
    /// Round trip through model `i`.
    Recovered(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub columns: Vec<GridColumn>,
    pub cell_size: usize,
}

impl GridSpec {
    /// real, then translated and recovered for each model in order.
    pub fn standard(rows: usize, n_models: usize, cell_size: usize) -> Self {
        let mut columns = vec![GridColumn::Real];
        for i in 0..n_models {
            columns.push(GridColumn::Translated(i));
            columns.push(GridColumn::Recovered(i));
        }
        GridSpec {
            rows,
            columns,
            cell_size,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        ((self.columns.len() * self.cell_size) as u32, (self.rows * self.cell_size) as u32)
    }
}

/// `rows` indices spread uniformly over `0..n`.
pub fn uniform_selection(n: usize, rows: usize) -> Vec<usize> {
    match (n, rows) {
        (0, _) | (_, 0) => Vec::new(),
        (_, 1) => vec![n / 2],
        _ => (0..rows)
            .map(|i| ((i * (n - 1)) as f64 / (rows - 1) as f64).round() as usize)
            .collect(),
    }
}

fn to_cell(pixels: &Array2<f64>, cell: usize) -> Result<Array2<f64>> {
    let unit = pixels.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    if unit.dim() == (cell, cell) {
        return Ok(unit);
    }
    Ok(pipeline::resize_bicubic(&unit, cell)?.mapv(|v| v.clamp(0.0, 1.0)))
}

fn image_of(t: &crate::tensor::Tensor) -> Array2<f64> {
    let (_, _, h, w) = t.dims4();
    Array2::from_shape_vec((h, w), t.data().to_vec()).expect("dims match")
}

/// Composite of real, translated and recovered slices, one sample per row.
pub fn render_grid(
    spec: &GridSpec,
    models: &[(String, ModelBundle)],
    samples: &[SliceSample],
    direction: Direction,
) -> Result<GrayImage> {
    if samples.len() != spec.rows {
        return Err(Error::Validation(format!(
            "grid has {} rows but {} samples were given",
            spec.rows,
            samples.len()
        )));
    }
    for c in &spec.columns {
        if let GridColumn::Translated(i) | GridColumn::Recovered(i) = c {
            if *i >= models.len() {
                return Err(Error::Validation(format!("grid column {c:?} names a missing model")));
            }
        }
    }
    let (w, h) = spec.dimensions();
    let mut img = GrayImage::new(w, h);
    let cs = spec.cell_size;
    for (row, s) in samples.iter().enumerate() {
        let x = s.to_tensor();
        let mut cache: Vec<Option<(Array2<f64>, Array2<f64>)>> = vec![None; models.len()];
        for (col, c) in spec.columns.iter().enumerate() {
            let pixels = match *c {
                GridColumn::Real => s.pixels.clone(),
                GridColumn::Translated(i) | GridColumn::Recovered(i) => {
                    if cache[i].is_none() {
                        let b = &models[i].1;
                        let t = b.generator_to(direction.target()).translate(&x)?;
                        let r = b.generator_to(direction.source()).translate(&t)?;
                        cache[i] = Some((image_of(&t), image_of(&r)));
                    }
                    let (t, r) = cache[i].as_ref().expect("filled above");
                    if matches!(c, GridColumn::Translated(_)) {
                        t.clone()
                    } else {
                        r.clone()
                    }
                }
            };
            let cell = to_cell(&pixels, cs)?;
            for ((y, xx), v) in cell.indexed_iter() {
                img.put_pixel(
                    (col * cs + xx) as u32,
                    (row * cs + y) as u32,
                    Luma([(v * 255.0).round() as u8]),
                );
            }
        }
    }
    Ok(img)
}

fn png_encoder<W: std::io::Write>(w: W) -> PngEncoder<W> {
    PngEncoder::new_with_quality(w, CompressionType::Default, FilterType::Adaptive)
}

/// 8-bit, non-interlaced PNG with fixed encoder settings.
pub fn write_png_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    png_encoder(BufWriter::new(file))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|e| Error::format(path, format!("png encoding failed: {e}")))
}

pub fn write_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    png_encoder(BufWriter::new(file))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, format!("png encoding failed: {e}")))
}

/// Generator and discriminator curves of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCurves {
    pub name: String,
    pub steps: Vec<u64>,
    pub generator_total: Vec<f64>,
    /// dis_ct + dis_mr
    pub discriminator: Vec<f64>,
}

impl LossCurves {
    pub fn from_rows(name: &str, rows: &[(u64, LossBreakdown)]) -> Self {
        LossCurves {
            name: name.to_string(),
            steps: rows.iter().map(|(s, _)| *s).collect(),
            generator_total: rows.iter().map(|(_, r)| r.generator_total).collect(),
            discriminator: rows.iter().map(|(_, r)| r.dis_ct + r.dis_mr).collect(),
        }
    }
}

/// Step-aligned CSV of every curve; a model without a value at a step leaves its cells empty.
pub fn aligned_curves_csv(curves: &[LossCurves]) -> String {
    let mut steps: Vec<u64> = curves.iter().flat_map(|c| c.steps.iter().copied()).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut s = String::from("step");
    for c in curves {
        s.push_str(&format!(",{0}_generator_total,{0}_discriminator", c.name));
    }
    s.push('\n');
    let mut cursors = vec![0usize; curves.len()];
    for step in steps {
        s.push_str(&step.to_string());
        for (c, cur) in curves.iter().zip(cursors.iter_mut()) {
            if c.steps.get(*cur) == Some(&step) {
                s.push_str(&format!(",{},{}", fmt(c.generator_total[*cur]), fmt(c.discriminator[*cur])));
                *cur += 1;
            } else {
                s.push_str(",,");
            }
        }
        s.push('\n');
    }
    s
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn lighten(c: [u8; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v + (255 - v) / 2))
}

/// Overlaid curves: each model's generator total in its color and its
/// discriminator sum in a lighter shade. The x axis spans the longest log.
pub fn plot_curves(curves: &[LossCurves], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 40i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let max_step = curves.iter().filter_map(|c| c.steps.last().copied()).max().unwrap_or(1).max(1);
    let min_step = curves.iter().filter_map(|c| c.steps.first().copied()).min().unwrap_or(0);
    let values = curves
        .iter()
        .flat_map(|c| c.generator_total.iter().chain(&c.discriminator))
        .copied()
        .filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);
    let span = (max_step - min_step).max(1) as f64;
    let to_px = |step: u64, v: f64| {
        let x = margin + ((step - min_step) as f64 / span * w as f64).round() as i64;
        let y = margin + h - ((v - lo) / (hi - lo) * h as f64).round() as i64;
        (x, y)
    };
    for (i, c) in curves.iter().enumerate() {
        let base = PALETTE[i % PALETTE.len()];
        for (series, color) in [(&c.discriminator, lighten(base)), (&c.generator_total, Rgb(base))] {
            let pts: Vec<(i64, i64)> = c
                .steps
                .iter()
                .zip(series.iter())
                .filter(|(_, v)| v.is_finite())
                .map(|(&s, &v)| to_px(s, v))
                .collect();
            if pts.len() == 1 {
                draw_line(&mut img, pts[0], pts[0], color);
            }
            for seg in pts.windows(2) {
                draw_line(&mut img, seg[0], seg[1], color);
            }
        }
    }
    img
}

/// Reads every log, then writes `<out>.csv` with aligned values and `out` as PNG.
pub fn plot_losses(logs: &[(String, PathBuf)], out: &Path) -> Result<(PathBuf, Vec<LossCurves>)> {
    if logs.is_empty() {
        return Err(Error::Validation("plot needs at least one loss log".into()));
    }
    let curves = logs
        .iter()
        .map(|(name, path)| Ok(LossCurves::from_rows(name, &trainer::read_loss_log(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let csv_path = out.with_extension("csv");
    fs::write(&csv_path, aligned_curves_csv(&curves)).map_err(|e| Error::io(&csv_path, e))?;
    write_png_rgb(&plot_curves(&curves, 800, 500), out)?;
    Ok((csv_path, curves))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_selection_covers_ends() {
        assert_eq!(uniform_selection(10, 3), vec![0, 5, 9]);
        assert_eq!(uniform_selection(10, 1), vec![5]);
        assert!(uniform_selection(0, 3).is_empty());
    }

    #[test]
    fn grid_dimensions() {
        assert_eq!(GridSpec::standard(3, 2, 256).dimensions(), (1280, 768));
    }

    #[test]
    fn shorter_curve_ends_early() {
        let a = LossCurves {
            name: "a".into(),
            steps: vec![1, 2, 3],
            generator_total: vec![3.0, 2.0, 1.0],
            discriminator: vec![0.5; 3],
        };
        let b = LossCurves {
            name: "b".into(),
            steps: vec![1],
            generator_total: vec![4.0],
            discriminator: vec![0.25],
        };
        let csv = aligned_curves_csv(&[a, b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,a_generator_total,a_discriminator,b_generator_total,b_discriminator");
        assert_eq!(lines[1], "1,3,0.5,4,0.25");
        assert_eq!(lines[3], "3,1,0.5,,");
    }
}

//! Pipeline operations behind the `sliceflow` binary: dataset generation,
//! the two training phases, volume upsampling, evaluation, and the full
//! benchmark matrix. Each function is callable from library code as well,
//! which is how the integration tests and examples drive them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{linear_interpolate, nn_interpolate};
use crate::error::{Error, Result};
use crate::flownet::{self, FlowNetConfig};
use crate::metrics::{asd, psnr, seg_overlap, ssim, MetricReport};
use crate::numerics::{ParamStore, Tensor};
use crate::phantom::{self, PhantomSpec};
use crate::segmenter::{self, UNetConfig};
use crate::training::{self, TrainConfig};
use crate::volume::{
    extract_triplets, read_nifti, read_nifti_pair, window_normalize, write_nifti, write_seg_nifti,
    IntensityUnit, SegVolume, SliceTriplet, Volume, DEFAULT_WINDOW,
};

/// Interpolation method selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Nearest,
    Linear,
    Flow,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" | "nearest" => Ok(Method::Nearest),
            "linear" => Ok(Method::Linear),
            "flow" => Ok(Method::Flow),
            other => Err(Error::Invalid(format!(
                "unknown method {other:?} (expected nn, linear, or flow)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nearest => "nn",
            Method::Linear => "linear",
            Method::Flow => "flow",
        })
    }
}

/// One phantom case on disk: image volume in HU plus its label volume.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub seg: SegVolume,
}

/// Read every case listed in `<data_dir>/manifest.txt`.
pub fn load_cases(data_dir: &Path) -> Result<Vec<Case>> {
    let manifest = data_dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut cases = Vec::new();
    for line in text.lines() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        let image = data_dir.join(format!("{id}_thin.nii.gz"));
        let labels = data_dir.join(format!("{id}_seg.nii.gz"));
        let (volume, seg) = read_nifti_pair(&image, &labels)?;
        cases.push(Case {
            id: id.to_string(),
            volume,
            seg,
        });
    }
    if cases.is_empty() {
        return Err(Error::Invalid(format!(
            "manifest {} lists no cases",
            manifest.display()
        )));
    }
    Ok(cases)
}

/// Generate `count` phantom cases under `out_dir` and write `manifest.txt`.
///
/// With `--spec`, case 0 reproduces the given spec exactly and the remaining
/// cases are fresh random draws; without it every case is a random draw.
pub fn cmd_phantom(
    out_dir: &Path,
    count: usize,
    seed: u64,
    noise_sigma: f32,
    spec_path: Option<&Path>,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Invalid("case count must be at least 1".into()));
    }
    let base = match spec_path {
        Some(p) => Some(PhantomSpec::load(p)?),
        None => None,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let spec = match (&base, i) {
            (Some(s), 0) => s.clone(),
            _ => phantom::sample_spec(seed.wrapping_add(i as u64), noise_sigma),
        };
        let (volume, seg) = phantom::generate(&spec)?;
        let id = format!("case{i:03}");
        write_nifti(&volume, &out_dir.join(format!("{id}_thin.nii.gz")))?;
        write_seg_nifti(&seg, &out_dir.join(format!("{id}_seg.nii.gz")))?;
        spec.save(&out_dir.join(format!("{id}.spec")))?;
        println!("wrote {id} ({} lesions)", spec.lesions.len());
        ids.push(id);
    }
    let manifest = out_dir.join("manifest.txt");
    fs::write(&manifest, ids.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Window-normalize a case for training or flow inference.
fn normalize(volume: &Volume) -> Result<Volume> {
    match volume.unit() {
        IntensityUnit::Hounsfield => {
            window_normalize(volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)
        }
        IntensityUnit::Normalized => Ok(volume.clone()),
    }
}

/// Split cases into (train, validation) sets; the last `holdout` cases are
/// withheld. Always leaves at least one training case.
fn split_cases(cases: &[Case], holdout: usize) -> (&[Case], &[Case]) {
    let holdout = holdout.min(cases.len().saturating_sub(1));
    let cut = cases.len() - holdout;
    (&cases[..cut], &cases[cut..])
}

fn gather_triplets(cases: &[Case], with_labels: bool, stride: usize) -> Result<Vec<SliceTriplet>> {
    let mut out = Vec::new();
    for case in cases {
        let norm = normalize(&case.volume)?;
        let seg = if with_labels { Some(&case.seg) } else { None };
        out.extend(extract_triplets(&norm, seg, stride)?);
    }
    Ok(out)
}

/// Train the interpolator on thin-slice triplets and write `g_pre.ifck`.
pub fn cmd_pretrain(
    data_dir: &Path,
    out_dir: &Path,
    config_path: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cases = load_cases(data_dir)?;
    let mut cfg = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    let (train_cases, val_cases) = split_cases(&cases, 1.max(cases.len() / 4).min(2));
    let train = gather_triplets(train_cases, false, 1)?;
    let val = gather_triplets(val_cases, false, 1)?;
    let flow_cfg = FlowNetConfig::small();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    println!(
        "pretraining on {} triplets ({} cases), validating on {}",
        train.len(),
        train_cases.len(),
        val.len()
    );
    let (_params, log) = training::pretrain(&train, &val, &flow_cfg, &cfg, Some(out_dir))?;
    if let Some(last) = log.last() {
        println!(
            "epoch {}: train loss {:.5}, val PSNR {:.2} dB",
            last.epoch, last.train_loss, last.val_psnr
        );
    }
    println!("checkpoint: {}", out_dir.join("g_pre.ifck").display());
    Ok(())
}

/// Load a flow checkpoint together with its architecture sidecar.
pub fn load_flow_model(checkpoint: &Path) -> Result<(ParamStore, FlowNetConfig)> {
    let params = ParamStore::load(checkpoint)?;
    let sidecar = sidecar_path(checkpoint);
    let cfg = FlowNetConfig::read_sidecar(&sidecar)?;
    Ok((params, cfg))
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Defaults for the attention/downstream segmenter trained inside
/// `finetune` and `bench` when no checkpoint is supplied. Lesions occupy
/// about one percent of the voxels, so the segmenter needs a fair number
/// of epochs before it starts predicting them at all.
pub const DEFAULT_SEG_EPOCHS: usize = 12;
const SEG_LR: f32 = 2e-3;
const MIN_LESION_VOX: usize = 4;

fn train_attention_segmenter(
    cases: &[Case],
    out_dir: &Path,
    seed: u64,
    epochs: usize,
) -> Result<(ParamStore, UNetConfig)> {
    let cfg = UNetConfig::default();
    let mut dataset = Vec::new();
    for case in cases {
        let norm = normalize(&case.volume)?;
        let (nz, _, _) = norm.shape();
        for z in 0..nz {
            dataset.push((norm.slice(z), case.seg.slice(z)));
        }
    }
    println!(
        "training segmenter on {} labeled slices for {epochs} epochs",
        dataset.len()
    );
    let (params, losses) = segmenter::train_segmenter(&dataset, &cfg, epochs, SEG_LR, seed)?;
    if let Some(last) = losses.last() {
        println!("segmenter final epoch loss {last:.5}");
    }
    let path = out_dir.join("attention_seg.ifck");
    params.save(&path)?;
    cfg.write_sidecar(&sidecar_path(&path))?;
    Ok((params, cfg))
}

fn load_segmenter(checkpoint: &Path) -> Result<(ParamStore, UNetConfig)> {
    let params = ParamStore::load(checkpoint)?;
    let cfg = UNetConfig::read_sidecar(&sidecar_path(checkpoint))?;
    Ok((params, cfg))
}

/// Fine-tune a pretrained interpolator on thickness-degraded volumes and
/// write `g.ifck`. The segmentation-attention term uses the supplied
/// segmenter checkpoint, or trains a small one on the spot when none is
/// given; with `lambda_seg = 0` no segmenter is involved at all.
pub fn cmd_finetune(
    data_dir: &Path,
    pretrained: &Path,
    out_dir: &Path,
    factor: usize,
    config_path: Option<&Path>,
    segmenter_path: Option<&Path>,
    seg_epochs: usize,
    seed_override: Option<u64>,
) -> Result<()> {
    let cases = load_cases(data_dir)?;
    let mut cfg = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.weights.validate()?;
    let (params, flow_cfg) = load_flow_model(pretrained)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (train_cases, val_cases) = split_cases(&cases, 1.max(cases.len() / 4).min(2));
    let mut train = Vec::new();
    for case in train_cases {
        let (thick_vol, thick_seg) = degrade_case(case, factor)?;
        let norm = normalize(&thick_vol)?;
        train.extend(extract_triplets(&norm, Some(&thick_seg), 1)?);
    }
    let mut val = Vec::new();
    for case in val_cases {
        let (thick_vol, thick_seg) = degrade_case(case, factor)?;
        let norm = normalize(&thick_vol)?;
        val.extend(extract_triplets(&norm, Some(&thick_seg), 1)?);
    }

    let seg_model = if cfg.weights.seg > 0.0 {
        Some(match segmenter_path {
            Some(p) => load_segmenter(p)?,
            None => train_attention_segmenter(train_cases, out_dir, cfg.seed, seg_epochs)?,
        })
    } else {
        None
    };
    let seg_ref = seg_model.as_ref().map(|(p, c)| (p, c));

    println!(
        "fine-tuning on {} thick triplets (factor {factor}), validating on {}",
        train.len(),
        val.len()
    );
    let (_tuned, log) = training::finetune(
        &train,
        &val,
        &flow_cfg,
        &params,
        seg_ref,
        &cfg,
        Some(out_dir),
    )?;
    if let Some(last) = log.last() {
        println!(
            "step {}: cycle {:.5}, ps {:.5}, total {:.5}",
            last.step, last.l_cycle, last.l_ps, last.total
        );
    }
    println!("checkpoint: {}", out_dir.join("g.ifck").display());
    Ok(())
}

fn degrade_case(case: &Case, factor: usize) -> Result<(Volume, SegVolume)> {
    let vol = phantom::degrade_thickness(&case.volume, factor)?;
    let seg = phantom::degrade_seg_thickness(&case.seg, factor)?;
    Ok((vol, seg))
}

/// Insert `factor - 1` interpolated slices between every adjacent pair.
///
/// Original slices are copied through bit-exactly; the output gets
/// `factor * (Z - 1) + 1` slices and `spacing_z / factor`. The flow method
/// runs in window-normalized intensities and maps its synthesized slices
/// back to the input unit; `model` is required for it and ignored otherwise.
pub fn upsample_volume(
    volume: &Volume,
    factor: usize,
    method: Method,
    model: Option<(&ParamStore, &FlowNetConfig)>,
) -> Result<Volume> {
    if factor < 2 {
        return Err(Error::Invalid(format!(
            "upsampling factor must be >= 2, got {factor}"
        )));
    }
    let (nz, _, _) = volume.shape();
    if nz < 2 {
        return Err(Error::Invalid("need at least 2 slices to upsample".into()));
    }
    let model = match method {
        Method::Flow => Some(model.ok_or_else(|| {
            Error::Invalid("method flow requires a trained checkpoint".into())
        })?),
        _ => None,
    };
    // The network sees [0, 1] intensities; synthesized slices are mapped
    // back through the inverse window so the output keeps the input's unit.
    let norm = if method == Method::Flow {
        Some(normalize(volume)?)
    } else {
        None
    };
    let (lo, hi) = DEFAULT_WINDOW;
    let denorm = |t: &Tensor| -> Tensor {
        if volume.unit() == IntensityUnit::Hounsfield {
            let data = t.data().iter().map(|&v| lo + v * (hi - lo)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        } else {
            t.clone()
        }
    };

    let mut slices = Vec::with_capacity(factor * (nz - 1) + 1);
    for z in 0..nz - 1 {
        slices.push(volume.slice(z));
        for j in 1..factor {
            let n = j as f32 / factor as f32;
            let s = match method {
                Method::Nearest => nn_interpolate(&volume.slice(z), &volume.slice(z + 1), n)?,
                Method::Linear => linear_interpolate(&volume.slice(z), &volume.slice(z + 1), n)?,
                Method::Flow => {
                    let nv = norm.as_ref().unwrap();
                    let (params, cfg) = model.unwrap();
                    let (out, _) =
                        flownet::interpolate(params, cfg, &nv.slice(z), &nv.slice(z + 1), n)?;
                    denorm(&out)
                }
            };
            slices.push(s);
        }
    }
    slices.push(volume.slice(nz - 1));
    let (dz, dy, dx) = volume.spacing();
    Volume::from_slices(&slices, (dz / factor as f32, dy, dx), volume.unit())
}

/// Upsample a NIfTI volume along z and write the result.
pub fn cmd_upsample(
    input: &Path,
    output: &Path,
    factor: usize,
    method: Method,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let volume = read_nifti(input)?;
    let model = match (method, checkpoint) {
        (Method::Flow, Some(p)) => Some(load_flow_model(p)?),
        (Method::Flow, None) => {
            return Err(Error::Invalid(
                "method flow requires --model CHECKPOINT".into(),
            ))
        }
        _ => None,
    };
    let model_ref = model.as_ref().map(|(p, c)| (p, c));
    let out = upsample_volume(&volume, factor, method, model_ref)?;
    write_nifti(&out, output)?;
    let (z_in, _, _) = volume.shape();
    let (z_out, _, _) = out.shape();
    println!("{z_in} -> {z_out} slices, method {method}, written to {}", output.display());
    Ok(())
}

fn check_same_shape(
    a: (usize, usize, usize),
    b: (usize, usize, usize),
) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch {
            axis: "z (volume shapes differ)",
            expected: a.0,
            got: b.0,
        });
    }
    Ok(())
}

/// Per-slice image metrics of `pred` against `reference`, optionally
/// restricted to label-derived ROIs, written as CSV.
pub fn cmd_eval(
    pred_path: &Path,
    reference_path: &Path,
    seg_path: Option<&Path>,
    labels_mode: bool,
    out_csv: &Path,
) -> Result<()> {
    let report = if labels_mode {
        eval_labels(pred_path, reference_path)?
    } else {
        eval_images(pred_path, reference_path, seg_path)?
    };
    report.write_csv(out_csv)?;
    for (roi, metric, value) in report.aggregates() {
        println!("{roi} {metric}: {value:.4}");
    }
    Ok(())
}

fn eval_images(
    pred_path: &Path,
    reference_path: &Path,
    seg_path: Option<&Path>,
) -> Result<MetricReport> {
    let pred = normalize(&read_nifti(pred_path)?)?;
    let reference = normalize(&read_nifti(reference_path)?)?;
    check_same_shape(pred.shape(), reference.shape())?;
    let seg = match seg_path {
        Some(p) => {
            let (_, s) = read_nifti_pair(reference_path, p)?;
            check_same_shape(pred.shape(), s.shape())?;
            Some(s)
        }
        None => None,
    };
    let (nz, _, _) = pred.shape();
    let mut report = MetricReport::new();
    for z in 0..nz {
        let item = format!("z{z:03}");
        let p = pred.slice(z);
        let r = reference.slice(z);
        report.push(&item, "whole", "psnr", psnr(&p, &r, None, 1.0)?);
        report.push(&item, "whole", "ssim", ssim(&p, &r, None, 1.0)?);
        if let Some(seg) = &seg {
            let labels = seg.slice(z);
            for (roi, mask) in [
                ("liver", liver_mask(&labels.labels)),
                ("lesion", labels.class_mask(2)),
            ] {
                if !mask.iter().any(|&m| m) {
                    continue;
                }
                report.push(&item, roi, "psnr", psnr(&p, &r, Some(&mask), 1.0)?);
                if let Ok(v) = ssim(&p, &r, Some(&mask), 1.0) {
                    report.push(&item, roi, "ssim", v);
                }
            }
        }
    }
    Ok(report)
}

fn liver_mask(labels: &[u8]) -> Vec<bool> {
    labels.iter().map(|&l| l >= 1).collect()
}

fn eval_labels(pred_path: &Path, reference_path: &Path) -> Result<MetricReport> {
    let (pred, reference) = read_seg_pair(pred_path, reference_path)?;
    check_same_shape(pred.shape(), reference.shape())?;
    let mut report = MetricReport::new();
    push_seg_metrics(&mut report, "volume", &pred, &reference)?;
    Ok(report)
}

fn read_seg_pair(pred: &Path, reference: &Path) -> Result<(SegVolume, SegVolume)> {
    // reuse the image+labels reader twice; the image half is discarded
    let (_, p) = read_nifti_pair(pred, pred)?;
    let (_, r) = read_nifti_pair(reference, reference)?;
    Ok((p, r))
}

fn push_seg_metrics(
    report: &mut MetricReport,
    item: &str,
    pred: &SegVolume,
    gt: &SegVolume,
) -> Result<()> {
    for (roi, class) in [("liver", 1u8), ("lesion", 2u8)] {
        let pm: Vec<bool> = match roi {
            "liver" => pred.labels().iter().map(|&l| l >= 1).collect(),
            _ => pred.class_mask(class),
        };
        let gm: Vec<bool> = match roi {
            "liver" => gt.labels().iter().map(|&l| l >= 1).collect(),
            _ => gt.class_mask(class),
        };
        let o = seg_overlap(&pm, &gm)?;
        report.push(item, roi, "dice", o.dice);
        report.push(item, roi, "recall", o.recall);
        report.push(item, roi, "precision", o.precision);
        if let Ok(d) = asd(&pm, &gm, gt.shape(), gt.spacing()) {
            report.push(item, roi, "asd_mm", d);
        }
    }
    Ok(())
}

/// Everything `cmd_bench` needs beyond the dataset directory.
#[derive(Debug, Clone)]
pub struct BenchOpts {
    pub factors: Vec<usize>,
    pub ladder: Vec<usize>,
    pub holdout: usize,
    pub config: Option<PathBuf>,
    pub seg_epochs: usize,
    pub seed: u64,
}

impl Default for BenchOpts {
    fn default() -> Self {
        BenchOpts {
            factors: vec![2, 3],
            ladder: vec![1, 2, 3, 4, 6],
            holdout: 2,
            config: None,
            seg_epochs: DEFAULT_SEG_EPOCHS,
            seed: 0,
        }
    }
}

/// Outcome of a benchmark run, kept in memory for tests; the same content
/// is written to `report.csv`, `thickness_curve.csv`, and `skipped.txt`.
pub struct BenchResult {
    pub report: MetricReport,
    /// (factor, method, mean whole-volume PSNR, mean lesion Dice)
    pub thickness_curve: Vec<(usize, String, f32, f32)>,
    pub skipped: Vec<String>,
}

/// Run the full comparison matrix on a phantom dataset.
///
/// Trains a pretrained interpolator, two fine-tuned variants per factor
/// (with and without the segmentation-attention term) and a downstream
/// segmenter on the training split, then scores every method on the
/// held-out cases: PSNR/SSIM per ROI on synthesized slices, downstream
/// segmentation overlap, and a thickness-ladder degradation curve. Arms
/// that cannot run (too few cases to train on) are listed in `skipped.txt`
/// and the rest of the matrix still completes.
pub fn cmd_bench(data_dir: &Path, out_dir: &Path, opts: &BenchOpts) -> Result<BenchResult> {
    let cases = load_cases(data_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = opts.seed;
    let (train_cases, eval_cases) = split_cases(&cases, opts.holdout.max(1));
    let mut skipped = Vec::new();

    // --- training split: shared pretrained model + per-factor fine-tunes ---
    let trained = if !train_cases.is_empty() && cases.len() >= 2 {
        Some(train_bench_models(
            train_cases,
            out_dir,
            &cfg,
            &opts.factors,
            opts.seg_epochs,
        )?)
    } else {
        skipped.push(format!(
            "flow arms: need at least 2 cases to train and hold out, have {}",
            cases.len()
        ));
        None
    };

    // --- evaluation matrix ---
    let mut report = MetricReport::new();
    for case in eval_cases {
        for &k in &opts.factors {
            let arms = bench_arms(&trained, k, &mut skipped);
            for (label, method, model) in &arms {
                score_arm(
                    &mut report,
                    case,
                    k,
                    label,
                    *method,
                    model.as_ref().map(|(p, c)| (p, c)),
                    trained.as_ref().map(|t| (&t.seg_params, &t.seg_cfg)),
                )?;
            }
        }
    }

    // --- thickness ladder (Fig-style degradation curve) ---
    let mut curve = Vec::new();
    for &k in &opts.ladder {
        let mut ladder_arms: Vec<(String, Method, Option<(ParamStore, FlowNetConfig)>)> = vec![
            ("nn".into(), Method::Nearest, None),
            ("linear".into(), Method::Linear, None),
        ];
        if let Some(t) = &trained {
            // the n-conditioned network generalizes across factors, so the
            // ladder reuses the first fine-tuned model at every thickness
            if let Some((_, params)) = t.finetuned.iter().find(|(seg, _)| *seg) {
                ladder_arms.push(("flow".into(), Method::Flow, Some((params.clone(), t.flow_cfg.clone()))));
            }
        }
        for (label, method, model) in &ladder_arms {
            let mut psnr_sum = 0.0f64;
            let mut dice_sum = 0.0f64;
            let mut n = 0usize;
            for case in eval_cases {
                let (p, d) = ladder_point(
                    case,
                    k,
                    *method,
                    model.as_ref().map(|(p, c)| (p, c)),
                    trained.as_ref().map(|t| (&t.seg_params, &t.seg_cfg)),
                )?;
                psnr_sum += p as f64;
                dice_sum += d as f64;
                n += 1;
            }
            if n > 0 {
                curve.push((
                    k,
                    label.clone(),
                    (psnr_sum / n as f64) as f32,
                    (dice_sum / n as f64) as f32,
                ));
            }
        }
    }

    report.write_csv(&out_dir.join("report.csv"))?;
    write_thickness_curve(&out_dir.join("thickness_curve.csv"), &curve)?;
    let skipped_path = out_dir.join("skipped.txt");
    fs::write(&skipped_path, skipped.join("\n") + "\n").map_err(|e| Error::io(&skipped_path, e))?;
    for s in &skipped {
        eprintln!("warning: skipped {s}");
    }
    println!(
        "benchmark: {} metric rows, {} ladder points, {} skipped arms",
        report.aggregates().len(),
        curve.len(),
        skipped.len()
    );
    Ok(BenchResult {
        report,
        thickness_curve: curve,
        skipped,
    })
}

struct TrainedModels {
    flow_cfg: FlowNetConfig,
    /// (uses segmentation attention, fine-tuned parameters), one per factor
    /// in order: with attention, then the ablation without it.
    finetuned: Vec<(bool, ParamStore)>,
    finetuned_factors: Vec<usize>,
    seg_params: ParamStore,
    seg_cfg: UNetConfig,
}

fn train_bench_models(
    train_cases: &[Case],
    out_dir: &Path,
    cfg: &TrainConfig,
    factors: &[usize],
    seg_epochs: usize,
) -> Result<TrainedModels> {
    let flow_cfg = FlowNetConfig::small();
    let thin = gather_triplets(train_cases, false, 1)?;
    println!("bench: pretraining on {} thin triplets", thin.len());
    // training logs want a validation PSNR; a few training triplets are
    // enough for that, the real held-out scoring happens in the matrix
    let val = &thin[..thin.len().min(8)];
    let (pre, _) = training::pretrain(&thin, val, &flow_cfg, cfg, Some(out_dir))?;

    let (seg_params, seg_cfg) =
        train_attention_segmenter(train_cases, out_dir, cfg.seed, seg_epochs)?;

    let mut finetuned = Vec::new();
    let mut finetuned_factors = Vec::new();
    for &k in factors {
        let mut thick = Vec::new();
        for case in train_cases {
            let (tv, ts) = degrade_case(case, k)?;
            thick.extend(extract_triplets(&normalize(&tv)?, Some(&ts), 1)?);
        }
        for with_seg in [true, false] {
            let mut arm_cfg = cfg.clone();
            if !with_seg {
                arm_cfg.weights.seg = 0.0;
            }
            let seg_ref = with_seg.then_some((&seg_params, &seg_cfg));
            let arm_dir = out_dir.join(format!(
                "finetune_k{k}_{}",
                if with_seg { "seg" } else { "noseg" }
            ));
            fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
            println!(
                "bench: fine-tuning factor {k} ({}) on {} triplets",
                if with_seg { "with attention" } else { "ablation" },
                thick.len()
            );
            let (tuned, _) = training::finetune(
                &thick,
                &thick[..thick.len().min(8)],
                &flow_cfg,
                &pre,
                seg_ref,
                &arm_cfg,
                Some(&arm_dir),
            )?;
            finetuned.push((with_seg, tuned));
            finetuned_factors.push(k);
        }
    }
    Ok(TrainedModels {
        flow_cfg,
        finetuned,
        finetuned_factors,
        seg_params,
        seg_cfg,
    })
}

type Arm = (String, Method, Option<(ParamStore, FlowNetConfig)>);

fn bench_arms(trained: &Option<TrainedModels>, k: usize, skipped: &mut Vec<String>) -> Vec<Arm> {
    let mut arms: Vec<Arm> = vec![
        ("nn".into(), Method::Nearest, None),
        ("linear".into(), Method::Linear, None),
    ];
    match trained {
        Some(t) => {
            for (label, want_seg) in [("flow_seg", true), ("flow_noseg", false)] {
                let model = t
                    .finetuned
                    .iter()
                    .zip(&t.finetuned_factors)
                    .find(|((seg, _), &f)| *seg == want_seg && f == k)
                    .map(|((_, p), _)| (p.clone(), t.flow_cfg.clone()));
                match model {
                    Some(m) => arms.push((label.into(), Method::Flow, Some(m))),
                    None => skipped.push(format!("{label} at factor {k}: no trained model")),
                }
            }
        }
        None => {}
    }
    arms
}

/// Score one (case, factor, method) cell: image metrics per ROI on the
/// synthesized slices, plus downstream segmentation of the restored volume.
fn score_arm(
    report: &mut MetricReport,
    case: &Case,
    k: usize,
    label: &str,
    method: Method,
    model: Option<(&ParamStore, &FlowNetConfig)>,
    seg_model: Option<(&ParamStore, &UNetConfig)>,
) -> Result<()> {
    let reference = normalize(&case.volume)?;
    let (thick, _) = degrade_case(case, k)?;
    let restored = normalize(&upsample_volume(&thick, k, method, model)?)?;
    check_same_shape(restored.shape(), reference.shape())?;

    let (nz, _, _) = reference.shape();
    let item = &case.id;
    let tag = |metric: &str| format!("{label}_k{k}_{metric}");
    let mut agg: Vec<(String, String, Vec<f32>)> = Vec::new();
    let mut push = |roi: &str, metric: &str, v: f32| {
        match agg.iter_mut().find(|(r, m, _)| r == roi && m == metric) {
            Some((_, _, vs)) => vs.push(v),
            None => agg.push((roi.into(), metric.into(), vec![v])),
        }
    };
    for z in 0..nz {
        if z % k == 0 {
            continue; // original slices are copied through; score only synthesized ones
        }
        let p = restored.slice(z);
        let r = reference.slice(z);
        push("whole", "psnr", psnr(&p, &r, None, 1.0)?);
        push("whole", "ssim", ssim(&p, &r, None, 1.0)?);
        let labels = case.seg.slice(z);
        for (roi, mask) in [
            ("liver", liver_mask(&labels.labels)),
            ("lesion", labels.class_mask(2)),
        ] {
            if !mask.iter().any(|&m| m) {
                continue;
            }
            push(roi, "psnr", psnr(&p, &r, Some(&mask), 1.0)?);
            if let Ok(v) = ssim(&p, &r, Some(&mask), 1.0) {
                push(roi, "ssim", v);
            }
        }
    }
    for (roi, metric, vs) in agg {
        let mean = vs.iter().sum::<f32>() / vs.len() as f32;
        report.push(item, &roi, &tag(&metric), mean);
    }

    if let Some((sp, sc)) = seg_model {
        let pred_seg = segmenter::segment_volume(sp, sc, &restored, MIN_LESION_VOX)?;
        let mut seg_report = MetricReport::new();
        push_seg_metrics(&mut seg_report, item, &pred_seg, &case.seg)?;
        for row in &seg_report.rows {
            report.push(item, &row.roi, &tag(&format!("seg_{}", row.metric)), row.value);
        }
    }
    Ok(())
}

/// One point of the degradation curve: mean whole-volume PSNR over
/// synthesized slices and downstream lesion Dice at thickness factor `k`.
fn ladder_point(
    case: &Case,
    k: usize,
    method: Method,
    model: Option<(&ParamStore, &FlowNetConfig)>,
    seg_model: Option<(&ParamStore, &UNetConfig)>,
) -> Result<(f32, f32)> {
    let reference = normalize(&case.volume)?;
    // factor 1 is the undegraded baseline: nothing to restore
    let restored = if k == 1 {
        reference.clone()
    } else {
        let (thick, _) = degrade_case(case, k)?;
        normalize(&upsample_volume(&thick, k, method, model)?)?
    };
    let (nz, _, _) = reference.shape();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for z in 0..nz {
        if z % k == 0 {
            continue;
        }
        sum += psnr(&restored.slice(z), &reference.slice(z), None, 1.0)? as f64;
        n += 1;
    }
    // k = 1 synthesizes nothing; report the identical-image cap
    let mean_psnr = if n == 0 { 99.0 } else { (sum / n as f64) as f32 };
    let dice = match seg_model {
        Some((sp, sc)) => {
            let pred_seg = segmenter::segment_volume(sp, sc, &restored, MIN_LESION_VOX)?;
            seg_overlap(&pred_seg.class_mask(2), &case.seg.class_mask(2))?.dice
        }
        None => f32::NAN,
    };
    Ok((mean_psnr, dice))
}

fn write_thickness_curve(path: &Path, curve: &[(usize, String, f32, f32)]) -> Result<()> {
    let mut text = String::from("factor,method,psnr,dice_lesion\n");
    for (k, method, psnr, dice) in curve {
        text.push_str(&format!("{k},{method},{psnr:.6},{dice:.6}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

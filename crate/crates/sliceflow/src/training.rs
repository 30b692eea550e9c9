//! Training loops for the interpolator: thin-slice pretraining with the
//! reconstruction + smoothness objective, and thick-slice fine-tuning with
//! the cycle / pseudo-supervision / segmentation-attention objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flownet::{self, FlowNetConfig, FlowVars};
use crate::metrics::psnr;
use crate::numerics::{adam_step, AdamConfig, AdamState, BoundParams, ParamStore, Tape, Var};
use crate::segmenter::{self, UNetConfig};
use crate::volume::SliceTriplet;

/// Weights of the three fine-tuning loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cycle: f32,
    pub seg: f32,
    pub ps: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cycle: 1.0,
            seg: 0.5,
            ps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.cycle < 0.0 || self.seg < 0.0 || self.ps < 0.0 {
            return Err(Error::Invalid(format!("negative loss weight: {self:?}")));
        }
        if self.cycle == 0.0 && self.seg == 0.0 && self.ps == 0.0 {
            return Err(Error::Invalid("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Optimization settings shared by both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub weights: LossWeights,
    pub tv_motion: f32,
    pub tv_mask: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            // The TV terms are summed over the image, so even small weights
            // can outweigh the per-pixel reconstruction gain of a localized
            // flow and collapse training into plain blending; they default
            // off and are exposed for experiments.
            tv_motion: 0.0,
            tv_mask: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda_cycle = {}", self.weights.cycle);
        let _ = writeln!(s, "lambda_seg = {}", self.weights.seg);
        let _ = writeln!(s, "lambda_ps = {}", self.weights.ps);
        let _ = writeln!(s, "tv_motion = {}", self.tv_motion);
        let _ = writeln!(s, "tv_mask = {}", self.tv_mask);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Invalid(format!("bad training config line: {line}"));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let value = value.trim();
            match key.trim() {
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "lambda_cycle" => cfg.weights.cycle = value.parse().map_err(|_| bad())?,
                "lambda_seg" => cfg.weights.seg = value.parse().map_err(|_| bad())?,
                "lambda_ps" => cfg.weights.ps = value.parse().map_err(|_| bad())?,
                "tv_motion" => cfg.tv_motion = value.parse().map_err(|_| bad())?,
                "tv_mask" => cfg.tv_mask = value.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        cfg.weights.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

// ----- loss terms --------------------------------------------------------

/// Reconstruction + smoothness objective used for pretraining:
/// mean L1 to the dropped middle slice plus total-variation penalties on
/// the displacement components and the blend mask.
pub fn dvf_loss_t(
    tape: &mut Tape,
    out: Var,
    flow: FlowVars,
    target: Var,
    tv_motion: f32,
    tv_mask: f32,
) -> Result<Var> {
    let l1 = tape.l1_loss(out, target)?;
    let tx = tape.tv_regularizer(flow.dx)?;
    let ty = tape.tv_regularizer(flow.dy)?;
    let tm = tape.tv_regularizer(flow.mask)?;
    let txy = tape.add(tx, ty)?;
    let motion = tape.scale(txy, tv_motion);
    let mask = tape.scale(tm, tv_mask);
    let smooth = tape.add(motion, mask)?;
    tape.add(l1, smooth)
}

/// Intermediate synthesized slices of the cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutputs {
    /// G(s0, s1, 0.5): halfway between the first two inputs.
    pub s_half: Var,
    /// G(s1, s2, 0.5): halfway between the last two inputs.
    pub s_three_half: Var,
    /// G(s_half, s_three_half, 0.5): should reproduce s1.
    pub s1_hat: Var,
    /// s1 as a tape constant (reused as the cycle target).
    pub s1: Var,
}

/// Cycle consistency: interpolating between the two synthesized half-offset
/// slices must land back on the real middle slice. The gradient flows
/// through all three applications of the interpolator.
pub fn cycle_loss_t(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FlowNetConfig,
    triplet: &SliceTriplet,
) -> Result<(Var, CycleOutputs)> {
    let s0 = tape.constant(triplet.s0.clone());
    let s1 = tape.constant(triplet.s1.clone());
    let s2 = tape.constant(triplet.s2.clone());
    let (s_half, _) = flownet::interpolate_t(tape, params, cfg, s0, s1, 0.5)?;
    let (s_three_half, _) = flownet::interpolate_t(tape, params, cfg, s1, s2, 0.5)?;
    let (s1_hat, _) = flownet::interpolate_t(tape, params, cfg, s_half, s_three_half, 0.5)?;
    let loss = tape.l1_loss(s1_hat, s1)?;
    Ok((
        loss,
        CycleOutputs {
            s_half,
            s_three_half,
            s1_hat,
            s1,
        },
    ))
}

/// Pseudo supervision: keep the fine-tuned network's half-offset outputs
/// close to what the frozen pretrained teacher produces on the same pairs.
/// Teacher outputs are computed off-tape and enter as constants.
pub fn pseudo_supervised_loss_t(
    tape: &mut Tape,
    outputs: &CycleOutputs,
    teacher: &ParamStore,
    cfg: &FlowNetConfig,
    triplet: &SliceTriplet,
) -> Result<Var> {
    let (t_half, _) = flownet::interpolate(teacher, cfg, &triplet.s0, &triplet.s1, 0.5)?;
    let (t_three_half, _) = flownet::interpolate(teacher, cfg, &triplet.s1, &triplet.s2, 0.5)?;
    let c_half = tape.constant(t_half);
    let c_three_half = tape.constant(t_three_half);
    let l_a = tape.l1_loss(outputs.s_half, c_half)?;
    let l_b = tape.l1_loss(outputs.s_three_half, c_three_half)?;
    let sum = tape.add(l_a, l_b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Segmentation attention: run the frozen segmenter on the cycle's
/// reconstruction of s1 and score it against the ground-truth labels with
/// soft Dice. The gradient passes through the segmenter into the
/// reconstruction; the segmenter's own parameters are left untouched by the
/// caller. Returns [`Error::MissingLabels`] when the triplet carries none.
pub fn segmentation_loss_t(
    tape: &mut Tape,
    outputs: &CycleOutputs,
    seg_params: &BoundParams,
    seg_cfg: &UNetConfig,
    triplet: &SliceTriplet,
) -> Result<Var> {
    let labels = triplet.labels1.as_ref().ok_or(Error::MissingLabels)?;
    let logits = segmenter::logits_t(tape, seg_params, seg_cfg, outputs.s1_hat)?;
    let probs = tape.softmax(logits)?;
    tape.soft_dice_loss(probs, &labels.onehot(seg_cfg.output_channels))
}

/// The weighted fine-tuning objective and its pieces (values read off the
/// tape after construction).
pub struct CombinedLoss {
    pub total: Var,
    pub cycle: f32,
    pub ps: f32,
    pub seg: Option<f32>,
}

/// Assemble lambda_cycle * L_cycle + lambda_PS * L_PS + lambda_Seg * L_Seg
/// on one tape. The segmentation term is skipped when its weight is zero,
/// no segmenter is supplied, or the triplet has no labels.
pub fn combined_loss_t(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FlowNetConfig,
    teacher: &ParamStore,
    seg: Option<(&BoundParams, &UNetConfig)>,
    weights: &LossWeights,
    triplet: &SliceTriplet,
) -> Result<CombinedLoss> {
    let (l_cycle, outputs) = cycle_loss_t(tape, params, cfg, triplet)?;
    let l_ps = pseudo_supervised_loss_t(tape, &outputs, teacher, cfg, triplet)?;
    let mut total = tape.scale(l_cycle, weights.cycle);
    let ps_term = tape.scale(l_ps, weights.ps);
    total = tape.add(total, ps_term)?;
    let mut seg_value = None;
    if weights.seg > 0.0 {
        if let Some((seg_params, seg_cfg)) = seg {
            match segmentation_loss_t(tape, &outputs, seg_params, seg_cfg, triplet) {
                Ok(l_seg) => {
                    let seg_term = tape.scale(l_seg, weights.seg);
                    total = tape.add(total, seg_term)?;
                    seg_value = Some(tape.value(l_seg).item());
                }
                Err(Error::MissingLabels) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CombinedLoss {
        total,
        cycle: tape.value(l_cycle).item(),
        ps: tape.value(l_ps).item(),
        seg: seg_value,
    })
}

// ----- pretraining -------------------------------------------------------

/// One pretraining epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_psnr: f32,
}

/// Mean drop-middle PSNR of the current parameters over validation
/// triplets.
pub fn validation_psnr(
    params: &ParamStore,
    cfg: &FlowNetConfig,
    val: &[SliceTriplet],
) -> Result<f32> {
    if val.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let mut total = 0.0f64;
    for t in val {
        let (pred, _) = flownet::interpolate(params, cfg, &t.s0, &t.s2, 0.5)?;
        total += psnr(&pred, &t.s1, None, 1.0)? as f64;
    }
    Ok((total / val.len() as f64) as f32)
}

/// Liver-masked counterpart (labels >= 1 on the middle slice); None when no
/// validation triplet has labels.
pub fn validation_psnr_liver(
    params: &ParamStore,
    cfg: &FlowNetConfig,
    val: &[SliceTriplet],
) -> Result<Option<f32>> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in val {
        let Some(labels) = &t.labels1 else { continue };
        let mask: Vec<bool> = labels.labels.iter().map(|&l| l >= 1).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let (pred, _) = flownet::interpolate(params, cfg, &t.s0, &t.s2, 0.5)?;
        total += psnr(&pred, &t.s1, Some(&mask), 1.0)? as f64;
        count += 1;
    }
    Ok(if count == 0 {
        None
    } else {
        Some((total / count as f64) as f32)
    })
}

/// Pretrain on thin-slice triplets: drop the middle slice, synthesize it
/// from its neighbours at n = 0.5, and minimize the reconstruction +
/// smoothness objective. When `out_dir` is given, writes `pretrain_log.csv`
/// and keeps `g_pre.ifck` (plus its config sidecar) current after every
/// epoch.
pub fn pretrain(
    train: &[SliceTriplet],
    val: &[SliceTriplet],
    flow_cfg: &FlowNetConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, Vec<PretrainEpoch>)> {
    if train.is_empty() {
        return Err(Error::Invalid("empty pretraining set".into()));
    }
    let mut params = flownet::init_params(flow_cfg, cfg.seed);
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6500);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for &i in &order {
            let t = &train[i];
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape);
            let s0 = tape.constant(t.s0.clone());
            let s1 = tape.constant(t.s1.clone());
            let s2 = tape.constant(t.s2.clone());
            let (out, flow) = flownet::interpolate_t(&mut tape, &bound, flow_cfg, s0, s2, 0.5)?;
            let loss = dvf_loss_t(&mut tape, out, flow, s1, cfg.tv_motion, cfg.tv_mask)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(step));
            }
            let grads = tape.backward(loss)?;
            let leaves = bound.vars().to_vec();
            drop(bound);
            params.zero_grads();
            params.accumulate_grads(&tape, &leaves, &grads, 1.0);
            adam_step(&mut params, &mut state, &adam)?;
            total += loss_value as f64;
            step += 1;
        }
        let val_psnr = validation_psnr(&params, flow_cfg, val)?;
        log.push(PretrainEpoch {
            epoch,
            train_loss: (total / order.len() as f64) as f32,
            val_psnr,
        });
        if let Some(dir) = out_dir {
            write_pretrain_log(&log, &dir.join("pretrain_log.csv"))?;
            params.save(&dir.join("g_pre.ifck"))?;
            flow_cfg.write_sidecar(&dir.join("g_pre.ifck.cfg"))?;
        }
    }
    Ok((params, log))
}

fn write_pretrain_log(log: &[PretrainEpoch], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_psnr\n");
    for e in log {
        let _ = writeln!(s, "{},{:.6},{:.4}", e.epoch, e.train_loss, e.val_psnr);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

// ----- fine-tuning -------------------------------------------------------

/// One fine-tuning step record. Validation PSNR columns are filled on the
/// last step of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStep {
    pub step: u64,
    pub epoch: usize,
    pub l_cycle: f32,
    pub l_ps: f32,
    pub l_seg: Option<f32>,
    pub total: f32,
    pub val_psnr_whole: Option<f32>,
    pub val_psnr_liver: Option<f32>,
}

/// Fine-tune on thick-slice triplets starting from the pretrained weights.
/// The pretrained network also acts as the frozen pseudo-supervision
/// teacher, and `seg` (when given) as the frozen attention segmenter; their
/// parameters are never updated. When `out_dir` is given, writes
/// `finetune_log.csv` and keeps `g.ifck` current after every epoch.
pub fn finetune(
    train: &[SliceTriplet],
    val: &[SliceTriplet],
    flow_cfg: &FlowNetConfig,
    pretrained: &ParamStore,
    seg: Option<(&ParamStore, &UNetConfig)>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, Vec<FinetuneStep>)> {
    if train.is_empty() {
        return Err(Error::Invalid("empty fine-tuning set".into()));
    }
    cfg.weights.validate()?;
    let mut params = pretrained.clone();
    params.zero_grads();
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6669_6e65);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log: Vec<FinetuneStep> = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            let t = &train[i];
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape);
            let seg_bound = seg.map(|(p, c)| (BoundParams::bind(p, &mut tape), c));
            let losses = combined_loss_t(
                &mut tape,
                &bound,
                flow_cfg,
                pretrained,
                seg_bound.as_ref().map(|(b, c)| (b, *c)),
                &cfg.weights,
                t,
            )?;
            let total_value = tape.value(losses.total).item();
            if !total_value.is_finite() {
                return Err(Error::Diverged(step));
            }
            let grads = tape.backward(losses.total)?;
            // only the student's leaves receive the gradient; the teacher's
            // and segmenter's stay frozen
            let leaves = bound.vars().to_vec();
            drop(bound);
            drop(seg_bound);
            params.zero_grads();
            params.accumulate_grads(&tape, &leaves, &grads, 1.0);
            adam_step(&mut params, &mut state, &adam)?;
            let last_in_epoch = pos + 1 == order.len();
            let (vw, vl) = if last_in_epoch {
                (
                    Some(validation_psnr(&params, flow_cfg, val)?),
                    validation_psnr_liver(&params, flow_cfg, val)?,
                )
            } else {
                (None, None)
            };
            log.push(FinetuneStep {
                step,
                epoch,
                l_cycle: losses.cycle,
                l_ps: losses.ps,
                l_seg: losses.seg,
                total: total_value,
                val_psnr_whole: vw,
                val_psnr_liver: vl,
            });
            step += 1;
        }
        if let Some(dir) = out_dir {
            write_finetune_log(&log, &dir.join("finetune_log.csv"))?;
            params.save(&dir.join("g.ifck"))?;
            flow_cfg.write_sidecar(&dir.join("g.ifck.cfg"))?;
        }
    }
    Ok((params, log))
}

fn write_finetune_log(log: &[FinetuneStep], path: &Path) -> Result<()> {
    let mut s = String::from("step,epoch,l_cycle,l_ps,l_seg,total,val_psnr_whole,val_psnr_liver\n");
    let opt = |v: Option<f32>, digits: usize| match v {
        Some(v) => format!("{v:.digits$}"),
        None => String::new(),
    };
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{:.6},{},{}",
            r.step,
            r.epoch,
            r.l_cycle,
            r.l_ps,
            opt(r.l_seg, 6),
            r.total,
            opt(r.val_psnr_whole, 4),
            opt(r.val_psnr_liver, 4),
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{directional_gradcheck, Tensor};
    use crate::volume::LabelMap;

    fn tiny_flow_cfg() -> FlowNetConfig {
        FlowNetConfig {
            encoder_channels: [4, 6, 8],
            bottleneck_channels: 8,
            ..FlowNetConfig::small()
        }
    }

    /// Smooth pseudo-random slices with no exact matches between the
    /// middle slice and anything the network can synthesize, so the L1
    /// residuals stay away from their kink during finite differencing.
    fn noisy_triplet(h: usize, w: usize, seed: u64, labeled: bool) -> SliceTriplet {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut slice = |level: f32| -> Tensor {
            let (a, b) = (rng.gen_range(1..3) as f32, rng.gen_range(1..3) as f32);
            let (p1, p2) = (rng.gen_range(0.0..6.28f32), rng.gen_range(0.0..6.28f32));
            let data = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f32, (i % w) as f32);
                    level
                        + 0.1 * (6.28 * a * x / w as f32 + p1).sin()
                        + 0.1 * (6.28 * b * y / h as f32 + p2).sin()
                })
                .collect();
            Tensor::new(vec![h, w], data).unwrap()
        };
        let s0 = slice(0.35);
        let s1 = slice(0.75);
        let s2 = slice(0.35);
        let labels1 = labeled.then(|| {
            let labels = (0..h * w).map(|i| ((i / 7) % 3) as u8).collect();
            crate::volume::LabelMap { h, w, labels }
        });
        SliceTriplet {
            s0,
            s1,
            s2,
            labels1,
            source_spacing_z: 5.0,
        }
    }

    /// Push the flow off the bilinear grid points so differencing does not
    /// straddle the interpolation cell boundaries.
    fn nudge_head(params: &mut ParamStore) {
        let weight = params.value_mut("head.weight").unwrap();
        for v in weight.data_mut() {
            *v *= 10.0;
        }
        let bias = params.value_mut("head.bias").unwrap();
        bias.data_mut().copy_from_slice(&[0.11, -0.13, 0.17]);
    }

    /// A bright square moving one pixel per slice over a dim gradient.
    fn moving_square_triplet(h: usize, w: usize, start: usize, labeled: bool) -> SliceTriplet {
        let render = |offset: usize| -> Tensor {
            let mut t = Tensor::zeros(&[h, w]);
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.1 + 0.2 * x as f32 / w as f32;
                    let inside = y >= h / 3
                        && y < h / 3 + h / 4
                        && x >= offset
                        && x < offset + w / 4;
                    if inside {
                        v = 0.8;
                    }
                    t.data_mut()[y * w + x] = v;
                }
            }
            t
        };
        let labels1 = labeled.then(|| {
            let mut labels = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    if y >= h / 3 && y < h / 3 + h / 4 && x >= start + 1 && x < start + 1 + w / 4 {
                        labels[y * w + x] = 1;
                    }
                }
            }
            LabelMap { h, w, labels }
        });
        SliceTriplet {
            s0: render(start),
            s1: render(start + 1),
            s2: render(start + 2),
            labels1,
            source_spacing_z: 5.0,
        }
    }

    fn dataset(h: usize, w: usize, n: usize, labeled: bool) -> Vec<SliceTriplet> {
        (0..n)
            .map(|i| moving_square_triplet(h, w, 2 + i % 4, labeled))
            .collect()
    }

    #[test]
    fn pretrain_objective_gradients_match_finite_differences() {
        let fcfg = tiny_flow_cfg();
        let t = noisy_triplet(16, 16, 31, false);
        let mut params = flownet::init_params(&fcfg, 11);
        nudge_head(&mut params);
        let params = params;
        let objective = |work: &mut ParamStore| -> Result<f32> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(work, &mut tape);
            let s0 = tape.constant(t.s0.clone());
            let s1 = tape.constant(t.s1.clone());
            let s2 = tape.constant(t.s2.clone());
            let (out, flow) = flownet::interpolate_t(&mut tape, &bound, &fcfg, s0, s2, 0.5)?;
            let loss = dvf_loss_t(&mut tape, out, flow, s1, 1e-3, 1e-3)?;
            let grads = tape.backward(loss)?;
            let leaves = bound.vars().to_vec();
            drop(bound);
            work.zero_grads();
            work.accumulate_grads(&tape, &leaves, &grads, 1.0);
            Ok(tape.value(loss).item())
        };
        let report = directional_gradcheck(objective, &params, 3e-3, 1e-2, 4, 5).unwrap();
        assert!(
            report.all_ok(),
            "directional checks: {:?}",
            report.checks
        );
    }

    #[test]
    fn finetune_objective_gradients_match_finite_differences() {
        let fcfg = tiny_flow_cfg();
        let seg_cfg = UNetConfig {
            base_channels: 4,
            ..UNetConfig::default()
        };
        let seg_params = segmenter::init_params(&seg_cfg, 3);
        let teacher = flownet::init_params(&fcfg, 21);
        let t = noisy_triplet(16, 16, 32, true);
        let mut params = flownet::init_params(&fcfg, 12);
        nudge_head(&mut params);
        let params = params;
        let weights = LossWeights::default();
        let objective = |work: &mut ParamStore| -> Result<f32> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(work, &mut tape);
            let seg_bound = BoundParams::bind(&seg_params, &mut tape);
            let losses = combined_loss_t(
                &mut tape,
                &bound,
                &fcfg,
                &teacher,
                Some((&seg_bound, &seg_cfg)),
                &weights,
                &t,
            )?;
            let grads = tape.backward(losses.total)?;
            let leaves = bound.vars().to_vec();
            drop(bound);
            work.zero_grads();
            work.accumulate_grads(&tape, &leaves, &grads, 1.0);
            Ok(tape.value(losses.total).item())
        };
        let report = directional_gradcheck(objective, &params, 3e-3, 1e-2, 3, 9).unwrap();
        assert!(
            report.all_ok(),
            "directional checks: {:?}",
            report.checks
        );
    }

    #[test]
    fn cycle_loss_zero_on_constant_slices() {
        let fcfg = tiny_flow_cfg();
        let params = flownet::init_params(&fcfg, 4);
        let flat = Tensor::full(&[16, 16], 0.4);
        let t = SliceTriplet {
            s0: flat.clone(),
            s1: flat.clone(),
            s2: flat,
            labels1: None,
            source_spacing_z: 5.0,
        };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape);
        let (loss, _) = cycle_loss_t(&mut tape, &bound, &fcfg, &t).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn pseudo_supervision_is_zero_when_student_equals_teacher() {
        let fcfg = tiny_flow_cfg();
        let params = flownet::init_params(&fcfg, 4);
        let t = moving_square_triplet(16, 16, 3, false);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape);
        let (_, outputs) = cycle_loss_t(&mut tape, &bound, &fcfg, &t).unwrap();
        let l_ps = pseudo_supervised_loss_t(&mut tape, &outputs, &params, &fcfg, &t).unwrap();
        assert!(tape.value(l_ps).item().abs() < 1e-6);
    }

    #[test]
    fn segmentation_loss_requires_labels() {
        let fcfg = tiny_flow_cfg();
        let seg_cfg = UNetConfig {
            base_channels: 4,
            ..UNetConfig::default()
        };
        let seg_params = segmenter::init_params(&seg_cfg, 3);
        let params = flownet::init_params(&fcfg, 4);
        let t = moving_square_triplet(16, 16, 3, false);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape);
        let seg_bound = BoundParams::bind(&seg_params, &mut tape);
        let (_, outputs) = cycle_loss_t(&mut tape, &bound, &fcfg, &t).unwrap();
        assert!(matches!(
            segmentation_loss_t(&mut tape, &outputs, &seg_bound, &seg_cfg, &t),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn pretrain_improves_validation_psnr_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let fcfg = tiny_flow_cfg();
        let train = dataset(16, 16, 6, false);
        let val = dataset(16, 16, 2, false);
        let cfg = TrainConfig {
            epochs: 4,
            lr: 2e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let (params, log) = pretrain(&train, &val, &fcfg, &cfg, Some(dir.path())).unwrap();
        assert_eq!(log.len(), 4);
        assert!(
            log.last().unwrap().val_psnr > log.first().unwrap().val_psnr - 0.5,
            "{log:?}"
        );
        assert!(log.last().unwrap().train_loss < log.first().unwrap().train_loss);
        assert!(dir.path().join("pretrain_log.csv").exists());
        let reloaded = ParamStore::load(&dir.path().join("g_pre.ifck")).unwrap();
        for (name, value, _) in params.iter() {
            assert_eq!(reloaded.value(name).unwrap(), value);
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let fcfg = tiny_flow_cfg();
        let train = dataset(16, 16, 3, false);
        let val = dataset(16, 16, 1, false);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, _) = pretrain(&train, &val, &fcfg, &cfg, None).unwrap();
        let (b, _) = pretrain(&train, &val, &fcfg, &cfg, None).unwrap();
        for (name, value, _) in a.iter() {
            assert_eq!(b.value(name).unwrap(), value, "entry {name}");
        }
    }

    #[test]
    fn finetune_runs_keeps_teacher_and_segmenter_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let fcfg = tiny_flow_cfg();
        let seg_cfg = UNetConfig {
            base_channels: 4,
            ..UNetConfig::default()
        };
        let seg_params = segmenter::init_params(&seg_cfg, 3);
        let seg_before = seg_params.clone();
        let train = dataset(16, 16, 4, true);
        let val = dataset(16, 16, 2, true);
        let pre_cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let (teacher, _) = pretrain(&train, &val, &fcfg, &pre_cfg, None).unwrap();
        let teacher_before = teacher.clone();
        let ft_cfg = TrainConfig {
            epochs: 2,
            lr: 5e-4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (tuned, log) = finetune(
            &train,
            &val,
            &fcfg,
            &teacher,
            Some((&seg_params, &seg_cfg)),
            &ft_cfg,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(log.len(), 8);
        // seg term was computed (labels present, weight > 0)
        assert!(log.iter().all(|r| r.l_seg.is_some()));
        // val columns only at epoch boundaries
        assert_eq!(
            log.iter().filter(|r| r.val_psnr_whole.is_some()).count(),
            2
        );
        for (name, value, _) in teacher_before.iter() {
            assert_eq!(teacher.value(name).unwrap(), value, "teacher {name}");
        }
        for (name, value, _) in seg_before.iter() {
            assert_eq!(seg_params.value(name).unwrap(), value, "segmenter {name}");
        }
        // the student actually moved
        assert!(tuned.iter().any(|(name, value, _)| {
            teacher.value(name).unwrap().data() != value.data()
        }));
        let text = std::fs::read_to_string(dir.path().join("finetune_log.csv")).unwrap();
        assert!(text.starts_with("step,epoch,l_cycle,l_ps,l_seg,total,val_psnr_whole,val_psnr_liver"));
    }

    #[test]
    fn finetune_without_segmenter_skips_seg_term() {
        let fcfg = tiny_flow_cfg();
        let train = dataset(16, 16, 2, false);
        let val = dataset(16, 16, 1, false);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let teacher = flownet::init_params(&fcfg, 8);
        let (_, log) = finetune(&train, &val, &fcfg, &teacher, None, &cfg, None).unwrap();
        assert!(log.iter().all(|r| r.l_seg.is_none()));
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            cycle: -1.0,
            seg: 0.5,
            ps: 1.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            cycle: 0.0,
            seg: 0.0,
            ps: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn train_config_round_trips() {
        let cfg = TrainConfig {
            epochs: 7,
            lr: 3e-4,
            seed: 42,
            weights: LossWeights {
                cycle: 1.0,
                seg: 0.0,
                ps: 2.0,
            },
            tv_motion: 1e-3,
            tv_mask: 5e-4,
        };
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        assert!(TrainConfig::from_text("bogus = 3").is_err());
    }
}


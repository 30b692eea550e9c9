//! Second training phase: adapt a pretrained interpolator to thick slices
//! without thin-slice ground truth.
//!
//! Three losses drive the student network on thickness-degraded volumes:
//! a cycle loss (interpolate at n = 0.5 twice outward, then back inward —
//! the result must match the real middle slice), a pseudo-supervised loss
//! against a frozen copy of the pretrained teacher, and a segmentation
//! attention loss that focuses capacity on liver and lesion voxels through
//! a frozen segmenter.
//!
//! ```bash
//! cargo run --release --example finetune_with_attention
//! ```

use sliceflow::flownet::FlowNetConfig;
use sliceflow::phantom::{degrade_seg_thickness, degrade_thickness, generate, sample_spec};
use sliceflow::segmenter::{train_segmenter, UNetConfig};
use sliceflow::training::{finetune, pretrain, TrainConfig};
use sliceflow::volume::{extract_triplets, window_normalize, DEFAULT_WINDOW};

fn main() -> sliceflow::Result<()> {
    // Thin phantoms for pretraining, their degraded versions for fine-tuning.
    let mut thin_triplets = Vec::new();
    let mut thick_triplets = Vec::new();
    let mut seg_slices = Vec::new();
    for seed in 0..3u64 {
        let (volume, seg) = generate(&sample_spec(seed, 2.0))?;
        let norm = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
        thin_triplets.extend(extract_triplets(&norm, None, 1)?);

        let thick = degrade_thickness(&norm, 2)?;
        let thick_seg = degrade_seg_thickness(&seg, 2)?;
        thick_triplets.extend(extract_triplets(&thick, Some(&thick_seg), 1)?);
        for z in 0..thick.shape().0 {
            seg_slices.push((thick.slice(z), thick_seg.slice(z)));
        }
    }

    let flow_cfg = FlowNetConfig::small();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    println!("pretraining teacher on {} thin triplets", thin_triplets.len());
    let (teacher, _) = pretrain(&thin_triplets, &thin_triplets[..4], &flow_cfg, &cfg, None)?;

    let seg_cfg = UNetConfig {
        base_channels: 8,
        ..UNetConfig::default()
    };
    println!("training attention segmenter on {} slices", seg_slices.len());
    let (seg_params, _) = train_segmenter(&seg_slices, &seg_cfg, 2, 2e-3, 0)?;

    println!("fine-tuning on {} thick triplets", thick_triplets.len());
    let (_student, log) = finetune(
        &thick_triplets,
        &thick_triplets[..4],
        &flow_cfg,
        &teacher,
        Some((&seg_params, &seg_cfg)),
        &cfg,
        None,
    )?;

    for step in log.iter().take(3).chain(log.last()) {
        println!(
            "step {:3}: cycle {:.5}, pseudo-supervised {:.5}, attention {:.5}, total {:.5}",
            step.step,
            step.l_cycle,
            step.l_ps,
            step.l_seg.unwrap_or(f32::NAN),
            step.total
        );
    }
    Ok(())
}

//! First training phase: teach the voxel-flow network to reconstruct the
//! middle slice of thin-slice triplets.
//!
//! The network predicts an in-plane displacement field plus a blend mask;
//! the middle slice is synthesized by warping both neighbours. Training
//! minimizes L1 reconstruction error with total-variation smoothing on the
//! flow and the mask.
//!
//! ```bash
//! cargo run --release --example pretrain_interpolator
//! ```

use sliceflow::flownet::FlowNetConfig;
use sliceflow::phantom::{generate, sample_spec};
use sliceflow::training::{pretrain, TrainConfig};
use sliceflow::volume::{extract_triplets, window_normalize, DEFAULT_WINDOW};

fn main() -> sliceflow::Result<()> {
    // Three random phantoms for training, one held out for validation.
    let mut train = Vec::new();
    let mut val = Vec::new();
    for seed in 0..4u64 {
        let (volume, _) = generate(&sample_spec(seed, 2.0))?;
        let norm = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
        let triplets = extract_triplets(&norm, None, 1)?;
        if seed < 3 {
            train.extend(triplets);
        } else {
            val.extend(triplets);
        }
    }
    println!("{} training triplets, {} validation triplets", train.len(), val.len());

    let flow_cfg = FlowNetConfig::small();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-4,
        ..TrainConfig::default()
    };
    let (params, log) = pretrain(&train, &val, &flow_cfg, &cfg, None)?;

    for e in &log {
        println!(
            "epoch {}: train loss {:.5}, validation PSNR {:.2} dB",
            e.epoch, e.train_loss, e.val_psnr
        );
    }
    let total: usize = (0..params.len()).map(|i| params.value_at(i).len()).sum();
    println!("trained {} parameter tensors ({total} scalars)", params.len());
    Ok(())
}

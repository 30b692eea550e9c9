//! Train the mini-UNet slice segmenter on phantom data and segment a
//! held-out volume.
//!
//! The segmenter labels each axial slice into background / liver / lesion
//! and is used both as the attention network during fine-tuning and as the
//! downstream task in the benchmark.
//!
//! ```bash
//! cargo run --release --example train_segmenter
//! ```

use sliceflow::metrics::seg_overlap;
use sliceflow::phantom::{generate, sample_spec};
use sliceflow::segmenter::{segment_volume, train_segmenter, UNetConfig};
use sliceflow::volume::{window_normalize, DEFAULT_WINDOW};

fn main() -> sliceflow::Result<()> {
    let mut dataset = Vec::new();
    for seed in 0..3u64 {
        let (volume, seg) = generate(&sample_spec(seed, 2.0))?;
        let norm = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
        for z in 0..norm.shape().0 {
            dataset.push((norm.slice(z), seg.slice(z)));
        }
    }
    println!("training on {} labeled slices", dataset.len());

    let cfg = UNetConfig {
        base_channels: 8,
        ..UNetConfig::default()
    };
    let (params, losses) = train_segmenter(&dataset, &cfg, 8, 2e-3, 0)?;
    for (i, l) in losses.iter().enumerate() {
        println!("epoch {i}: loss {l:.5}");
    }

    // Held-out phantom: slice-wise prediction plus 3-D cleanup (largest
    // liver component, small lesion components dropped).
    let (volume, gt) = generate(&sample_spec(99, 2.0))?;
    let norm = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
    let pred = segment_volume(&params, &cfg, &norm, 4)?;

    let liver_pred: Vec<bool> = pred.labels().iter().map(|&l| l >= 1).collect();
    let liver_gt: Vec<bool> = gt.labels().iter().map(|&l| l >= 1).collect();
    let liver = seg_overlap(&liver_pred, &liver_gt)?;
    let lesion = seg_overlap(&pred.class_mask(2), &gt.class_mask(2))?;
    println!("held-out liver  dice {:.3}, recall {:.3}", liver.dice, liver.recall);
    println!("held-out lesion dice {:.3}, recall {:.3}", lesion.dice, lesion.recall);
    Ok(())
}

//! Run the full comparison matrix on a small synthetic dataset.
//!
//! Generates phantoms, trains every learned arm (pretrained flow, two
//! fine-tuned variants per thickness factor, a downstream segmenter), then
//! scores nearest-neighbour, linear, and both flow variants on held-out
//! cases — image metrics per ROI, downstream segmentation quality, and a
//! thickness-degradation curve. Identical to `sliceflow bench`.
//!
//! Training every arm takes a few minutes on one core.
//!
//! ```bash
//! cargo run --release --example run_benchmark
//! ```

use std::fs;

use sliceflow::commands::{cmd_bench, cmd_phantom, BenchOpts};
use sliceflow::training::TrainConfig;

fn main() -> sliceflow::Result<()> {
    let root = std::env::temp_dir().join("sliceflow_bench_example");
    let data = root.join("data");
    let out = root.join("out");
    fs::create_dir_all(&root).map_err(|e| sliceflow::Error::io(&root, e))?;

    cmd_phantom(&data, 4, 11, 2.0, None)?;

    let cfg_path = root.join("train.cfg");
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| sliceflow::Error::io(&cfg_path, e))?;

    let opts = BenchOpts {
        factors: vec![2],
        ladder: vec![2, 3, 4],
        holdout: 1,
        config: Some(cfg_path),
        ..BenchOpts::default()
    };
    let result = cmd_bench(&data, &out, &opts)?;

    println!("\naggregate metrics (held-out cases):");
    for (roi, metric, value) in result.report.aggregates() {
        println!("  {roi:7} {metric:28} {value:.4}");
    }
    println!("\nthickness curve:");
    for (k, method, psnr, dice) in &result.thickness_curve {
        println!("  factor {k}: {method:8} PSNR {psnr:.2} dB, lesion Dice {dice:.3}");
    }
    println!("\nreports written under {}", out.display());
    Ok(())
}

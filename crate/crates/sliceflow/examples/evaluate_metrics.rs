//! Image-quality and segmentation metrics on a worked phantom example.
//!
//! Shows PSNR/SSIM (whole image and ROI-masked), Dice/recall/precision
//! overlap, average symmetric surface distance in millimetres, and the CSV
//! report shared by `eval` and `bench`.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use sliceflow::metrics::{asd, psnr, seg_overlap, ssim, MetricReport};
use sliceflow::phantom::{generate, PhantomSpec};
use sliceflow::volume::{window_normalize, DEFAULT_WINDOW};

fn main() -> sliceflow::Result<()> {
    let (volume, seg) = generate(&PhantomSpec::default())?;
    let norm = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;

    // A blurred prediction: each slice averaged with its neighbours.
    let z_mid = norm.shape().0 / 2;
    let truth = norm.slice(z_mid);
    let blurred = {
        let a = norm.slice(z_mid - 1);
        let b = norm.slice(z_mid + 1);
        let data = truth
            .data()
            .iter()
            .zip(a.data())
            .zip(b.data())
            .map(|((&t, &a), &b)| 0.5 * t + 0.25 * a + 0.25 * b)
            .collect();
        sliceflow::numerics::Tensor::new(truth.shape().to_vec(), data)?
    };

    let labels = seg.slice(z_mid);
    let liver: Vec<bool> = labels.labels.iter().map(|&l| l >= 1).collect();
    let lesion = labels.class_mask(2);

    let mut report = MetricReport::new();
    report.push("z_mid", "whole", "psnr", psnr(&blurred, &truth, None, 1.0)?);
    report.push("z_mid", "whole", "ssim", ssim(&blurred, &truth, None, 1.0)?);
    report.push("z_mid", "liver", "psnr", psnr(&blurred, &truth, Some(&liver), 1.0)?);
    report.push("z_mid", "lesion", "psnr", psnr(&blurred, &truth, Some(&lesion), 1.0)?);

    // Segmentation overlap: ground truth against itself shifted one slice.
    let gt_lesion = seg.class_mask(2);
    let mut shifted = vec![false; gt_lesion.len()];
    let plane = seg.shape().1 * seg.shape().2;
    shifted[plane..].copy_from_slice(&gt_lesion[..gt_lesion.len() - plane]);
    let o = seg_overlap(&shifted, &gt_lesion)?;
    report.push("volume", "lesion", "dice", o.dice);
    report.push("volume", "lesion", "recall", o.recall);
    report.push("volume", "lesion", "precision", o.precision);
    report.push(
        "volume",
        "lesion",
        "asd_mm",
        asd(&shifted, &gt_lesion, seg.shape(), seg.spacing())?,
    );

    let path = std::env::temp_dir().join("sliceflow_metrics.csv");
    report.write_csv(&path)?;
    for (roi, metric, value) in report.aggregates() {
        println!("{roi:7} {metric:10} {value:.4}");
    }
    println!("CSV written to {}", path.display());
    Ok(())
}

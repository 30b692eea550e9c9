//! Generate a synthetic liver phantom and write it as a NIfTI pair.
//!
//! The phantom is an ellipsoidal liver with drifting hypodense lesions on a
//! graded background, rendered with partial-volume anti-aliasing, plus an
//! aligned label volume (0 background, 1 liver, 2 lesion).
//!
//! ```bash
//! cargo run --release --example generate_phantom
//! ```

use sliceflow::phantom::{generate, sample_spec, Lesion, PhantomSpec};
use sliceflow::volume::{write_nifti, write_seg_nifti};

fn main() -> sliceflow::Result<()> {
    // Hand-built spec: one large lesion with strong in-plane drift, so the
    // lesion boundary visibly shifts from slice to slice.
    let spec = PhantomSpec {
        lesions: vec![Lesion {
            center: (31.0, 28.0, 36.0),
            radius: 9.0,
            contrast: -45.0,
            drift: (0.8, -0.6),
        }],
        noise_sigma: 2.0,
        ..PhantomSpec::default()
    };
    let (volume, seg) = generate(&spec)?;

    let (nz, ny, nx) = volume.shape();
    let (dz, dy, dx) = volume.spacing();
    println!("volume: {nz} x {ny} x {nx} voxels at {dz} x {dy} x {dx} mm");
    let mut counts = [0usize; 3];
    for &l in seg.labels() {
        counts[l as usize] += 1;
    }
    println!(
        "labels: {} background, {} liver, {} lesion voxels",
        counts[0], counts[1], counts[2]
    );

    let dir = std::env::temp_dir().join("sliceflow_phantom");
    std::fs::create_dir_all(&dir).map_err(|e| sliceflow::Error::io(&dir, e))?;
    write_nifti(&volume, &dir.join("phantom_thin.nii.gz"))?;
    write_seg_nifti(&seg, &dir.join("phantom_seg.nii.gz"))?;
    println!("written to {}", dir.display());

    // Randomized variants for dataset building share the same grid.
    for seed in 0..3 {
        let s = sample_spec(seed, 3.0);
        println!("seed {seed}: {} lesion(s), liver radii {:?}", s.lesions.len(), s.liver_radii);
    }
    Ok(())
}

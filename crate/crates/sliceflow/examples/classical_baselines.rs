//! Nearest-neighbour and linear slice interpolation on a degraded phantom.
//!
//! Simulates thick-slice acquisition by decimating a thin phantom along z,
//! restores the missing slices with both classical baselines, and scores
//! them against the withheld originals.
//!
//! ```bash
//! cargo run --release --example classical_baselines
//! ```

use sliceflow::baselines::{linear_interpolate, nn_interpolate};
use sliceflow::metrics::psnr;
use sliceflow::phantom::{degrade_thickness, generate, PhantomSpec};
use sliceflow::volume::{window_normalize, DEFAULT_WINDOW};

fn main() -> sliceflow::Result<()> {
    let (volume, _) = generate(&PhantomSpec::default())?;
    let thin = window_normalize(&volume, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?;
    let k = 2;
    let thick = degrade_thickness(&thin, k)?;
    println!(
        "thin: {} slices at {} mm, degraded: {} slices at {} mm",
        thin.shape().0,
        thin.spacing().0,
        thick.shape().0,
        thick.spacing().0
    );

    // Every odd thin slice sits halfway between two thick slices (n = 0.5).
    let mut nn_sum = 0.0;
    let mut lin_sum = 0.0;
    let mut count = 0;
    for z in 0..thick.shape().0 - 1 {
        let a = thick.slice(z);
        let b = thick.slice(z + 1);
        let truth = thin.slice(z * k + 1);
        let nn = nn_interpolate(&a, &b, 0.5)?;
        let lin = linear_interpolate(&a, &b, 0.5)?;
        nn_sum += psnr(&nn, &truth, None, 1.0)?;
        lin_sum += psnr(&lin, &truth, None, 1.0)?;
        count += 1;
    }
    println!("mean PSNR over {count} restored slices:");
    println!("  nearest-neighbour: {:.2} dB", nn_sum / count as f32);
    println!("  linear:            {:.2} dB", lin_sum / count as f32);
    Ok(())
}

//! Verify the hand-written backward passes against finite differences.
//!
//! Two levels of checking: per-coordinate central differences on a shallow
//! composition (tight tolerance), and directional derivatives with
//! Richardson extrapolation on the full fine-tuning objective, where
//! per-coordinate differencing would drown in f32 forward noise.
//!
//! ```bash
//! cargo run --release --example check_gradients
//! ```

use sliceflow::flownet::{self, FlowNetConfig};
use sliceflow::numerics::{
    directional_gradcheck, gradcheck, BoundParams, GradCheckConfig, Tape, Tensor,
};
use sliceflow::training::{combined_loss_t, TrainConfig};
use sliceflow::volume::SliceTriplet;

fn smooth_slice(h: usize, w: usize, phase: f32, level: f32) -> Tensor {
    let data = (0..h * w)
        .map(|i| {
            let y = (i / w) as f32;
            let x = (i % w) as f32;
            level + 0.2 * ((0.37 * x + 0.23 * y + phase).sin())
        })
        .collect();
    Tensor::new(vec![h, w], data).unwrap()
}

fn main() -> sliceflow::Result<()> {
    // Shallow composition (one convolution + sigmoid + L1), checked
    // coordinate by coordinate at tight tolerance.
    let mut shallow_params = sliceflow::numerics::ParamStore::new(3);
    {
        let mut rng = shallow_params.rng();
        shallow_params.insert(
            "w",
            sliceflow::numerics::he_normal(&[3, 2, 3, 3], 18, 1.0, &mut rng),
        );
        shallow_params.insert("b", Tensor::zeros(&[3]));
    }
    let x = smooth_slice(8, 8, 0.3, 0.4);
    let input = Tensor::new(vec![2, 8, 8], [x.data(), x.data()].concat()).unwrap();
    let shallow = |p: &mut sliceflow::numerics::ParamStore| {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(p, &mut tape);
        let inp = tape.constant(input.clone());
        let conv = tape.conv2d(inp, bound.var("w"), bound.var("b"), 1, 1)?;
        let act = tape.activation(conv, sliceflow::numerics::Activation::Sigmoid);
        let target = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let loss = tape.l1_loss(act, target)?;
        let grads = tape.backward(loss)?;
        let leaves = bound.vars().to_vec();
        drop(bound);
        p.accumulate_grads(&tape, &leaves, &grads, 1.0);
        Ok(tape.value(loss).item())
    };
    let report = gradcheck(shallow, &shallow_params, &GradCheckConfig::default())?;
    println!(
        "per-coordinate check on conv + sigmoid + L1: max rel err {:.2e} ({})",
        report.max_rel_err(),
        if report.all_ok() { "ok" } else { "FAILED" }
    );

    let cfg = FlowNetConfig {
        encoder_channels: [4, 6, 8],
        bottleneck_channels: 8,
        ..FlowNetConfig::small()
    };
    let mut params = flownet::init_params(&cfg, 1);
    // Scale up the head so the flow field sits away from the bilinear
    // sampler's integer grid, where its derivative is discontinuous.
    for v in params.value_mut("head.weight").unwrap().data_mut() {
        *v *= 10.0;
    }
    params
        .value_mut("head.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.11, -0.13, 0.17]);

    let s0 = smooth_slice(16, 16, 0.0, 0.35);
    let s1 = smooth_slice(16, 16, 0.8, 0.75);
    let s2 = smooth_slice(16, 16, 1.6, 0.35);
    let triplet = SliceTriplet {
        s0: s0.clone(),
        s1: s1.clone(),
        s2: s2.clone(),
        labels1: None,
        source_spacing_z: 5.0,
    };

    // Full fine-tuning objective (three chained network applications plus
    // the pseudo-supervised term), checked along directions.
    let teacher = params.clone();
    let train_cfg = TrainConfig::default();
    let deep = |p: &mut sliceflow::numerics::ParamStore| {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(p, &mut tape);
        let loss = combined_loss_t(
            &mut tape,
            &bound,
            &cfg,
            &teacher,
            None,
            &train_cfg.weights,
            &triplet,
        )?;
        let grads = tape.backward(loss.total)?;
        let leaves = bound.vars().to_vec();
        drop(bound);
        p.accumulate_grads(&tape, &leaves, &grads, 1.0);
        Ok(tape.value(loss.total).item())
    };
    let dir_report = directional_gradcheck(deep, &params, 3e-3, 1e-2, 4, 5)?;
    for (i, c) in dir_report.checks.iter().enumerate() {
        println!(
            "direction {i}: analytic {:+.6e}, numeric {:+.6e}, rel err {:.2e}",
            c.analytic, c.numeric, c.rel_err
        );
    }
    println!(
        "directional check on the fine-tuning objective: {}",
        if dir_report.all_ok() { "ok" } else { "FAILED" }
    );
    Ok(())
}

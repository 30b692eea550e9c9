//! The slice interpolator: an encoder-decoder that estimates an in-plane
//! voxel-flow field (dx, dy) plus a blend mask from a pair of slices, then
//! warps and blends the pair into the intermediate slice.
//!
//! The fractional position n is injected as a constant third input channel,
//! so a single network serves any n in (0, 1) — needed for 3x upsampling
//! where both n = 1/3 and n = 2/3 are requested.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{he_normal, BoundParams, ParamStore, Tape, Tensor, Var};
use crate::numerics::tape::Activation;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetConfig {
    pub encoder_channels: [usize; 3],
    pub bottleneck_channels: usize,
    pub kernel: usize,
    pub skip_connections: bool,
    /// Displacement bound D in pixels; flow is tanh-scaled into [-D, D].
    pub max_disp: f32,
    pub input_channels: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            encoder_channels: [32, 64, 128],
            bottleneck_channels: 128,
            kernel: 3,
            skip_connections: true,
            max_disp: 16.0,
            input_channels: 3,
        }
    }
}

impl FlowNetConfig {
    /// A narrower network with the same topology; used where runtime matters
    /// more than capacity.
    pub fn small() -> Self {
        FlowNetConfig {
            encoder_channels: [16, 32, 64],
            bottleneck_channels: 64,
            ..Default::default()
        }
    }

    fn decoder_channels(&self) -> [usize; 3] {
        let [e1, e2, _] = self.encoder_channels;
        [e2, e1, e1 / 2]
    }

    /// Plain-text key = value sidecar describing this config.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "encoder_channels = {},{},{}",
            self.encoder_channels[0], self.encoder_channels[1], self.encoder_channels[2]
        );
        let _ = writeln!(s, "bottleneck_channels = {}", self.bottleneck_channels);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "skip_connections = {}", self.skip_connections);
        let _ = writeln!(s, "max_disp = {}", self.max_disp);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut cfg = FlowNetConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("bad sidecar line: {line}")))?;
            let (key, value) = (key.trim(), value.trim());
            fn bad(key: &str, value: &str) -> Error {
                Error::Invalid(format!("bad value for {key}: {value}"))
            }
            match key {
                "encoder_channels" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(key, value))?;
                    if parts.len() != 3 {
                        return Err(Error::Invalid(
                            "encoder_channels needs exactly 3 entries".into(),
                        ));
                    }
                    cfg.encoder_channels = [parts[0], parts[1], parts[2]];
                }
                "bottleneck_channels" => cfg.bottleneck_channels = value.parse().map_err(|_| bad(key, value))?,
                "kernel" => cfg.kernel = value.parse().map_err(|_| bad(key, value))?,
                "skip_connections" => cfg.skip_connections = value.parse().map_err(|_| bad(key, value))?,
                "max_disp" => cfg.max_disp = value.parse().map_err(|_| bad(key, value))?,
                "input_channels" => cfg.input_channels = value.parse().map_err(|_| bad(key, value))?,
                other => return Err(Error::Invalid(format!("unknown sidecar key {other}"))),
            }
        }
        Ok(cfg)
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

/// Per-pixel in-plane displacement (pixels) and blend mask, both (H, W).
#[derive(Debug, Clone)]
pub struct FlowField {
    pub dx: Tensor,
    pub dy: Tensor,
    pub mask: Tensor,
}

/// On-tape counterpart of [`FlowField`].
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub dx: Var,
    pub dy: Var,
    pub mask: Var,
}

/// Seeded parameter initialization: He-normal conv/deconv weights, zero
/// biases, a down-scaled head so initial displacements start near zero.
pub fn init_params(cfg: &FlowNetConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    let mut rng = store.rng();
    let k = cfg.kernel;
    let [e1, e2, e3] = cfg.encoder_channels;
    let [d3, d2, d1] = cfg.decoder_channels();
    let skip = cfg.skip_connections;

    let mut conv = |store: &mut ParamStore, name: &str, ci: usize, co: usize, kk: usize, gain: f32| {
        store.insert(
            &format!("{name}.weight"),
            he_normal(&[co, ci, kk, kk], ci * kk * kk, gain, &mut rng),
        );
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[co]));
    };
    conv(&mut store, "enc1", cfg.input_channels, e1, k, 1.0);
    conv(&mut store, "enc2", e1, e2, k, 1.0);
    conv(&mut store, "enc3", e2, e3, k, 1.0);
    conv(&mut store, "bottleneck", e3, cfg.bottleneck_channels, k, 1.0);

    let mut rng2 = store.rng();
    // deconv weights are [C_in, C_out, 4, 4]
    let mut deconv = |store: &mut ParamStore, name: &str, ci: usize, co: usize| {
        store.insert(
            &format!("{name}.weight"),
            he_normal(&[ci, co, 4, 4], ci * 16, 1.0, &mut rng2),
        );
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[co]));
    };
    deconv(&mut store, "dec3", cfg.bottleneck_channels, d3);
    deconv(
        &mut store,
        "dec2",
        if skip { d3 + e2 } else { d3 },
        d2,
    );
    deconv(
        &mut store,
        "dec1",
        if skip { d2 + e1 } else { d2 },
        d1,
    );

    let mut rng3 = store.rng();
    store.insert(
        "head.weight",
        he_normal(&[3, d1, k, k], d1 * k * k, 0.1, &mut rng3),
    );
    store.insert("head.bias", Tensor::zeros(&[3]));
    store
}

fn check_slice_pair(s_a: &Tensor, s_b: &Tensor) -> Result<(usize, usize)> {
    let (ca, h, w) = s_a.chw()?;
    let (cb, hb, wb) = s_b.chw()?;
    if ca != 1 || cb != 1 || h != hb || w != wb {
        return Err(Error::DimMismatch {
            axis: "slice pair",
            expected: h * w,
            got: hb * wb,
        });
    }
    Ok((h, w))
}

fn check_fraction(n: f32) -> Result<()> {
    if !(0.0 < n && n < 1.0) {
        return Err(Error::Invalid(format!(
            "fractional position n must lie in (0, 1), got {n}"
        )));
    }
    Ok(())
}

/// Forward pass of the flow estimator on an existing tape. Spatial dims must
/// already be divisible by 8.
pub fn flow_forward_t(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FlowNetConfig,
    s_a: Var,
    s_b: Var,
    n: f32,
) -> Result<FlowVars> {
    check_fraction(n)?;
    let (_, h, w) = tape.value(s_a).chw()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidShape(format!(
            "flow input is {h}x{w}; pad spatial dims to multiples of 8 first"
        )));
    }
    let p = cfg.kernel / 2;

    let a3 = tape.reshape(s_a, vec![1, h, w])?;
    let b3 = tape.reshape(s_b, vec![1, h, w])?;
    let n_plane = tape.constant(Tensor::full(&[1, h, w], n));
    let input = tape.concat_channels(&[a3, b3, n_plane])?;

    let layer = |tape: &mut Tape, x: Var, name: &str, stride: usize| -> Result<Var> {
        let y = tape.conv2d(
            x,
            params.var(&format!("{name}.weight")),
            params.var(&format!("{name}.bias")),
            stride,
            p,
        )?;
        Ok(tape.activation(y, Activation::Relu))
    };
    let e1 = layer(tape, input, "enc1", 2)?;
    let e2 = layer(tape, e1, "enc2", 2)?;
    let e3 = layer(tape, e2, "enc3", 2)?;
    let bn = layer(tape, e3, "bottleneck", 1)?;

    let up = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
        let y = tape.deconv2d(
            x,
            params.var(&format!("{name}.weight")),
            params.var(&format!("{name}.bias")),
            2,
            1,
        )?;
        Ok(tape.activation(y, Activation::Relu))
    };
    let mut x = up(tape, bn, "dec3")?;
    if cfg.skip_connections {
        x = tape.concat_channels(&[x, e2])?;
    }
    x = up(tape, x, "dec2")?;
    if cfg.skip_connections {
        x = tape.concat_channels(&[x, e1])?;
    }
    x = up(tape, x, "dec1")?;

    let raw = tape.conv2d(
        x,
        params.var("head.weight"),
        params.var("head.bias"),
        1,
        p,
    )?;
    let dx_raw = tape.slice_channels(raw, 0, 1)?;
    let dy_raw = tape.slice_channels(raw, 1, 1)?;
    let m_raw = tape.slice_channels(raw, 2, 1)?;
    let dx_t = tape.activation(dx_raw, Activation::Tanh);
    let dy_t = tape.activation(dy_raw, Activation::Tanh);
    let dx3 = tape.scale(dx_t, cfg.max_disp);
    let dy3 = tape.scale(dy_t, cfg.max_disp);
    let m3 = tape.activation(m_raw, Activation::Sigmoid);
    Ok(FlowVars {
        dx: tape.reshape(dx3, vec![h, w])?,
        dy: tape.reshape(dy3, vec![h, w])?,
        mask: tape.reshape(m3, vec![h, w])?,
    })
}

/// Warp-and-blend synthesis on the tape:
/// out = m * B(s_a; x - n dx, y - n dy) + (1 - m) * B(s_b; x + (1-n) dx, y + (1-n) dy).
pub fn synthesize_t(
    tape: &mut Tape,
    s_a: Var,
    s_b: Var,
    flow: FlowVars,
    n: f32,
) -> Result<Var> {
    check_fraction(n)?;
    let (_, h, w) = tape.value(s_a).chw()?;
    let mut gx = Tensor::zeros(&[h, w]);
    let mut gy = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            gx.data_mut()[y * w + x] = x as f32;
            gy.data_mut()[y * w + x] = y as f32;
        }
    }
    let grid_x = tape.constant(gx);
    let grid_y = tape.constant(gy);

    let a3 = tape.reshape(s_a, vec![1, h, w])?;
    let b3 = tape.reshape(s_b, vec![1, h, w])?;

    let back_dx = tape.scale(flow.dx, -n);
    let back_dy = tape.scale(flow.dy, -n);
    let ax = tape.add(grid_x, back_dx)?;
    let ay = tape.add(grid_y, back_dy)?;
    let warped_a = tape.bilinear_sample(a3, ax, ay)?;

    let fwd_dx = tape.scale(flow.dx, 1.0 - n);
    let fwd_dy = tape.scale(flow.dy, 1.0 - n);
    let bx = tape.add(grid_x, fwd_dx)?;
    let by = tape.add(grid_y, fwd_dy)?;
    let warped_b = tape.bilinear_sample(b3, bx, by)?;

    let m3 = tape.reshape(flow.mask, vec![1, h, w])?;
    let neg_m = tape.scale(m3, -1.0);
    let one_minus_m = tape.add_scalar(neg_m, 1.0);
    let part_a = tape.mul(m3, warped_a)?;
    let part_b = tape.mul(one_minus_m, warped_b)?;
    let out = tape.add(part_a, part_b)?;
    tape.reshape(out, vec![h, w])
}

/// Flow estimation + synthesis with internal reflect-padding to multiples of
/// 8 and crop back. This is the full interpolator.
pub fn interpolate_t(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &FlowNetConfig,
    s_a: Var,
    s_b: Var,
    n: f32,
) -> Result<(Var, FlowVars)> {
    let (_, h, w) = tape.value(s_a).chw()?;
    let (ph, pw) = (h.next_multiple_of(8), w.next_multiple_of(8));
    if (ph, pw) == (h, w) {
        let flow = flow_forward_t(tape, params, cfg, s_a, s_b, n)?;
        let out = synthesize_t(tape, s_a, s_b, flow, n)?;
        return Ok((out, flow));
    }
    let pad = [0, ph - h, 0, pw - w];
    let a3 = tape.reshape(s_a, vec![1, h, w])?;
    let b3 = tape.reshape(s_b, vec![1, h, w])?;
    let ap = tape.reflect_pad(a3, pad)?;
    let bp = tape.reflect_pad(b3, pad)?;
    let ap2 = tape.reshape(ap, vec![ph, pw])?;
    let bp2 = tape.reshape(bp, vec![ph, pw])?;
    let flow = flow_forward_t(tape, params, cfg, ap2, bp2, n)?;
    let out_p = synthesize_t(tape, ap2, bp2, flow, n)?;
    let take = |tape: &mut Tape, v: Var| -> Result<Var> {
        let c = tape.crop(v, 0, 0, h, w)?;
        tape.reshape(c, vec![h, w])
    };
    let out = take(tape, out_p)?;
    let dx = take(tape, flow.dx)?;
    let dy = take(tape, flow.dy)?;
    let mask = take(tape, flow.mask)?;
    Ok((out, FlowVars { dx, dy, mask }))
}

/// Deterministic flow estimation without gradient bookkeeping exposed.
pub fn flow_forward(
    params: &ParamStore,
    cfg: &FlowNetConfig,
    s_a: &Tensor,
    s_b: &Tensor,
    n: f32,
) -> Result<FlowField> {
    check_slice_pair(s_a, s_b)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape);
    let a = tape.leaf(s_a.clone());
    let b = tape.leaf(s_b.clone());
    let flow = flow_forward_t(&mut tape, &bound, cfg, a, b, n)?;
    Ok(FlowField {
        dx: tape.value(flow.dx).clone(),
        dy: tape.value(flow.dy).clone(),
        mask: tape.value(flow.mask).clone(),
    })
}

/// Warp-and-blend synthesis of the intermediate slice from a plain flow.
pub fn synthesize(s_a: &Tensor, s_b: &Tensor, flow: &FlowField, n: f32) -> Result<Tensor> {
    check_slice_pair(s_a, s_b)?;
    let mut tape = Tape::new();
    let a = tape.leaf(s_a.clone());
    let b = tape.leaf(s_b.clone());
    let fv = FlowVars {
        dx: tape.leaf(flow.dx.clone()),
        dy: tape.leaf(flow.dy.clone()),
        mask: tape.leaf(flow.mask.clone()),
    };
    let out = synthesize_t(&mut tape, a, b, fv, n)?;
    Ok(tape.value(out).clone())
}

/// The full interpolator G: flow estimation followed by synthesis.
pub fn interpolate(
    params: &ParamStore,
    cfg: &FlowNetConfig,
    s_a: &Tensor,
    s_b: &Tensor,
    n: f32,
) -> Result<(Tensor, FlowField)> {
    check_slice_pair(s_a, s_b)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape);
    let a = tape.leaf(s_a.clone());
    let b = tape.leaf(s_b.clone());
    let (out, flow) = interpolate_t(&mut tape, &bound, cfg, a, b, n)?;
    Ok((
        tape.value(out).clone(),
        FlowField {
            dx: tape.value(flow.dx).clone(),
            dy: tape.value(flow.dy).clone(),
            mask: tape.value(flow.mask).clone(),
        },
    ))
}

#[cfg(test)]
pub(crate) fn zero_head(store: &mut ParamStore) {
    store.value_mut("head.weight").unwrap().fill(0.0);
    store.value_mut("head.bias").unwrap().fill(0.0);
}

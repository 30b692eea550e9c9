//! Reverse-mode differentiation over a fixed operation set.
//!
//! A forward pass records one [`Node`] per operation on a [`Tape`]. Backward
//! replays the records in reverse, accumulating gradients into per-node
//! buffers. There is no graph pruning and no in-place mutation: each `Var` is
//! an index into the tape, and replaying backward visits every recorded
//! operation exactly once.

use crate::error::{Error, Result};
use crate::numerics::tensor::{same_shape, Tensor};

/// Handle to a tensor slot on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Record {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Deconv2d {
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    BilinearSample {
        source: Var,
        coords_x: Var,
        coords_y: Var,
    },
    TvReg {
        field: Var,
    },
    L1Loss {
        a: Var,
        b: Var,
    },
    SoftDice {
        pred: Var,
        target: Tensor,
    },
    Softmax {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Tensor,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    AddScalar {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    ReflectPad {
        input: Var,
        pad: [usize; 4], // top, bottom, left, right
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
}

struct Node {
    value: Tensor,
    op: Record,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zeros if the node is unreachable.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Record) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Record::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    // ----- convolution -------------------------------------------------

    /// Cross-correlation of `input` [C_in,H,W] with `weights`
    /// [C_out,C_in,k,k] plus `bias` [C_out].
    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let ws = self.value(weights).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv2d weights must be rank 4, got {:?}",
                ws
            )));
        }
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(Error::DimMismatch {
                axis: "conv2d input channels",
                expected: wci,
                got: ci,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be square and odd, got {}x{}",
                kh, kw
            )));
        }
        if self.value(bias).len() != co {
            return Err(Error::DimMismatch {
                axis: "conv2d bias channels",
                expected: co,
                got: self.value(bias).len(),
            });
        }
        let oh = out_size(h, kh, stride, padding)?;
        let ow = out_size(w, kw, stride, padding)?;

        let mut out = Tensor::zeros(&[co, oh, ow]);
        {
            let inp = self.value(input).data();
            let wts = self.value(weights).data();
            let bs = self.value(bias).data();
            conv2d_forward(
                inp,
                wts,
                bs,
                out.data_mut(),
                (ci, h, w),
                (co, oh, ow),
                kh,
                stride,
                padding,
            );
        }
        out.assert_finite("conv2d")?;
        Ok(self.push(
            out,
            Record::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution. `weights` is [C_in,C_out,k,k]; output spatial
    /// size is (H-1)*stride - 2*padding + k.
    pub fn deconv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let ws = self.value(weights).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "deconv2d weights must be rank 4, got {:?}",
                ws
            )));
        }
        let (wci, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(Error::DimMismatch {
                axis: "deconv2d input channels",
                expected: wci,
                got: ci,
            });
        }
        if kh != kw {
            return Err(Error::InvalidShape("deconv2d kernel must be square".into()));
        }
        if self.value(bias).len() != co {
            return Err(Error::DimMismatch {
                axis: "deconv2d bias channels",
                expected: co,
                got: self.value(bias).len(),
            });
        }
        let oh = (h - 1) * stride + kh - 2 * padding;
        let ow = (w - 1) * stride + kw - 2 * padding;

        let mut out = Tensor::zeros(&[co, oh, ow]);
        {
            let inp = self.value(input).data();
            let wts = self.value(weights).data();
            let bs = self.value(bias).data();
            deconv2d_forward(
                inp,
                wts,
                bs,
                out.data_mut(),
                (ci, h, w),
                (co, oh, ow),
                kh,
                stride,
                padding,
            );
        }
        out.assert_finite("deconv2d")?;
        Ok(self.push(
            out,
            Record::Deconv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    // ----- elementwise -------------------------------------------------

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let data: Vec<f32> = self
            .value(input)
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                Activation::Tanh => x.tanh(),
            })
            .collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        self.push(out, Record::Activation { input, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.push(out, Record::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.push(out, Record::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.push(out, Record::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let data: Vec<f32> = self.value(input).data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        self.push(out, Record::Scale { input, factor })
    }

    pub fn add_scalar(&mut self, input: Var, offset: f32) -> Var {
        let data: Vec<f32> = self.value(input).data().iter().map(|&x| x + offset).collect();
        let out = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        self.push(out, Record::AddScalar { input })
    }

    // ----- structural --------------------------------------------------

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let (_, h0, w0) = self.value(inputs[0]).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let (c, h, w) = self.value(v).chw()?;
            if h != h0 || w != w0 {
                return Err(Error::DimMismatch {
                    axis: "concat spatial",
                    expected: h0 * w0,
                    got: h * w,
                });
            }
            c_total += c;
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::new(vec![c_total, h0, w0], data).unwrap();
        Ok(self.push(
            out,
            Record::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Extract `count` channels starting at `start` from a [C,H,W] tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if start + count > c {
            return Err(Error::InvalidShape(format!(
                "channel slice {}..{} out of {} channels",
                start,
                start + count,
                c
            )));
        }
        let plane = h * w;
        let data = self.value(input).data()[start * plane..(start + count) * plane].to_vec();
        let out = Tensor::new(vec![count, h, w], data).unwrap();
        Ok(self.push(out, Record::SliceChannels { input, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).reshaped(shape)?;
        Ok(self.push(out, Record::Reshape { input }))
    }

    /// Reflection padding (edge not repeated) of a [C,H,W] tensor.
    pub fn reflect_pad(&mut self, input: Var, pad: [usize; 4]) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let [top, bottom, left, right] = pad;
        if top >= h || bottom >= h || left >= w || right >= w {
            return Err(Error::InvalidShape(format!(
                "reflect pad {:?} too large for {}x{}",
                pad, h, w
            )));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let src = self.value(input).data();
            let dst = out.data_mut();
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = mirror_index(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let ix = mirror_index(ox as isize - left as isize, w);
                        dst[(ci * oh + oy) * ow + ox] = src[(ci * h + iy) * w + ix];
                    }
                }
            }
        }
        Ok(self.push(out, Record::ReflectPad { input, pad }))
    }

    pub fn crop(&mut self, input: Var, top: usize, left: usize, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if top + oh > h || left + ow > w {
            return Err(Error::InvalidShape(format!(
                "crop {}x{} at ({},{}) exceeds {}x{}",
                oh, ow, top, left, h, w
            )));
        }
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let src = self.value(input).data();
            let dst = out.data_mut();
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(ci * oh + oy) * ow + ox] = src[(ci * h + top + oy) * w + left + ox];
                    }
                }
            }
        }
        Ok(self.push(out, Record::Crop { input, top, left }))
    }

    // ----- sampling ----------------------------------------------------

    /// Bilinear lookup of `source` [1,H,W] at per-pixel coordinates
    /// (`coords_x`, `coords_y`), each [H',W'] in continuous pixel units.
    /// Out-of-bounds coordinates clamp to the border.
    pub fn bilinear_sample(&mut self, source: Var, coords_x: Var, coords_y: Var) -> Result<Var> {
        let (c, sh, sw) = self.value(source).chw()?;
        if c != 1 {
            return Err(Error::InvalidShape(
                "bilinear_sample source must have one channel".into(),
            ));
        }
        same_shape(self.value(coords_x), self.value(coords_y), "coords")?;
        let (cc, ch, cw) = self.value(coords_x).chw()?;
        if cc != 1 {
            return Err(Error::InvalidShape("coordinate maps must be 2-D".into()));
        }
        let mut out = Tensor::zeros(&[1, ch, cw]);
        {
            let src = self.value(source).data();
            let cx = self.value(coords_x).data();
            let cy = self.value(coords_y).data();
            let dst = out.data_mut();
            for i in 0..ch * cw {
                let (v, _, _) = bilinear_at(src, sh, sw, cx[i], cy[i]);
                dst[i] = v;
            }
        }
        out.assert_finite("bilinear_sample")?;
        Ok(self.push(
            out,
            Record::BilinearSample {
                source,
                coords_x,
                coords_y,
            },
        ))
    }

    // ----- reductions --------------------------------------------------

    /// Anisotropic total variation: sum over channels of the L1 norm of
    /// forward differences along height and width.
    pub fn tv_regularizer(&mut self, field: Var) -> Result<Var> {
        let (c, _, _) = self.value(field).chw()?;
        if c > 2 {
            return Err(Error::InvalidShape(format!(
                "tv_regularizer expects 1 or 2 channels, got {}",
                c
            )));
        }
        let t = self.value(field);
        let (c, h, w) = t.chw()?;
        let d = t.data();
        let mut acc = 0.0f64;
        for ci in 0..c {
            let base = ci * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = d[base + y * w + x];
                    if y + 1 < h {
                        acc += (d[base + (y + 1) * w + x] - v).abs() as f64;
                    }
                    if x + 1 < w {
                        acc += (d[base + y * w + x + 1] - v).abs() as f64;
                    }
                }
            }
        }
        let out = Tensor::scalar(acc as f32);
        out.assert_finite("tv_regularizer")?;
        Ok(self.push(out, Record::TvReg { field }))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "l1_loss")?;
        let mut acc = 0.0f64;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += (x - y).abs() as f64;
        }
        let n = self.value(a).len() as f64;
        let out = Tensor::scalar((acc / n) as f32);
        out.assert_finite("l1_loss")?;
        Ok(self.push(out, Record::L1Loss { a, b }))
    }

    /// 1 - mean over channels of the smooth Dice coefficient.
    pub fn soft_dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        same_shape(self.value(pred), target, "soft_dice_loss")?;
        let (l, h, w) = self.value(pred).chw()?;
        let plane = h * w;
        let p = self.value(pred).data();
        let t = target.data();
        let mut dice_sum = 0.0f64;
        for c in 0..l {
            let (mut inter, mut psum, mut tsum) = (0.0f64, 0.0f64, 0.0f64);
            for i in c * plane..(c + 1) * plane {
                inter += (p[i] * t[i]) as f64;
                psum += p[i] as f64;
                tsum += t[i] as f64;
            }
            dice_sum += (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
        }
        let out = Tensor::scalar((1.0 - dice_sum / l as f64) as f32);
        out.assert_finite("soft_dice_loss")?;
        Ok(self.push(
            out,
            Record::SoftDice {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Channel softmax of a [C,H,W] tensor, per pixel.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let dst = out.data_mut();
            for i in 0..plane {
                let mut m = f32::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[ci * plane + i]);
                }
                let mut z = 0.0f32;
                for ci in 0..c {
                    let e = (src[ci * plane + i] - m).exp();
                    dst[ci * plane + i] = e;
                    z += e;
                }
                for ci in 0..c {
                    dst[ci * plane + i] /= z;
                }
            }
        }
        out.assert_finite("softmax")?;
        Ok(self.push(out, Record::Softmax { input }))
    }

    /// Mean pixelwise cross-entropy between channel-softmaxed `logits` and a
    /// one-hot target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        same_shape(self.value(logits), target, "softmax_cross_entropy")?;
        let (c, h, w) = self.value(logits).chw()?;
        let plane = h * w;
        let src = self.value(logits).data();
        let t = target.data();
        let mut acc = 0.0f64;
        for i in 0..plane {
            let mut m = f32::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(src[ci * plane + i]);
            }
            let mut z = 0.0f64;
            for ci in 0..c {
                z += ((src[ci * plane + i] - m) as f64).exp();
            }
            let logz = z.ln();
            for ci in 0..c {
                if t[ci * plane + i] > 0.0 {
                    acc -= t[ci * plane + i] as f64
                        * ((src[ci * plane + i] - m) as f64 - logz);
                }
            }
        }
        let out = Tensor::scalar((acc / plane as f64) as f32);
        out.assert_finite("softmax_cross_entropy")?;
        Ok(self.push(
            out,
            Record::SoftmaxCrossEntropy {
                logits,
                target: target.clone(),
            },
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Nodes not on a path to the loss
    /// keep a `None` gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Record::Leaf => {}
            Record::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let (ci, h, w) = self.value(*input).chw().unwrap();
                let (co, oh, ow) = node.value.chw().unwrap();
                let k = self.value(*weights).shape()[2];
                let gin = ensure(grads, *input, self.value(*input).shape());
                conv2d_backward_input(
                    gout.data(),
                    self.nodes[weights.0].value.data(),
                    gin.data_mut(),
                    (ci, h, w),
                    (co, oh, ow),
                    k,
                    *stride,
                    *padding,
                );
                let gw = ensure(grads, *weights, self.value(*weights).shape());
                conv2d_backward_weights(
                    gout.data(),
                    self.nodes[input.0].value.data(),
                    gw.data_mut(),
                    (ci, h, w),
                    (co, oh, ow),
                    k,
                    *stride,
                    *padding,
                );
                let gb = ensure(grads, *bias, self.value(*bias).shape());
                for c in 0..co {
                    let mut s = 0.0f32;
                    for v in &gout.data()[c * oh * ow..(c + 1) * oh * ow] {
                        s += v;
                    }
                    gb.data_mut()[c] += s;
                }
            }
            Record::Deconv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let (ci, h, w) = self.value(*input).chw().unwrap();
                let (co, oh, ow) = node.value.chw().unwrap();
                let k = self.value(*weights).shape()[2];
                let gin = ensure(grads, *input, self.value(*input).shape());
                deconv2d_backward_input(
                    gout.data(),
                    self.nodes[weights.0].value.data(),
                    gin.data_mut(),
                    (ci, h, w),
                    (co, oh, ow),
                    k,
                    *stride,
                    *padding,
                );
                let gw = ensure(grads, *weights, self.value(*weights).shape());
                deconv2d_backward_weights(
                    gout.data(),
                    self.nodes[input.0].value.data(),
                    gw.data_mut(),
                    (ci, h, w),
                    (co, oh, ow),
                    k,
                    *stride,
                    *padding,
                );
                let gb = ensure(grads, *bias, self.value(*bias).shape());
                for c in 0..co {
                    let mut s = 0.0f32;
                    for v in &gout.data()[c * oh * ow..(c + 1) * oh * ow] {
                        s += v;
                    }
                    gb.data_mut()[c] += s;
                }
            }
            Record::Activation { input, kind } => {
                let gin = ensure(grads, *input, self.value(*input).shape());
                let out = node.value.data();
                for i in 0..out.len() {
                    let d = match kind {
                        // subgradient 0 at the ReLU kink
                        Activation::Relu => {
                            if out[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => out[i] * (1.0 - out[i]),
                        Activation::Tanh => 1.0 - out[i] * out[i],
                    };
                    gin.data_mut()[i] += gout.data()[i] * d;
                }
            }
            Record::BilinearSample {
                source,
                coords_x,
                coords_y,
            } => {
                let (_, sh, sw) = self.value(*source).chw().unwrap();
                let src = self.nodes[source.0].value.data().to_vec();
                let cx = self.nodes[coords_x.0].value.data().to_vec();
                let cy = self.nodes[coords_y.0].value.data().to_vec();

                let n = cx.len();
                let mut gsrc = vec![0.0f32; src.len()];
                let mut gcx = vec![0.0f32; n];
                let mut gcy = vec![0.0f32; n];
                for i in 0..n {
                    bilinear_backward_at(
                        &src,
                        sh,
                        sw,
                        cx[i],
                        cy[i],
                        gout.data()[i],
                        &mut gsrc,
                        &mut gcx[i],
                        &mut gcy[i],
                    );
                }
                let gs = ensure(grads, *source, self.value(*source).shape());
                for (g, d) in gs.data_mut().iter_mut().zip(&gsrc) {
                    *g += d;
                }
                let gx = ensure(grads, *coords_x, self.value(*coords_x).shape());
                for (g, d) in gx.data_mut().iter_mut().zip(&gcx) {
                    *g += d;
                }
                let gy = ensure(grads, *coords_y, self.value(*coords_y).shape());
                for (g, d) in gy.data_mut().iter_mut().zip(&gcy) {
                    *g += d;
                }
            }
            Record::TvReg { field } => {
                let g = gout.item();
                let t = &self.nodes[field.0].value;
                let (c, h, w) = t.chw().unwrap();
                let d = t.data().to_vec();
                let gf = ensure(grads, *field, t.shape());
                let gd = gf.data_mut();
                for ci in 0..c {
                    let base = ci * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let i = base + y * w + x;
                            if y + 1 < h {
                                let j = base + (y + 1) * w + x;
                                let s = sign0(d[j] - d[i]);
                                gd[j] += g * s;
                                gd[i] -= g * s;
                            }
                            if x + 1 < w {
                                let j = base + y * w + x + 1;
                                let s = sign0(d[j] - d[i]);
                                gd[j] += g * s;
                                gd[i] -= g * s;
                            }
                        }
                    }
                }
            }
            Record::L1Loss { a, b } => {
                let g = gout.item() / self.value(*a).len() as f32;
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let ga = ensure(grads, *a, self.value(*a).shape());
                for i in 0..av.len() {
                    ga.data_mut()[i] += g * sign0(av[i] - bv[i]);
                }
                let gb = ensure(grads, *b, self.value(*b).shape());
                for i in 0..av.len() {
                    gb.data_mut()[i] -= g * sign0(av[i] - bv[i]);
                }
            }
            Record::SoftDice { pred, target } => {
                let g = gout.item();
                let t = target.data();
                let pv = self.nodes[pred.0].value.data().to_vec();
                let (l, h, w) = self.value(*pred).chw().unwrap();
                let plane = h * w;
                let gp = ensure(grads, *pred, self.value(*pred).shape());
                for c in 0..l {
                    let (mut inter, mut psum, mut tsum) = (0.0f64, 0.0f64, 0.0f64);
                    for i in c * plane..(c + 1) * plane {
                        inter += (pv[i] * t[i]) as f64;
                        psum += pv[i] as f64;
                        tsum += t[i] as f64;
                    }
                    let num = 2.0 * inter + DICE_EPS;
                    let den = psum + tsum + DICE_EPS;
                    for i in c * plane..(c + 1) * plane {
                        // d(1 - dice/L)/dp = -(2 t den - num) / (L den^2)
                        let ddice = (2.0 * t[i] as f64 * den - num) / (den * den);
                        gp.data_mut()[i] -= g * (ddice / l as f64) as f32;
                    }
                }
            }
            Record::Softmax { input } => {
                let out = node.value.data().to_vec();
                let (c, h, w) = node.value.chw().unwrap();
                let plane = h * w;
                let gin = ensure(grads, *input, self.value(*input).shape());
                for i in 0..plane {
                    let mut dot = 0.0f32;
                    for ci in 0..c {
                        dot += out[ci * plane + i] * gout.data()[ci * plane + i];
                    }
                    for ci in 0..c {
                        let j = ci * plane + i;
                        gin.data_mut()[j] += out[j] * (gout.data()[j] - dot);
                    }
                }
            }
            Record::SoftmaxCrossEntropy { logits, target } => {
                let g = gout.item();
                let (c, h, w) = self.value(*logits).chw().unwrap();
                let plane = h * w;
                let src = self.nodes[logits.0].value.data().to_vec();
                let t = target.data();
                let gl = ensure(grads, *logits, self.value(*logits).shape());
                for i in 0..plane {
                    let mut m = f32::NEG_INFINITY;
                    for ci in 0..c {
                        m = m.max(src[ci * plane + i]);
                    }
                    let mut z = 0.0f32;
                    for ci in 0..c {
                        z += (src[ci * plane + i] - m).exp();
                    }
                    for ci in 0..c {
                        let j = ci * plane + i;
                        let p = (src[j] - m).exp() / z;
                        gl.data_mut()[j] += g * (p - t[j]) / plane as f32;
                    }
                }
            }
            Record::Add { a, b } => {
                let ga = ensure(grads, *a, self.value(*a).shape());
                for (g, d) in ga.data_mut().iter_mut().zip(gout.data()) {
                    *g += d;
                }
                let gb = ensure(grads, *b, self.value(*b).shape());
                for (g, d) in gb.data_mut().iter_mut().zip(gout.data()) {
                    *g += d;
                }
            }
            Record::Sub { a, b } => {
                let ga = ensure(grads, *a, self.value(*a).shape());
                for (g, d) in ga.data_mut().iter_mut().zip(gout.data()) {
                    *g += d;
                }
                let gb = ensure(grads, *b, self.value(*b).shape());
                for (g, d) in gb.data_mut().iter_mut().zip(gout.data()) {
                    *g -= d;
                }
            }
            Record::Mul { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let ga = ensure(grads, *a, self.value(*a).shape());
                for i in 0..av.len() {
                    ga.data_mut()[i] += gout.data()[i] * bv[i];
                }
                let gb = ensure(grads, *b, self.value(*b).shape());
                for i in 0..av.len() {
                    gb.data_mut()[i] += gout.data()[i] * av[i];
                }
            }
            Record::Scale { input, factor } => {
                let gin = ensure(grads, *input, self.value(*input).shape());
                for (g, d) in gin.data_mut().iter_mut().zip(gout.data()) {
                    *g += d * factor;
                }
            }
            Record::AddScalar { input } => {
                let gin = ensure(grads, *input, self.value(*input).shape());
                for (g, d) in gin.data_mut().iter_mut().zip(gout.data()) {
                    *g += d;
                }
            }
            Record::Concat { inputs } => {
                let mut offset = 0usize;
                for &v in inputs {
                    let n = self.value(v).len();
                    let gv = ensure(grads, v, self.value(v).shape());
                    for (g, d) in gv
                        .data_mut()
                        .iter_mut()
                        .zip(&gout.data()[offset..offset + n])
                    {
                        *g += d;
                    }
                    offset += n;
                }
            }
            Record::SliceChannels { input, start } => {
                let (_, h, w) = self.value(*input).chw().unwrap();
                let plane = h * w;
                let gin = ensure(grads, *input, self.value(*input).shape());
                let base = start * plane;
                for (i, d) in gout.data().iter().enumerate() {
                    gin.data_mut()[base + i] += d;
                }
            }
            Record::Reshape { input } => {
                let gin = ensure(grads, *input, self.value(*input).shape());
                for (g, d) in gin.data_mut().iter_mut().zip(gout.data()) {
                    *g += d;
                }
            }
            Record::ReflectPad { input, pad } => {
                let (c, h, w) = self.value(*input).chw().unwrap();
                let [top, _, left, _] = *pad;
                let (_, oh, ow) = node.value.chw().unwrap();
                let gin = ensure(grads, *input, self.value(*input).shape());
                for ci in 0..c {
                    for oy in 0..oh {
                        let iy = mirror_index(oy as isize - top as isize, h);
                        for ox in 0..ow {
                            let ix = mirror_index(ox as isize - left as isize, w);
                            gin.data_mut()[(ci * h + iy) * w + ix] +=
                                gout.data()[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            Record::Crop { input, top, left } => {
                let (c, h, w) = self.value(*input).chw().unwrap();
                let (_, oh, ow) = node.value.chw().unwrap();
                let gin = ensure(grads, *input, self.value(*input).shape());
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gin.data_mut()[(ci * h + top + oy) * w + left + ox] +=
                                gout.data()[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub const DICE_EPS: f64 = 1e-5;

fn sign0(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    if grads[v.0].is_none() {
        grads[v.0] = Some(Tensor::zeros(shape));
    }
    grads[v.0].as_mut().unwrap()
}

fn out_size(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return Err(Error::InvalidShape(format!(
            "kernel {} larger than padded input {}",
            k, padded
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j as usize
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    inp: &[f32],
    wts: &[f32],
    bias: &[f32],
    out: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..co {
        let ob = c * oh * ow;
        out[ob..ob + oh * ow].fill(bias[c]);
        for ic in 0..ci {
            let wb = (c * ci + ic) * k * k;
            let ib = ic * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wts[wb + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = ib + iy as usize * w;
                        let orow = ob + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[orow + ox] += wv * inp[row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gout: &[f32],
    wts: &[f32],
    gin: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..co {
        let ob = c * oh * ow;
        for ic in 0..ci {
            let wb = (c * ci + ic) * k * k;
            let ib = ic * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wts[wb + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = ib + iy as usize * w;
                        let orow = ob + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gin[row + ix as usize] += wv * gout[orow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weights(
    gout: &[f32],
    inp: &[f32],
    gw: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..co {
        let ob = c * oh * ow;
        for ic in 0..ci {
            let wb = (c * ci + ic) * k * k;
            let ib = ic * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = ib + iy as usize * w;
                        let orow = ob + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += gout[orow + ox] * inp[row + ix as usize];
                        }
                    }
                    gw[wb + ky * k + kx] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv2d_forward(
    inp: &[f32],
    wts: &[f32],
    bias: &[f32],
    out: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..co {
        let ob = c * oh * ow;
        out[ob..ob + oh * ow].fill(bias[c]);
    }
    for ic in 0..ci {
        let ib = ic * h * w;
        for c in 0..co {
            let ob = c * oh * ow;
            let wb = (ic * co + c) * k * k;
            for iy in 0..h {
                for ix in 0..w {
                    let v = inp[ib + iy * w + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let orow = ob + oy as usize * ow;
                        let wrow = wb + ky * k;
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            out[orow + ox as usize] += v * wts[wrow + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv2d_backward_input(
    gout: &[f32],
    wts: &[f32],
    gin: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for ic in 0..ci {
        let ib = ic * h * w;
        for c in 0..co {
            let ob = c * oh * ow;
            let wb = (ic * co + c) * k * k;
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let orow = ob + oy as usize * ow;
                        let wrow = wb + ky * k;
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            acc += gout[orow + ox as usize] * wts[wrow + kx];
                        }
                    }
                    gin[ib + iy * w + ix] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv2d_backward_weights(
    gout: &[f32],
    inp: &[f32],
    gw: &mut [f32],
    (ci, h, w): (usize, usize, usize),
    (co, oh, ow): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) {
    for ic in 0..ci {
        let ib = ic * h * w;
        for c in 0..co {
            let ob = c * oh * ow;
            let wb = (ic * co + c) * k * k;
            for iy in 0..h {
                for ix in 0..w {
                    let v = inp[ib + iy * w + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let orow = ob + oy as usize * ow;
                        let wrow = wb + ky * k;
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            gw[wrow + kx] += v * gout[orow + ox as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Clamped bilinear lookup; returns (value, d/dcx, d/dcy).
fn bilinear_at(src: &[f32], h: usize, w: usize, cx: f32, cy: f32) -> (f32, f32, f32) {
    let max_x = (w - 1) as f32;
    let max_y = (h - 1) as f32;
    let xc = cx.clamp(0.0, max_x);
    let yc = cy.clamp(0.0, max_y);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    let v00 = src[y0 * w + x0];
    let v01 = src[y0 * w + x1];
    let v10 = src[y1 * w + x0];
    let v11 = src[y1 * w + x1];
    let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    // clamp zeroes the coordinate derivative outside the valid range
    let dx = if cx < 0.0 || cx > max_x {
        0.0
    } else {
        (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    };
    let dy = if cy < 0.0 || cy > max_y {
        0.0
    } else {
        (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    };
    (value, dx, dy)
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward_at(
    src: &[f32],
    h: usize,
    w: usize,
    cx: f32,
    cy: f32,
    g: f32,
    gsrc: &mut [f32],
    gcx: &mut f32,
    gcy: &mut f32,
) {
    let max_x = (w - 1) as f32;
    let max_y = (h - 1) as f32;
    let xc = cx.clamp(0.0, max_x);
    let yc = cy.clamp(0.0, max_y);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f32;
    let fy = yc - y0 as f32;
    gsrc[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
    gsrc[y0 * w + x1] += g * (1.0 - fy) * fx;
    gsrc[y1 * w + x0] += g * fy * (1.0 - fx);
    gsrc[y1 * w + x1] += g * fy * fx;
    let (_, dx, dy) = bilinear_at(src, h, w, cx, cy);
    *gcx += g * dx;
    *gcy += g * dy;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_output_size_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d(x, w, b, 1, 1),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn deconv_size_contract() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.deconv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4]);
    }

    #[test]
    fn deconv_zero_weights_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 3.0));
        let w = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.leaf(t(&[2], &[0.5, -1.5]));
        let y = tape.deconv2d(x, w, b, 2, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 4, 4]);
        assert!(v.data()[..16].iter().all(|&x| x == 0.5));
        assert!(v.data()[16..].iter().all(|&x| x == -1.5));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.activation(z, Activation::Sigmoid);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.activation(x, Activation::Tanh);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(&tape, x).item(), 1.0);
    }

    #[test]
    fn bilinear_identity_is_exact() {
        let mut tape = Tape::new();
        let src_data: Vec<f32> = (0..20).map(|i| i as f32 * 0.37 - 2.0).collect();
        let src = tape.leaf(t(&[1, 4, 5], &src_data));
        let mut cx = Tensor::zeros(&[4, 5]);
        let mut cy = Tensor::zeros(&[4, 5]);
        for y in 0..4 {
            for x in 0..5 {
                cx.data_mut()[y * 5 + x] = x as f32;
                cy.data_mut()[y * 5 + x] = y as f32;
            }
        }
        let cxv = tape.leaf(cx);
        let cyv = tape.leaf(cy);
        let out = tape.bilinear_sample(src, cxv, cyv).unwrap();
        assert_eq!(&tape.value(out).data()[..], &src_data[..]);
    }

    #[test]
    fn bilinear_half_pixel_shift_on_ramp() {
        // horizontal ramp v(x) = x; shift by +0.5 averages neighbors
        let mut tape = Tape::new();
        let mut src = Tensor::zeros(&[1, 3, 4]);
        for y in 0..3 {
            for x in 0..4 {
                src.data_mut()[y * 4 + x] = x as f32;
            }
        }
        let src = tape.leaf(src);
        let mut cx = Tensor::zeros(&[3, 4]);
        let mut cy = Tensor::zeros(&[3, 4]);
        for y in 0..3 {
            for x in 0..4 {
                cx.data_mut()[y * 4 + x] = x as f32 + 0.5;
                cy.data_mut()[y * 4 + x] = y as f32;
            }
        }
        let cxv = tape.leaf(cx);
        let cyv = tape.leaf(cy);
        let out = tape.bilinear_sample(src, cxv, cyv).unwrap();
        // interior columns: x + 0.5; last column clamps to 3.0
        for y in 0..3 {
            for x in 0..3 {
                assert!((tape.value(out).data()[y * 4 + x] - (x as f32 + 0.5)).abs() < 1e-6);
            }
            assert_eq!(tape.value(out).data()[y * 4 + 3], 3.0);
        }
    }

    #[test]
    fn tv_examples() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[1, 4, 4], 0.7));
        let tv = tape.tv_regularizer(c).unwrap();
        assert_eq!(tape.value(tv).item(), 0.0);

        let f = tape.leaf(t(&[1, 1, 2], &[0.0, 3.0]));
        let tv = tape.tv_regularizer(f).unwrap();
        assert_eq!(tape.value(tv).item(), 3.0);
    }

    #[test]
    fn tv_matches_brute_force() {
        let mut tape = Tape::new();
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f32 / u32::MAX as f32) * 4.0 - 2.0
        };
        let data: Vec<f32> = (0..2 * 5 * 5).map(|_| next()).collect();
        let f = tape.leaf(t(&[2, 5, 5], &data));
        let tv = tape.tv_regularizer(f).unwrap();
        let mut expect = 0.0f32;
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let i = c * 25 + y * 5 + x;
                    if y < 4 {
                        expect += (data[i + 5] - data[i]).abs();
                    }
                    if x < 4 {
                        expect += (data[i + 1] - data[i]).abs();
                    }
                }
            }
        }
        assert!((tape.value(tv).item() - expect).abs() < 1e-4);
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[0.0, 0.0]));
        let b = tape.leaf(t(&[2], &[1.0, 3.0]));
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let l0 = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
    }

    #[test]
    fn dice_perfect_and_empty() {
        let mut tape = Tape::new();
        let mut target = Tensor::zeros(&[2, 4, 4]);
        for i in 0..8 {
            target.data_mut()[i] = 1.0;
        }
        let perfect = tape.leaf(target.clone());
        let l = tape.soft_dice_loss(perfect, &target).unwrap();
        assert!(tape.value(l).item() <= 1e-4);

        let zeros = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let l = tape.soft_dice_loss(zeros, &target).unwrap();
        // first channel has 8 fg pixels -> dice ~ 0; second channel empty -> dice 1
        assert!((tape.value(l).item() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dice_half_overlap_rectangles() {
        // A = columns 0..4, B = columns 2..6 on an 8-wide single-channel map
        let (h, w) = (4usize, 8usize);
        let mut pred = Tensor::zeros(&[1, h, w]);
        let mut target = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..4 {
                pred.data_mut()[y * w + x] = 1.0;
            }
            for x in 2..6 {
                target.data_mut()[y * w + x] = 1.0;
            }
        }
        let inter = (h * 2) as f32;
        let expect = 1.0 - 2.0 * inter / ((h * 4 + h * 4) as f32);
        let mut tape = Tape::new();
        let p = tape.leaf(pred);
        let l = tape.soft_dice_loss(p, &target).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 1, 2], &[0.5, -1.0, 2.0, 0.0, -0.3, 1.7]));
        let p = tape.softmax(x).unwrap();
        let d = tape.value(p).data();
        for i in 0..2 {
            let s: f32 = (0..3).map(|c| d[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_visits_unreachable_as_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let _orphan = tape.leaf(Tensor::scalar(5.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let s = tape.mul(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(&tape, a).item(), 3.0);
        assert_eq!(g.get(&tape, b).item(), 2.0);
        assert!(g.get_ref(_orphan).is_none());
    }

    #[test]
    fn reflect_pad_round_trips_through_crop() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let x = tape.leaf(t(&[1, 3, 4], &data));
        let p = tape.reflect_pad(x, [1, 2, 2, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 6, 7]);
        let c = tape.crop(p, 1, 2, 3, 4).unwrap();
        assert_eq!(tape.value(c).data(), &data[..]);
    }
}

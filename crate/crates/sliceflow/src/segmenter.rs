//! Small slice-wise UNet (background / liver / lesion) used two ways: frozen,
//! to supply the attention loss during fine-tuning, and as the downstream
//! segmenter when measuring the effect of interpolation on Dice.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::Activation;
use crate::numerics::{
    adam_step, he_normal, AdamConfig, AdamState, BoundParams, ParamStore, Tape, Tensor, Var,
};
use crate::volume::{LabelMap, SegVolume, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub output_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 16,
            output_channels: 3,
        }
    }
}

impl UNetConfig {
    fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn to_sidecar(&self) -> String {
        format!(
            "depth = {}\nbase_channels = {}\noutput_channels = {}\n",
            self.depth, self.base_channels, self.output_channels
        )
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut cfg = UNetConfig::default();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Invalid(format!("bad segmenter config line: {line}"));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let value: usize = value.trim().parse().map_err(|_| bad())?;
            match key.trim() {
                "depth" => cfg.depth = value,
                "base_channels" => cfg.base_channels = value,
                "output_channels" => cfg.output_channels = value,
                _ => return Err(bad()),
            }
        }
        Ok(cfg)
    }

    pub fn write_sidecar(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

/// Seeded UNet parameters. Layer widths double per level from
/// `base_channels`.
pub fn init_params(cfg: &UNetConfig, seed: u64) -> ParamStore {
    assert_eq!(cfg.depth, 3, "only depth-3 UNets are wired up");
    let mut store = ParamStore::new(seed);
    let mut rng = store.rng();
    let b = cfg.base_channels;
    let (c1, c2, c3) = (b, 2 * b, 4 * b);

    let mut conv = |store: &mut ParamStore, name: &str, ci: usize, co: usize, gain: f32| {
        store.insert(
            &format!("{name}.weight"),
            he_normal(&[co, ci, 3, 3], ci * 9, gain, &mut rng),
        );
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[co]));
    };
    conv(&mut store, "e1", 1, c1, 1.0);
    conv(&mut store, "e2", c1, c2, 1.0);
    conv(&mut store, "e3", c2, c3, 1.0);
    conv(&mut store, "bott", c3, c3, 1.0);

    let mut rng2 = store.rng();
    let mut deconv = |store: &mut ParamStore, name: &str, ci: usize, co: usize| {
        store.insert(
            &format!("{name}.weight"),
            he_normal(&[ci, co, 4, 4], ci * 16, 1.0, &mut rng2),
        );
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[co]));
    };
    deconv(&mut store, "u3", c3, c3);
    deconv(&mut store, "u2", c3 + c3, c2);
    deconv(&mut store, "u1", c2 + c2, c1);

    let mut rng3 = store.rng();
    store.insert(
        "head.weight",
        he_normal(&[cfg.output_channels, c1 + c1, 3, 3], (c1 + c1) * 9, 0.1, &mut rng3),
    );
    store.insert("head.bias", Tensor::zeros(&[cfg.output_channels]));
    store
}

/// Per-pixel class logits on the tape. Pads to a multiple of 2^depth and
/// crops back.
pub fn logits_t(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &UNetConfig,
    slice: Var,
) -> Result<Var> {
    let (_, h, w) = tape.value(slice).chw()?;
    let div = cfg.divisor();
    let (ph, pw) = (h.next_multiple_of(div), w.next_multiple_of(div));
    let x3 = tape.reshape(slice, vec![1, h, w])?;
    let x = if (ph, pw) != (h, w) {
        tape.reflect_pad(x3, [0, ph - h, 0, pw - w])?
    } else {
        x3
    };

    let layer = |tape: &mut Tape, x: Var, name: &str, stride: usize| -> Result<Var> {
        let y = tape.conv2d(
            x,
            params.var(&format!("{name}.weight")),
            params.var(&format!("{name}.bias")),
            stride,
            1,
        )?;
        Ok(tape.activation(y, Activation::Relu))
    };
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

    let e1 = layer(tape, x, "e1", 1)?;
    let e2 = layer(tape, e1, "e2", 2)?;
    let e3 = layer(tape, e2, "e3", 2)?;
    let bn = layer(tape, e3, "bott", 2)?;
    let mut y = up(tape, bn, "u3")?;
    y = tape.concat_channels(&[y, e3])?;
    y = up(tape, y, "u2")?;
    y = tape.concat_channels(&[y, e2])?;
    y = up(tape, y, "u1")?;
    y = tape.concat_channels(&[y, e1])?;
    let logits = tape.conv2d(y, params.var("head.weight"), params.var("head.bias"), 1, 1)?;
    if (ph, pw) != (h, w) {
        tape.crop(logits, 0, 0, h, w)
    } else {
        Ok(logits)
    }
}

/// Softmax probability map [classes, H, W] for one normalized slice.
pub fn segment(params: &ParamStore, cfg: &UNetConfig, slice: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape);
    let s = tape.leaf(slice.clone());
    let logits = logits_t(&mut tape, &bound, cfg, s)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

/// Argmax labels for one slice.
pub fn segment_labels(params: &ParamStore, cfg: &UNetConfig, slice: &Tensor) -> Result<LabelMap> {
    let probs = segment(params, cfg, slice)?;
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0u8;
            let mut best_v = f32::NEG_INFINITY;
            for ci in 0..c {
                let v = probs.data()[ci * plane + i];
                if v > best_v {
                    best_v = v;
                    best = ci as u8;
                }
            }
            best
        })
        .collect();
    Ok(LabelMap { h, w, labels })
}

/// Train the UNet on (slice, labels) pairs with soft Dice + cross-entropy
/// (equal weights). Returns the parameters and the mean loss per epoch.
pub fn train_segmenter(
    dataset: &[(Tensor, LabelMap)],
    cfg: &UNetConfig,
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<(ParamStore, Vec<f32>)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty segmenter training set".into()));
    }
    let mut params = init_params(cfg, seed);
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for &i in &order {
            let (slice, labels) = &dataset[i];
            let onehot = labels.onehot(cfg.output_channels);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape);
            let s = tape.leaf(slice.clone());
            let logits = logits_t(&mut tape, &bound, cfg, s)?;
            let probs = tape.softmax(logits)?;
            let dice = tape.soft_dice_loss(probs, &onehot)?;
            let ce = tape.softmax_cross_entropy(logits, &onehot)?;
            let loss = tape.add(dice, ce)?;
            let grads = tape.backward(loss)?;
            let leaves = bound.vars().to_vec();
            drop(bound);
            params.zero_grads();
            params.accumulate_grads(&tape, &leaves, &grads, 1.0);
            adam_step(&mut params, &mut state, &adam)?;
            total += tape.value(loss).item() as f64;
        }
        epoch_losses.push((total / order.len() as f64) as f32);
    }
    Ok((params, epoch_losses))
}

/// Segment a normalized volume slice-wise, then clean up in 3-D: keep the
/// largest liver component and drop lesion components below `min_lesion_vox`
/// voxels.
pub fn segment_volume(
    params: &ParamStore,
    cfg: &UNetConfig,
    volume: &Volume,
    min_lesion_vox: usize,
) -> Result<SegVolume> {
    let (nz, ny, nx) = volume.shape();
    let mut labels = Vec::with_capacity(nz * ny * nx);
    for z in 0..nz {
        let m = segment_labels(params, cfg, &volume.slice(z))?;
        labels.extend_from_slice(&m.labels);
    }
    keep_largest_component(&mut labels, (nz, ny, nx), 1);
    drop_small_components(&mut labels, (nz, ny, nx), 2, min_lesion_vox);
    SegVolume::new((nz, ny, nx), volume.spacing(), labels)
}

fn components(
    labels: &[u8],
    (nz, ny, nx): (usize, usize, usize),
    class_id: u8,
) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut comps = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != class_id || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let z = i / (ny * nx);
            let y = (i / nx) % ny;
            let x = i % nx;
            let mut push = |j: usize| {
                if labels[j] == class_id && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if z > 0 {
                push(i - ny * nx);
            }
            if z + 1 < nz {
                push(i + ny * nx);
            }
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
        }
        comps.push(comp);
    }
    comps
}

fn keep_largest_component(labels: &mut [u8], shape: (usize, usize, usize), class_id: u8) {
    let comps = components(labels, shape, class_id);
    if comps.len() <= 1 {
        return;
    }
    let largest = comps
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (c.len(), usize::MAX - i))
        .map(|(i, _)| i)
        .unwrap();
    for (i, comp) in comps.iter().enumerate() {
        if i != largest {
            for &v in comp {
                labels[v] = 0;
            }
        }
    }
}

fn drop_small_components(
    labels: &mut [u8],
    shape: (usize, usize, usize),
    class_id: u8,
    min_vox: usize,
) {
    for comp in components(labels, shape, class_id) {
        if comp.len() < min_vox {
            for v in comp {
                labels[v] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_sample(h: usize, w: usize, cx: f32, cy: f32, r: f32) -> (Tensor, LabelMap) {
        let mut img = Tensor::zeros(&[h, w]);
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                if d < r {
                    img.data_mut()[y * w + x] = 0.8;
                    labels[y * w + x] = 1;
                } else {
                    img.data_mut()[y * w + x] = 0.2;
                }
            }
        }
        (img, LabelMap { h, w, labels })
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 1);
        let (img, _) = disk_sample(16, 16, 8.0, 8.0, 4.0);
        let probs = segment(&params, &cfg, &img).unwrap();
        let plane = 16 * 16;
        for i in 0..plane {
            let s: f32 = (0..3).map(|c| probs.data()[c * plane + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_head_gives_uniform_thirds() {
        let cfg = UNetConfig::default();
        let mut params = init_params(&cfg, 1);
        params.value_mut("head.weight").unwrap().fill(0.0);
        params.value_mut("head.bias").unwrap().fill(0.0);
        let (img, _) = disk_sample(16, 16, 8.0, 8.0, 4.0);
        let probs = segment(&params, &cfg, &img).unwrap();
        assert!(probs
            .data()
            .iter()
            .all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn one_sample_overfits_to_near_zero_loss() {
        let cfg = UNetConfig::default();
        let data = vec![disk_sample(16, 16, 8.0, 8.0, 5.0)];
        let (_, losses) = train_segmenter(&data, &cfg, 60, 3e-3, 7).unwrap();
        let last = *losses.last().unwrap();
        assert!(
            last < 0.15,
            "expected near-zero loss on one sample, got {last}"
        );
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let cfg = UNetConfig::default();
        let mut data = Vec::new();
        for i in 0..12 {
            let cx = 5.0 + (i % 4) as f32 * 2.0;
            let cy = 5.0 + (i / 4) as f32 * 2.0;
            data.push(disk_sample(16, 16, cx, cy, 3.5));
        }
        let (_, a) = train_segmenter(&data, &cfg, 5, 1e-3, 42).unwrap();
        assert!(
            a.last().unwrap() < a.first().unwrap(),
            "losses did not decrease: {a:?}"
        );
        let (_, b) = train_segmenter(&data, &cfg, 5, 1e-3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_segmenter(&[], &UNetConfig::default(), 1, 1e-3, 0).is_err());
    }

    #[test]
    fn component_cleanup_removes_islands() {
        // 1-voxel liver island away from a big liver block; tiny lesion speck
        let (nz, ny, nx) = (3usize, 6usize, 6usize);
        let mut labels = vec![0u8; nz * ny * nx];
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    labels[(z * ny + y) * nx + x] = 1;
                }
            }
        }
        labels[(1 * ny + 5) * nx + 5] = 1; // island
        labels[(1 * ny + 1) * nx + 1] = 2; // lone lesion voxel
        let mut work = labels.clone();
        keep_largest_component(&mut work, (nz, ny, nx), 1);
        assert_eq!(work[(1 * ny + 5) * nx + 5], 0);
        drop_small_components(&mut work, (nz, ny, nx), 2, 2);
        assert_eq!(work[(1 * ny + 1) * nx + 1], 0);
    }
}

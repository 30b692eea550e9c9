//! Image-quality and segmentation-overlap metrics, plus the CSV report
//! format every command writes.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::numerics::tensor::same_shape;

/// PSNR in dB over a peak signal of `peak`. Identical inputs cap at 99.0
/// rather than +inf. `mask` restricts the mean squared error to selected
/// elements; an all-false mask is an error.
pub fn psnr(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>, peak: f32) -> Result<f32> {
    same_shape(pred, gt, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::Invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for i in 0..pred.data().len() {
        if let Some(m) = mask {
            if m.len() != pred.data().len() {
                return Err(Error::DimMismatch {
                    axis: "psnr mask".into(),
                    expected: pred.data().len(),
                    got: m.len(),
                });
            }
            if !m[i] {
                continue;
            }
        }
        let d = (pred.data()[i] - gt.data()[i]) as f64;
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyRoi);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    let db = 10.0 * ((peak as f64 * peak as f64) / mse).log10();
    Ok((db as f32).min(99.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Horizontal then vertical pass of the 1-D Gaussian, valid region only.
/// Input h*w, output (h-10)*(w-10).
fn gauss_filter_valid(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * img[y * w + x + i];
            }
            horiz[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean SSIM over valid (fully inside) 11x11 Gaussian windows. With a mask,
/// only windows whose center pixel is selected contribute; an empty
/// selection is an error. Inputs must be at least 11x11.
pub fn ssim(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>, peak: f32) -> Result<f32> {
    same_shape(pred, gt, "ssim")?;
    let (c, h, w) = pred.chw()?;
    if c != 1 {
        return Err(Error::Invalid(format!("ssim expects one slice, got {c} channels")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::DimMismatch {
                axis: "ssim mask".into(),
                expected: h * w,
                got: m.len(),
            });
        }
    }
    let a: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();

    let mu_a = gauss_filter_valid(&a, h, w);
    let mu_b = gauss_filter_valid(&b, h, w);
    let m_aa = gauss_filter_valid(&aa, h, w);
    let m_bb = gauss_filter_valid(&bb, h, w);
    let m_ab = gauss_filter_valid(&ab, h, w);

    let l = peak as f64;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let half = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if let Some(m) = mask {
                // window center in the original image
                if !m[(y + half) * w + (x + half)] {
                    continue;
                }
            }
            let i = y * ow + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRoi);
    }
    Ok((sum / count as f64) as f32)
}

/// Dice, recall, and precision for one binary mask pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f32,
    pub recall: f32,
    pub precision: f32,
}

/// Overlap scores with the usual empty-set conventions: two empty masks
/// agree perfectly (all ones); a miss against a non-empty reference scores
/// zero everywhere.
pub fn seg_overlap(pred: &[bool], gt: &[bool]) -> Result<Overlap> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            axis: "seg_overlap".into(),
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let mut tp = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        np += p as usize;
        ng += g as usize;
        tp += (p && g) as usize;
    }
    if np == 0 && ng == 0 {
        return Ok(Overlap {
            dice: 1.0,
            recall: 1.0,
            precision: 1.0,
        });
    }
    let dice = 2.0 * tp as f32 / (np + ng) as f32;
    let recall = if ng == 0 { 0.0 } else { tp as f32 / ng as f32 };
    let precision = if np == 0 { 0.0 } else { tp as f32 / np as f32 };
    Ok(Overlap {
        dice,
        recall,
        precision,
    })
}

/// Surface voxels of a 3-D mask: set voxels with at least one face
/// neighbour outside the mask (the array border counts as outside).
pub fn surface_voxels(mask: &[bool], (nz, ny, nx): (usize, usize, usize)) -> Vec<(usize, usize, usize)> {
    debug_assert_eq!(mask.len(), nz * ny * nx);
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
            return false;
        }
        mask[(z as usize * ny + y as usize) * nx + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[(z * ny + y) * nx + x] {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if !at(zi - 1, yi, xi)
                    || !at(zi + 1, yi, xi)
                    || !at(zi, yi - 1, xi)
                    || !at(zi, yi + 1, xi)
                    || !at(zi, yi, xi - 1)
                    || !at(zi, yi, xi + 1)
                {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

/// 1-D squared-distance transform (lower envelope of parabolas). `f` is the
/// input cost per sample, `step` the physical sample spacing.
fn dt1d(f: &[f64], step: f64) -> Vec<f64> {
    let n = f.len();
    if n == 0 {
        return Vec::new();
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut out = vec![0.0f64; n];
    let sq = |i: usize| (i as f64 * step) * (i as f64 * step);
    // intersection of the parabolas rooted at samples p and q (p < q)
    let cross = |p: usize, q: usize| {
        ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * step * (q - p) as f64)
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = cross(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = cross(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        let qf = q as f64 * step;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let d = qf - p as f64 * step;
        out[q] = d * d + f[p];
    }
    out
}

/// Exact anisotropic Euclidean distance (squared) from every voxel to the
/// nearest seed, computed separably axis by axis.
fn edt3(seeds: &[bool], (nz, ny, nx): (usize, usize, usize), (dz, dy, dx): (f32, f32, f32)) -> Vec<f64> {
    const FAR: f64 = 1e18;
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    // x axis
    let mut line = vec![0.0f64; nx.max(ny).max(nz)];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                line[x] = d[(z * ny + y) * nx + x];
            }
            let t = dt1d(&line[..nx], dx as f64);
            for x in 0..nx {
                d[(z * ny + y) * nx + x] = t[x];
            }
        }
    }
    // y axis
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[(z * ny + y) * nx + x];
            }
            let t = dt1d(&line[..ny], dy as f64);
            for y in 0..ny {
                d[(z * ny + y) * nx + x] = t[y];
            }
        }
    }
    // z axis
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = d[(z * ny + y) * nx + x];
            }
            let t = dt1d(&line[..nz], dz as f64);
            for z in 0..nz {
                d[(z * ny + y) * nx + x] = t[z];
            }
        }
    }
    d
}

/// Average symmetric surface distance in millimetres between two binary
/// masks on the same grid. Distances are Euclidean between surface voxel
/// centres, weighted by the physical spacing. Either mask being empty is an
/// error.
pub fn asd(
    pred: &[bool],
    gt: &[bool],
    shape: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> Result<f32> {
    let (nz, ny, nx) = shape;
    if pred.len() != nz * ny * nx || gt.len() != nz * ny * nx {
        return Err(Error::InvalidShape(format!(
            "asd mask length does not match {nz}x{ny}x{nx} grid"
        )));
    }
    let sp = surface_voxels(pred, shape);
    let sg = surface_voxels(gt, shape);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::EmptyMask("asd: a mask has no surface voxels"));
    }
    let as_seeds = |pts: &[(usize, usize, usize)]| {
        let mut s = vec![false; nz * ny * nx];
        for &(z, y, x) in pts {
            s[(z * ny + y) * nx + x] = true;
        }
        s
    };
    let d_to_g = edt3(&as_seeds(&sg), shape, spacing);
    let d_to_p = edt3(&as_seeds(&sp), shape, spacing);
    let mut total = 0.0f64;
    for &(z, y, x) in &sp {
        total += d_to_g[(z * ny + y) * nx + x].sqrt();
    }
    for &(z, y, x) in &sg {
        total += d_to_p[(z * ny + y) * nx + x].sqrt();
    }
    Ok((total / (sp.len() + sg.len()) as f64) as f32)
}

/// One metric value for one evaluated item and region.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub item_id: String,
    pub roi: String,
    pub metric: String,
    pub value: f32,
}

/// Accumulates rows and writes the CSV report: a header, one row per
/// measurement, then `mean` aggregate rows per (roi, metric) pair.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item_id: &str, roi: &str, metric: &str, value: f32) {
        self.rows.push(MetricRow {
            item_id: item_id.to_string(),
            roi: roi.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Mean per (roi, metric), in first-appearance order.
    pub fn aggregates(&self) -> Vec<(String, String, f32)> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.roi.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(roi, metric)| {
                let vals: Vec<f32> = self
                    .rows
                    .iter()
                    .filter(|r| r.roi == roi && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
                (roi, metric, mean as f32)
            })
            .collect()
    }

    pub fn mean_of(&self, roi: &str, metric: &str) -> Option<f32> {
        self.aggregates()
            .into_iter()
            .find(|(r, m, _)| r == roi && m == metric)
            .map(|(_, _, v)| v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        writeln!(f, "item_id,roi,metric,value").map_err(io)?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{:.6}", r.item_id, r.roi, r.metric, r.value).map_err(io)?;
        }
        for (roi, metric, mean) in self.aggregates() {
            writeln!(f, "mean,{roi},{metric},{mean:.6}").map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn psnr_identical_caps_at_99() {
        let a = img(8, 8, |y, x| (y + x) as f32 * 0.01);
        assert_eq!(psnr(&a, &a, None, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn psnr_uniform_offset_matches_closed_form() {
        // constant error e: PSNR = 20 log10(peak / |e|)
        let a = img(8, 8, |_, _| 0.3);
        let b = img(8, 8, |_, _| 0.4);
        let expect = 20.0 * (1.0f32 / 0.1).log10();
        assert_relative_eq!(psnr(&a, &b, None, 1.0).unwrap(), expect, epsilon = 1e-3);
    }

    #[test]
    fn psnr_mask_ignores_outside_error() {
        let a = img(4, 4, |_, _| 0.5);
        let mut b = a.clone();
        b.data_mut()[0] = 0.0; // large error outside the mask
        let mask: Vec<bool> = (0..16).map(|i| i >= 8).collect();
        assert_eq!(psnr(&a, &b, Some(&mask), 1.0).unwrap(), 99.0);
    }

    #[test]
    fn psnr_empty_mask_is_error() {
        let a = img(4, 4, |_, _| 0.0);
        let mask = vec![false; 16];
        assert!(matches!(
            psnr(&a, &a, Some(&mask), 1.0),
            Err(Error::EmptyRoi)
        ));
    }

    // brute-force per-window SSIM used as an independent check
    fn ssim_reference(a: &Tensor, b: &Tensor, peak: f64) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let k = gaussian_kernel();
        let c1 = (SSIM_K1 * peak).powi(2);
        let c2 = (SSIM_K2 * peak).powi(2);
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut maa, mut mbb, mut mab) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        let av = a.data()[(y0 + dy) * w + x0 + dx] as f64;
                        let bv = b.data()[(y0 + dy) * w + x0 + dx] as f64;
                        ma += wgt * av;
                        mb += wgt * bv;
                        maa += wgt * av * av;
                        mbb += wgt * bv * bv;
                        mab += wgt * av * bv;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = img(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f32 * 0.05);
        assert_relative_eq!(ssim(&a, &a, None, 1.0).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn ssim_matches_direct_window_sums() {
        let a = img(20, 18, |y, x| ((y * 13 + x * 5) % 17) as f32 * 0.05);
        let b = img(20, 18, |y, x| {
            ((y * 13 + x * 5) % 17) as f32 * 0.05 + ((y + x) % 3) as f32 * 0.04
        });
        let fast = ssim(&a, &b, None, 1.0).unwrap();
        let slow = ssim_reference(&a, &b, 1.0) as f32;
        assert_relative_eq!(fast, slow, epsilon = 1e-5);
    }

    #[test]
    fn ssim_too_small_image_is_rejected() {
        let a = img(8, 8, |_, _| 0.0);
        assert!(ssim(&a, &a, None, 1.0).is_err());
    }

    #[test]
    fn ssim_masked_uses_window_centers() {
        let a = img(16, 16, |y, x| ((y * 3 + x) % 7) as f32 * 0.1);
        let mut b = a.clone();
        for v in b.data_mut().iter_mut() {
            *v += 0.02;
        }
        // mask covering only the left half of valid centers
        let mask: Vec<bool> = (0..256).map(|i| i % 16 < 8).collect();
        let masked = ssim(&a, &b, Some(&mask), 1.0).unwrap();
        let full = ssim(&a, &b, None, 1.0).unwrap();
        assert!(masked.is_finite() && full.is_finite());
        // all-false mask errors
        assert!(matches!(
            ssim(&a, &b, Some(&vec![false; 256]), 1.0),
            Err(Error::EmptyRoi)
        ));
    }

    #[test]
    fn overlap_conventions() {
        let empty = vec![false; 8];
        let some = {
            let mut m = vec![false; 8];
            m[2] = true;
            m[3] = true;
            m
        };
        let both_empty = seg_overlap(&empty, &empty).unwrap();
        assert_eq!(
            (both_empty.dice, both_empty.recall, both_empty.precision),
            (1.0, 1.0, 1.0)
        );
        let miss = seg_overlap(&empty, &some).unwrap();
        assert_eq!((miss.dice, miss.recall, miss.precision), (0.0, 0.0, 0.0));
        let exact = seg_overlap(&some, &some).unwrap();
        assert_eq!((exact.dice, exact.recall, exact.precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn overlap_half() {
        // pred {0,1}, gt {1,2}: tp=1, dice = 2/4
        let mut pred = vec![false; 4];
        pred[0] = true;
        pred[1] = true;
        let mut gt = vec![false; 4];
        gt[1] = true;
        gt[2] = true;
        let o = seg_overlap(&pred, &gt).unwrap();
        assert_eq!((o.dice, o.recall, o.precision), (0.5, 0.5, 0.5));
    }

    fn box_mask(
        (nz, ny, nx): (usize, usize, usize),
        z: std::ops::Range<usize>,
        y: std::ops::Range<usize>,
        x: std::ops::Range<usize>,
    ) -> Vec<bool> {
        let mut m = vec![false; nz * ny * nx];
        for zi in z.clone() {
            for yi in y.clone() {
                for xi in x.clone() {
                    m[(zi * ny + yi) * nx + xi] = true;
                }
            }
        }
        m
    }

    fn asd_bruteforce(
        pred: &[bool],
        gt: &[bool],
        shape: (usize, usize, usize),
        sp: (f32, f32, f32),
    ) -> f32 {
        let a = surface_voxels(pred, shape);
        let b = surface_voxels(gt, shape);
        let dist = |p: (usize, usize, usize), q: (usize, usize, usize)| -> f64 {
            let dz = (p.0 as f64 - q.0 as f64) * sp.0 as f64;
            let dy = (p.1 as f64 - q.1 as f64) * sp.1 as f64;
            let dx = (p.2 as f64 - q.2 as f64) * sp.2 as f64;
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let mut total = 0.0f64;
        for &p in &a {
            total += b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
        }
        for &q in &b {
            total += a.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min);
        }
        (total / (a.len() + b.len()) as f64) as f32
    }

    #[test]
    fn asd_zero_for_identical_masks() {
        let shape = (4, 8, 8);
        let m = box_mask(shape, 1..3, 2..6, 2..6);
        assert_eq!(asd(&m, &m, shape, (2.5, 1.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn asd_matches_bruteforce_on_shifted_boxes() {
        let shape = (6, 12, 12);
        let sp = (2.5, 1.0, 1.0);
        let a = box_mask(shape, 1..4, 2..7, 2..7);
        let b = box_mask(shape, 2..5, 4..9, 3..8);
        let fast = asd(&a, &b, shape, sp).unwrap();
        let slow = asd_bruteforce(&a, &b, shape, sp);
        assert_relative_eq!(fast, slow, epsilon = 1e-4);
    }

    #[test]
    fn asd_respects_spacing() {
        let shape = (6, 6, 6);
        let a = box_mask(shape, 1..2, 2..4, 2..4);
        let b = box_mask(shape, 3..4, 2..4, 2..4);
        let thin = asd(&a, &b, shape, (1.0, 1.0, 1.0)).unwrap();
        let thick = asd(&a, &b, shape, (2.5, 1.0, 1.0)).unwrap();
        assert!(thick > thin);
    }

    #[test]
    fn asd_empty_mask_is_error() {
        let shape = (4, 4, 4);
        let empty = vec![false; 64];
        let full = box_mask(shape, 1..2, 1..2, 1..2);
        assert!(matches!(
            asd(&empty, &full, shape, (1.0, 1.0, 1.0)),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn report_csv_has_rows_and_means() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let mut rep = MetricReport::new();
        rep.push("vol0", "whole", "psnr", 30.0);
        rep.push("vol1", "whole", "psnr", 34.0);
        rep.push("vol0", "liver", "dice", 0.9);
        rep.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "item_id,roi,metric,value");
        assert!(lines.contains(&"mean,whole,psnr,32.000000"));
        assert!(lines.contains(&"mean,liver,dice,0.900000"));
        assert_eq!(rep.mean_of("whole", "psnr"), Some(32.0));
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // adding larger deterministic perturbations never raises PSNR
        #[test]
        fn psnr_decreases_with_noise_amplitude(seed in 0u64..1000, amp in 0.01f32..0.2) {
            let n = 64usize;
            let base: Vec<f32> = (0..n).map(|i| ((i * 37 + seed as usize) % 11) as f32 * 0.05).collect();
            let noise: Vec<f32> = (0..n).map(|i| (((i * 13 + 5) % 7) as f32 - 3.0) / 3.0).collect();
            let gt = Tensor::new(vec![8, 8], base.clone()).unwrap();
            let lo = Tensor::new(vec![8, 8], base.iter().zip(&noise).map(|(b, e)| b + amp * e).collect()).unwrap();
            let hi = Tensor::new(vec![8, 8], base.iter().zip(&noise).map(|(b, e)| b + 2.0 * amp * e).collect()).unwrap();
            let p_lo = psnr(&lo, &gt, None, 1.0).unwrap();
            let p_hi = psnr(&hi, &gt, None, 1.0).unwrap();
            prop_assert!(p_hi <= p_lo + 1e-4, "{p_hi} > {p_lo}");
        }

        // SSIM is symmetric in its arguments
        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let h = 14usize;
            let w = 13usize;
            let a: Vec<f32> = (0..h * w).map(|i| ((i * 29 + seed as usize) % 13) as f32 * 0.05).collect();
            let b: Vec<f32> = (0..h * w).map(|i| ((i * 7 + 3 * seed as usize) % 11) as f32 * 0.06).collect();
            let ta = Tensor::new(vec![h, w], a).unwrap();
            let tb = Tensor::new(vec![h, w], b).unwrap();
            let ab = ssim(&ta, &tb, None, 1.0).unwrap();
            let ba = ssim(&tb, &ta, None, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
        }

        // a mask compared with itself scores 1 everywhere (or the empty convention)
        #[test]
        fn overlap_identity(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let o = seg_overlap(&bits, &bits).unwrap();
            prop_assert_eq!((o.dice, o.recall, o.precision), (1.0, 1.0, 1.0));
        }
    }
}


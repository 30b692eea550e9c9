//! Synthetic abdominal phantoms: an ellipsoidal liver with spherical
//! lesions that drift in-plane from slice to slice, over a smooth
//! background gradient. Ground truth comes from the same analytic geometry
//! that renders the intensities, so thin-slice references and labels are
//! exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::volume::{IntensityUnit, SegVolume, Volume};

/// One spherical lesion. `center` is in millimetres from the volume origin;
/// the in-plane centre moves by `drift` millimetres per millimetre of z, so
/// the rendered shape is a sheared sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub center: (f32, f32, f32), // (z, y, x) mm
    pub radius: f32,             // mm
    pub contrast: f32,           // HU offset relative to liver
    pub drift: (f32, f32),       // (dy, dx) mm per mm of z
}

/// Full phantom description. All geometry is in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: (usize, usize, usize),    // (z, y, x) voxels
    pub spacing: (f32, f32, f32),        // (dz, dy, dx) mm
    pub liver_center: (f32, f32, f32),   // (z, y, x) mm
    pub liver_radii: (f32, f32, f32),    // (z, y, x) mm
    pub liver_hu: f32,
    pub background: (f32, f32, f32, f32), // b0 + bz*z + by*y + bx*x (mm coords)
    pub lesions: Vec<Lesion>,
    pub noise_sigma: f32, // HU
    pub seed: u64,
}

pub const MIN_LESION_RADIUS_MM: f32 = 2.0;
pub const MAX_LESION_RADIUS_MM: f32 = 15.0;

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: (25, 64, 64),
            spacing: (2.5, 1.0, 1.0),
            liver_center: (31.0, 32.0, 32.0),
            liver_radii: (28.0, 26.0, 26.0),
            liver_hu: 60.0,
            background: (-60.0, 0.2, 0.15, -0.1),
            lesions: vec![Lesion {
                center: (31.0, 30.0, 34.0),
                radius: 8.0,
                contrast: -45.0,
                drift: (0.5, -0.4),
            }],
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Extent of the grid in millimetres.
    pub fn extent(&self) -> (f32, f32, f32) {
        (
            self.shape.0 as f32 * self.spacing.0,
            self.shape.1 as f32 * self.spacing.1,
            self.shape.2 as f32 * self.spacing.2,
        )
    }

    fn inside_liver(&self, z: f32, y: f32, x: f32) -> bool {
        let (cz, cy, cx) = self.liver_center;
        let (rz, ry, rx) = self.liver_radii;
        let a = (z - cz) / rz;
        let b = (y - cy) / ry;
        let c = (x - cx) / rx;
        a * a + b * b + c * c <= 1.0
    }

    /// Reject specs whose lesions poke outside the liver, overlap each
    /// other, or have radii outside the supported range.
    pub fn validate(&self) -> Result<()> {
        if self.shape.0 < 3 {
            return Err(Error::Invalid(format!(
                "phantom needs at least 3 slices, got {}",
                self.shape.0
            )));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if !(MIN_LESION_RADIUS_MM..=MAX_LESION_RADIUS_MM).contains(&l.radius) {
                return Err(Error::Invalid(format!(
                    "lesion {i} radius {} mm outside [{MIN_LESION_RADIUS_MM}, {MAX_LESION_RADIUS_MM}]",
                    l.radius
                )));
            }
            // walk the sheared sphere in z and check in-plane extremes
            let steps = 32;
            for s in 0..=steps {
                let dz = -l.radius + 2.0 * l.radius * s as f32 / steps as f32;
                let z = l.center.0 + dz;
                let rd = (l.radius * l.radius - dz * dz).max(0.0).sqrt();
                let cy = l.center.1 + l.drift.0 * dz;
                let cx = l.center.2 + l.drift.1 * dz;
                let probes = [
                    (z, cy + rd, cx),
                    (z, cy - rd, cx),
                    (z, cy, cx + rd),
                    (z, cy, cx - rd),
                ];
                if probes.iter().any(|&(pz, py, px)| !self.inside_liver(pz, py, px)) {
                    return Err(Error::Invalid(format!(
                        "lesion {i} extends outside the liver at z = {z:.1} mm"
                    )));
                }
            }
        }
        for i in 0..self.lesions.len() {
            for j in (i + 1)..self.lesions.len() {
                let a = &self.lesions[i];
                let b = &self.lesions[j];
                let d = ((a.center.0 - b.center.0).powi(2)
                    + (a.center.1 - b.center.1).powi(2)
                    + (a.center.2 - b.center.2).powi(2))
                .sqrt();
                if d < a.radius + b.radius {
                    return Err(Error::Invalid(format!(
                        "lesions {i} and {j} overlap (centres {d:.1} mm apart)"
                    )));
                }
            }
        }
        Ok(())
    }

    // ----- spec file -----------------------------------------------------

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (nz, ny, nx) = self.shape;
        let _ = writeln!(s, "shape = {nz},{ny},{nx}");
        let (dz, dy, dx) = self.spacing;
        let _ = writeln!(s, "spacing = {dz},{dy},{dx}");
        let (cz, cy, cx) = self.liver_center;
        let (rz, ry, rx) = self.liver_radii;
        let _ = writeln!(s, "liver = {cz},{cy},{cx},{rz},{ry},{rx}");
        let _ = writeln!(s, "liver_hu = {}", self.liver_hu);
        let (b0, bz, by, bx) = self.background;
        let _ = writeln!(s, "background = {b0},{bz},{by},{bx}");
        for l in &self.lesions {
            let _ = writeln!(
                s,
                "lesion = {},{},{},{},{},{},{}",
                l.center.0, l.center.1, l.center.2, l.radius, l.contrast, l.drift.0, l.drift.1
            );
        }
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = PhantomSpec {
            lesions: Vec::new(),
            ..PhantomSpec::default()
        };
        let bad = |line: &str| Error::Invalid(format!("bad phantom spec line: {line}"));
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let key = key.trim();
            let nums: Vec<f32> = value
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(line))?;
            let want = |n: usize| -> Result<()> {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(bad(line))
                }
            };
            match key {
                "shape" => {
                    want(3)?;
                    spec.shape = (nums[0] as usize, nums[1] as usize, nums[2] as usize);
                }
                "spacing" => {
                    want(3)?;
                    spec.spacing = (nums[0], nums[1], nums[2]);
                }
                "liver" => {
                    want(6)?;
                    spec.liver_center = (nums[0], nums[1], nums[2]);
                    spec.liver_radii = (nums[3], nums[4], nums[5]);
                }
                "liver_hu" => {
                    want(1)?;
                    spec.liver_hu = nums[0];
                }
                "background" => {
                    want(4)?;
                    spec.background = (nums[0], nums[1], nums[2], nums[3]);
                }
                "lesion" => {
                    want(7)?;
                    spec.lesions.push(Lesion {
                        center: (nums[0], nums[1], nums[2]),
                        radius: nums[3],
                        contrast: nums[4],
                        drift: (nums[5], nums[6]),
                    });
                }
                "noise_sigma" => {
                    want(1)?;
                    spec.noise_sigma = nums[0];
                }
                "seed" => {
                    want(1)?;
                    spec.seed = nums[0] as u64;
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Draw a randomized spec on the default grid: jittered liver, one or two
/// drifting lesions that stay inside it.
pub fn sample_spec(seed: u64, noise_sigma: f32) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = PhantomSpec::default();
    let (ez, ey, ex) = base.extent();
    let liver_center = (
        ez * 0.5 + rng.gen_range(-2.0..2.0),
        ey * 0.5 + rng.gen_range(-2.0..2.0),
        ex * 0.5 + rng.gen_range(-2.0..2.0),
    );
    let liver_radii = (
        rng.gen_range(21.0..24.0),
        rng.gen_range(23.0..27.0),
        rng.gen_range(23.0..27.0),
    );
    let mut spec = PhantomSpec {
        liver_center,
        liver_radii,
        liver_hu: rng.gen_range(50.0..70.0),
        background: (
            rng.gen_range(-80.0..-40.0),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ),
        lesions: Vec::new(),
        noise_sigma,
        seed,
        ..base
    };
    let count = 1 + (rng.gen_range(0..2) as usize);
    for attempt in 0..200 {
        if spec.lesions.len() == count {
            break;
        }
        let radius = rng.gen_range(5.0..9.0);
        let lesion = Lesion {
            center: (
                liver_center.0 + rng.gen_range(-8.0..8.0),
                liver_center.1 + rng.gen_range(-10.0..10.0),
                liver_center.2 + rng.gen_range(-10.0..10.0),
            ),
            radius,
            contrast: rng.gen_range(30.0..55.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 },
            drift: (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
        };
        spec.lesions.push(lesion);
        if spec.validate().is_err() {
            spec.lesions.pop();
        }
        let _ = attempt;
    }
    spec
}

const SUPERSAMPLE: usize = 3;

/// Class of a point: 2 lesion, 1 liver, 0 background.
fn classify(spec: &PhantomSpec, z: f32, y: f32, x: f32) -> u8 {
    for l in &spec.lesions {
        let dz = z - l.center.0;
        if dz.abs() > l.radius {
            continue;
        }
        let dy = y - (l.center.1 + l.drift.0 * dz);
        let dx = x - (l.center.2 + l.drift.1 * dz);
        if dz * dz + dy * dy + dx * dx <= l.radius * l.radius {
            return 2;
        }
    }
    if spec.inside_liver(z, y, x) {
        1
    } else {
        0
    }
}

fn intensity_at(spec: &PhantomSpec, z: f32, y: f32, x: f32) -> f32 {
    let (b0, bz, by, bx) = spec.background;
    let bg = b0 + bz * z + by * y + bx * x;
    match classify(spec, z, y, x) {
        2 => {
            // lesion contrast rides on the liver value
            spec.liver_hu
                + spec
                    .lesions
                    .iter()
                    .find(|l| {
                        let dz = z - l.center.0;
                        let dy = y - (l.center.1 + l.drift.0 * dz);
                        let dx = x - (l.center.2 + l.drift.1 * dz);
                        dz * dz + dy * dy + dx * dx <= l.radius * l.radius
                    })
                    .map(|l| l.contrast)
                    .unwrap_or(0.0)
        }
        1 => spec.liver_hu,
        _ => bg,
    }
}

/// Render the phantom: Hounsfield intensities with 3x3x3 supersampled
/// partial-volume averaging plus optional Gaussian noise, and clean labels
/// taken at voxel centres.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, SegVolume)> {
    spec.validate()?;
    let (nz, ny, nx) = spec.shape;
    let (dz, dy, dx) = spec.spacing;
    let mut data = Vec::with_capacity(nz * ny * nx);
    let mut labels = Vec::with_capacity(nz * ny * nx);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sub = SUPERSAMPLE as f32;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0f64;
                for sz in 0..SUPERSAMPLE {
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let pz = (z as f32 + (sz as f32 + 0.5) / sub) * dz;
                            let py = (y as f32 + (sy as f32 + 0.5) / sub) * dy;
                            let px = (x as f32 + (sx as f32 + 0.5) / sub) * dx;
                            acc += intensity_at(spec, pz, py, px) as f64;
                        }
                    }
                }
                let mut v = (acc / (SUPERSAMPLE.pow(3) as f64)) as f32;
                if spec.noise_sigma > 0.0 {
                    let n: f32 = rng.sample(StandardNormal);
                    v += n * spec.noise_sigma;
                }
                data.push(v);
                let cz = (z as f32 + 0.5) * dz;
                let cy = (y as f32 + 0.5) * dy;
                let cx = (x as f32 + 0.5) * dx;
                labels.push(classify(spec, cz, cy, cx));
            }
        }
    }
    let vol = Volume::new(spec.shape, spec.spacing, IntensityUnit::Hounsfield, data)?;
    let seg = SegVolume::new(spec.shape, spec.spacing, labels)?;
    Ok((vol, seg))
}

/// Keep every k-th slice, emulating a thick-slice acquisition of the same
/// anatomy. Requires (Z - 1) to be divisible by k so both ends survive; the
/// z spacing scales by k.
pub fn degrade_thickness(volume: &Volume, k: usize) -> Result<Volume> {
    let (nz, ny, nx) = volume.shape();
    if k < 2 {
        return Err(Error::Invalid(format!("thickness factor must be >= 2, got {k}")));
    }
    if (nz - 1) % k != 0 {
        return Err(Error::Invalid(format!(
            "cannot decimate {nz} slices by {k}: (slices - 1) must be divisible by {k}"
        )));
    }
    let kept = (nz - 1) / k + 1;
    let mut data = Vec::with_capacity(kept * ny * nx);
    for zi in 0..kept {
        let z = zi * k;
        data.extend_from_slice(&volume.data()[z * ny * nx..(z + 1) * ny * nx]);
    }
    let (dz, dy, dx) = volume.spacing();
    Volume::new((kept, ny, nx), (dz * k as f32, dy, dx), volume.unit(), data)
}

/// Same decimation for label volumes.
pub fn degrade_seg_thickness(seg: &SegVolume, k: usize) -> Result<SegVolume> {
    let (nz, ny, nx) = seg.shape();
    if k < 2 || (nz - 1) % k != 0 {
        return Err(Error::Invalid(format!(
            "cannot decimate {nz} label slices by {k}"
        )));
    }
    let kept = (nz - 1) / k + 1;
    let mut labels = Vec::with_capacity(kept * ny * nx);
    for zi in 0..kept {
        let z = zi * k;
        labels.extend_from_slice(&seg.labels()[z * ny * nx..(z + 1) * ny * nx]);
    }
    let (dz, dy, dx) = seg.spacing();
    SegVolume::new((kept, ny, nx), (dz * k as f32, dy, dx), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_renders_all_three_classes() {
        let (vol, seg) = generate(&PhantomSpec::default()).unwrap();
        let mut counts = [0usize; 3];
        for z in 0..seg.shape().0 {
            for &l in &seg.slice(z).labels {
                counts[l as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "class counts {counts:?}");
        assert!(vol.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lesion_voxel_count_tracks_sphere_volume() {
        let spec = PhantomSpec {
            shape: (52, 64, 64),
            spacing: (1.0, 1.0, 1.0),
            liver_center: (26.0, 32.0, 32.0),
            liver_radii: (24.0, 26.0, 26.0),
            lesions: vec![Lesion {
                center: (26.0, 32.0, 32.0),
                radius: 8.0,
                contrast: 40.0,
                drift: (0.0, 0.0),
            }],
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let (_, seg) = generate(&spec).unwrap();
        let n = seg.labels().iter().filter(|&&l| l == 2).count() as f32;
        let expect = 4.0 / 3.0 * std::f32::consts::PI * 8.0f32.powi(3);
        let rel = (n - expect).abs() / expect;
        assert!(rel < 0.1, "count {n} vs analytic {expect}");
    }

    #[test]
    fn drift_preserves_lesion_volume() {
        let base = PhantomSpec {
            shape: (52, 64, 64),
            spacing: (1.0, 1.0, 1.0),
            lesions: vec![Lesion {
                center: (26.0, 32.0, 32.0),
                radius: 7.0,
                contrast: 40.0,
                drift: (0.0, 0.0),
            }],
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let mut drifted = base.clone();
        drifted.lesions[0].drift = (0.6, -0.5);
        let n0 = generate(&base).unwrap().1.labels().iter().filter(|&&l| l == 2).count() as f32;
        let n1 = generate(&drifted)
            .unwrap()
            .1
            .labels()
            .iter()
            .filter(|&&l| l == 2)
            .count() as f32;
        assert!((n0 - n1).abs() / n0 < 0.05, "volumes {n0} vs {n1}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            noise_sigma: 5.0,
            seed: 99,
            ..PhantomSpec::default()
        };
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn escaping_lesion_is_rejected() {
        let spec = PhantomSpec {
            lesions: vec![Lesion {
                center: (26.0, 6.0, 6.0), // near the corner, outside the liver
                radius: 8.0,
                contrast: 40.0,
                drift: (0.0, 0.0),
            }],
            ..PhantomSpec::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn out_of_range_radius_is_rejected() {
        let mut spec = PhantomSpec::default();
        spec.lesions[0].radius = 1.0;
        assert!(spec.validate().is_err());
        spec.lesions[0].radius = 16.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn decimation_keeps_original_slices_bit_exact() {
        let (vol, _) = generate(&PhantomSpec::default()).unwrap();
        let thick = degrade_thickness(&vol, 2).unwrap();
        assert_eq!(thick.shape().0, 13);
        assert_eq!(thick.spacing().0, 5.0);
        for zi in 0..13 {
            assert_eq!(thick.slice(zi).data(), vol.slice(zi * 2).data());
        }
        // 25 slices cannot decimate by 7 (24 % 7 != 0)
        assert!(degrade_thickness(&vol, 7).is_err());
    }

    #[test]
    fn spec_file_round_trips() {
        let spec = sample_spec(5, 3.0);
        let text = spec.to_text();
        let back = PhantomSpec::from_text(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn sampled_specs_are_valid_and_vary() {
        let a = sample_spec(1, 0.0);
        let b = sample_spec(2, 0.0);
        a.validate().unwrap();
        b.validate().unwrap();
        assert!(!a.lesions.is_empty() && !b.lesions.is_empty());
        assert_ne!(a.liver_center, b.liver_center);
    }
}

//! Volume and segmentation data model, NIfTI-1 ingestion/emission, intensity
//! windowing, and triplet extraction.

mod nifti;

pub use nifti::{read_nifti, read_nifti_pair, write_nifti, write_seg_nifti};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default CT window in Hounsfield units: covers liver parenchyma and
/// hypodense lesions.
pub const DEFAULT_WINDOW: (f32, f32) = (-200.0, 300.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityUnit {
    Hounsfield,
    Normalized,
}

/// 3-D scalar grid indexed (z, y, x) with per-axis spacing in mm.
#[derive(Debug, Clone)]
pub struct Volume {
    data: Vec<f32>,
    shape: (usize, usize, usize), // (z, y, x)
    spacing: (f32, f32, f32),     // (dz, dy, dx) mm
    unit: IntensityUnit,
    /// Raw qform/sform block from an ingested NIfTI header, re-emitted
    /// opaquely on write. No reorientation is performed.
    pub(crate) affine: Option<[u8; 76]>,
}

impl Volume {
    pub fn new(
        shape: (usize, usize, usize),
        spacing: (f32, f32, f32),
        unit: IntensityUnit,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (z, y, x) = shape;
        if z * y * x != data.len() {
            return Err(Error::InvalidShape(format!(
                "volume shape {:?} does not describe {} voxels",
                shape,
                data.len()
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Invalid(format!(
                "non-positive voxel spacing {:?}",
                spacing
            )));
        }
        if unit == IntensityUnit::Normalized
            && data.iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Invalid(
                "normalized volume has values outside [0, 1]".into(),
            ));
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            unit,
            affine: None,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn set_spacing_z(&mut self, dz: f32) {
        assert!(dz > 0.0);
        self.spacing.0 = dz;
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f32 {
        let (_, ny, nx) = self.shape;
        self.data[(z * ny + y) * nx + x]
    }

    /// Axial slice z as an (H, W) tensor.
    pub fn slice(&self, z: usize) -> Tensor {
        let (_, ny, nx) = self.shape;
        let start = z * ny * nx;
        Tensor::new(vec![ny, nx], self.data[start..start + ny * nx].to_vec()).unwrap()
    }

    /// Build a volume from per-slice (H, W) tensors.
    pub fn from_slices(
        slices: &[Tensor],
        spacing: (f32, f32, f32),
        unit: IntensityUnit,
    ) -> Result<Self> {
        let (h, w) = match slices.first().map(|s| s.shape()) {
            Some([h, w]) => (*h, *w),
            _ => return Err(Error::InvalidShape("need at least one 2-D slice".into())),
        };
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.shape() != [h, w] {
                return Err(Error::InvalidShape("slice shapes differ".into()));
            }
            data.extend_from_slice(s.data());
        }
        Volume::new((slices.len(), h, w), spacing, unit, data)
    }
}

/// Label volume aligned to a [`Volume`]: 0 background, 1 liver, 2 lesion.
#[derive(Debug, Clone)]
pub struct SegVolume {
    labels: Vec<u8>,
    shape: (usize, usize, usize),
    spacing: (f32, f32, f32),
}

impl SegVolume {
    pub fn new(
        shape: (usize, usize, usize),
        spacing: (f32, f32, f32),
        labels: Vec<u8>,
    ) -> Result<Self> {
        let (z, y, x) = shape;
        if z * y * x != labels.len() {
            return Err(Error::InvalidShape(format!(
                "label shape {:?} does not describe {} voxels",
                shape,
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 2) {
            return Err(Error::Invalid("label values outside {0, 1, 2}".into()));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::Invalid("non-positive voxel spacing".into()));
        }
        Ok(SegVolume {
            labels,
            shape,
            spacing,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn set_spacing_z(&mut self, dz: f32) {
        assert!(dz > 0.0);
        self.spacing.0 = dz;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, z: usize, y: usize, x: usize) -> u8 {
        let (_, ny, nx) = self.shape;
        self.labels[(z * ny + y) * nx + x]
    }

    /// Label map of axial slice z, row-major (H, W).
    pub fn slice(&self, z: usize) -> LabelMap {
        let (_, ny, nx) = self.shape;
        let start = z * ny * nx;
        LabelMap {
            h: ny,
            w: nx,
            labels: self.labels[start..start + ny * nx].to_vec(),
        }
    }

    /// Binary mask of one class over the whole volume.
    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }
}

/// 2-D label map (one axial slice of a [`SegVolume`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    /// One-hot encoding as a [classes, H, W] tensor.
    pub fn onehot(&self, classes: usize) -> Tensor {
        let plane = self.h * self.w;
        let mut data = vec![0.0f32; classes * plane];
        for (i, &l) in self.labels.iter().enumerate() {
            data[(l as usize) * plane + i] = 1.0;
        }
        Tensor::new(vec![classes, self.h, self.w], data).unwrap()
    }

    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }
}

/// Three consecutive axial slices; the training sample. `labels1` is present
/// when the center slice is an original annotated slice.
#[derive(Debug, Clone)]
pub struct SliceTriplet {
    pub s0: Tensor,
    pub s1: Tensor,
    pub s2: Tensor,
    pub labels1: Option<LabelMap>,
    pub source_spacing_z: f32,
}

/// Clamp to [lo, hi] then map linearly to [0, 1].
pub fn window_normalize(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if lo >= hi {
        return Err(Error::Invalid(format!(
            "degenerate intensity window [{lo}, {hi}]"
        )));
    }
    let span = hi - lo;
    let data: Vec<f32> = volume
        .data()
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0))
        .collect();
    let mut out = Volume::new(
        volume.shape(),
        volume.spacing(),
        IntensityUnit::Normalized,
        data,
    )?;
    out.affine = volume.affine;
    Ok(out)
}

/// Overlapping (z, z+1, z+2) windows stepped by `stride`.
pub fn extract_triplets(
    volume: &Volume,
    seg: Option<&SegVolume>,
    stride: usize,
) -> Result<Vec<SliceTriplet>> {
    let (nz, _, _) = volume.shape();
    assert!(stride >= 1);
    if nz < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 slices to form a triplet, volume has {nz}"
        )));
    }
    if let Some(s) = seg {
        if s.shape() != volume.shape() {
            return Err(Error::DimMismatch {
                axis: "segmentation shape",
                expected: volume.shape().0,
                got: s.shape().0,
            });
        }
    }
    let mut out = Vec::new();
    let mut z = 0;
    while z + 2 < nz {
        out.push(SliceTriplet {
            s0: volume.slice(z),
            s1: volume.slice(z + 1),
            s2: volume.slice(z + 2),
            labels1: seg.map(|s| s.slice(z + 1)),
            source_spacing_z: volume.spacing().0,
        });
        z += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(nz: usize) -> Volume {
        let data: Vec<f32> = (0..nz * 4 * 4).map(|i| i as f32).collect();
        Volume::new((nz, 4, 4), (2.5, 1.0, 1.0), IntensityUnit::Hounsfield, data).unwrap()
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let v = Volume::new(
            (1, 1, 4),
            (1.0, 1.0, 1.0),
            IntensityUnit::Hounsfield,
            vec![-200.0, 300.0, 50.0, -700.0],
        )
        .unwrap();
        let n = window_normalize(&v, -200.0, 300.0).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 0.0]);
        assert_eq!(n.unit(), IntensityUnit::Normalized);
    }

    #[test]
    fn window_rejects_degenerate_range() {
        let v = ramp_volume(3);
        assert!(window_normalize(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn window_is_idempotent_on_normalized() {
        let v = Volume::new(
            (1, 2, 2),
            (1.0, 1.0, 1.0),
            IntensityUnit::Normalized,
            vec![0.0, 0.25, 0.75, 1.0],
        )
        .unwrap();
        let n = window_normalize(&v, 0.0, 1.0).unwrap();
        assert_eq!(n.data(), v.data());
    }

    #[test]
    fn triplet_counts() {
        assert_eq!(extract_triplets(&ramp_volume(5), None, 1).unwrap().len(), 3);
        assert_eq!(extract_triplets(&ramp_volume(3), None, 1).unwrap().len(), 1);
        // floor((64-3)/2)+1 = 31
        assert_eq!(
            extract_triplets(&ramp_volume(64), None, 2).unwrap().len(),
            31
        );
        assert!(extract_triplets(&ramp_volume(2), None, 1).is_err());
    }

    #[test]
    fn triplet_centers_carry_labels() {
        let v = ramp_volume(5);
        let labels = vec![0u8; 5 * 16];
        let seg = SegVolume::new((5, 4, 4), v.spacing(), labels).unwrap();
        let trips = extract_triplets(&v, Some(&seg), 1).unwrap();
        assert!(trips.iter().all(|t| t.labels1.is_some()));
        assert_eq!(trips[1].s1.data(), v.slice(2).data());
    }

    #[test]
    fn seg_rejects_bad_labels() {
        assert!(SegVolume::new((1, 1, 2), (1.0, 1.0, 1.0), vec![0, 3]).is_err());
    }

    #[test]
    fn normalized_range_is_enforced() {
        assert!(Volume::new(
            (1, 1, 2),
            (1.0, 1.0, 1.0),
            IntensityUnit::Normalized,
            vec![0.5, 1.5]
        )
        .is_err());
    }

    #[test]
    fn onehot_round_trip() {
        let m = LabelMap {
            h: 2,
            w: 2,
            labels: vec![0, 1, 2, 1],
        };
        let t = m.onehot(3);
        assert_eq!(t.shape(), &[3, 2, 2]);
        for (i, &l) in m.labels.iter().enumerate() {
            for c in 0..3u8 {
                let want = if c == l { 1.0 } else { 0.0 };
                assert_eq!(t.data()[c as usize * 4 + i], want);
            }
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn triplet_count_formula(nz in 3usize..40, stride in 1usize..5) {
            let data = vec![0.0f32; nz * 4];
            let v = Volume::new((nz, 2, 2), (1.0, 1.0, 1.0), IntensityUnit::Hounsfield, data).unwrap();
            let trips = extract_triplets(&v, None, stride).unwrap();
            prop_assert_eq!(trips.len(), (nz - 3) / stride + 1);
        }

        #[test]
        fn window_is_monotone(a in -1000.0f32..1000.0, b in -1000.0f32..1000.0) {
            let v = Volume::new((1, 1, 2), (1.0, 1.0, 1.0), IntensityUnit::Hounsfield,
                vec![a.min(b), a.max(b)]).unwrap();
            let n = window_normalize(&v, -200.0, 300.0).unwrap();
            prop_assert!(n.data()[0] <= n.data()[1]);
        }
    }
}

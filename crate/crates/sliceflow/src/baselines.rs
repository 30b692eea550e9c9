//! Classical z-axis interpolators used as comparison arms.

use crate::error::Result;
use crate::numerics::Tensor;
use crate::numerics::tensor::same_shape;

/// Nearest-neighbour interpolation: the closer of the two slices. The tie at
/// n = 0.5 resolves to the earlier slice.
pub fn nn_interpolate(s_a: &Tensor, s_b: &Tensor, n: f32) -> Result<Tensor> {
    same_shape(s_a, s_b, "nn_interpolate")?;
    debug_assert!(0.0 < n && n < 1.0);
    if n > 0.5 {
        Ok(s_b.clone())
    } else {
        Ok(s_a.clone())
    }
}

/// Pixelwise (1 - n) * s_a + n * s_b.
pub fn linear_interpolate(s_a: &Tensor, s_b: &Tensor, n: f32) -> Result<Tensor> {
    same_shape(s_a, s_b, "linear_interpolate")?;
    debug_assert!(0.0 < n && n < 1.0);
    let data: Vec<f32> = s_a
        .data()
        .iter()
        .zip(s_b.data())
        .map(|(a, b)| (1.0 - n) * a + n * b)
        .collect();
    Ok(Tensor::new(s_a.shape().to_vec(), data).unwrap())
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn slices() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..12).prop_flat_map(|len| {
            (
                proptest::collection::vec(-10.0f32..10.0, len),
                proptest::collection::vec(-10.0f32..10.0, len),
            )
        })
    }

    proptest! {
        // linear interpolation is exact for a per-pixel linear ramp in z
        #[test]
        fn linear_exact_on_z_ramp(
            (a, slope) in slices(),
            n in 0.01f32..0.99,
        ) {
            let b: Vec<f32> = a.iter().zip(&slope).map(|(x, s)| x + s).collect();
            let ta = Tensor::new(vec![a.len()], a.clone()).unwrap();
            let tb = Tensor::new(vec![b.len()], b).unwrap();
            let out = linear_interpolate(&ta, &tb, n).unwrap();
            for i in 0..a.len() {
                let expect = a[i] + n * slope[i];
                prop_assert!((out.data()[i] - expect).abs() < 1e-4);
            }
        }

        // NN commutes with any monotone per-pixel remapping
        #[test]
        fn nn_commutes_with_monotone_remap((a, b) in slices(), n in 0.01f32..0.99) {
            let remap = |v: f32| v.tanh() * 3.0 + v * 0.1;
            let ta = Tensor::new(vec![a.len()], a.clone()).unwrap();
            let tb = Tensor::new(vec![b.len()], b.clone()).unwrap();
            let direct: Vec<f32> = nn_interpolate(&ta, &tb, n).unwrap()
                .data().iter().map(|&v| remap(v)).collect();
            let ra = Tensor::new(vec![a.len()], a.iter().map(|&v| remap(v)).collect()).unwrap();
            let rb = Tensor::new(vec![b.len()], b.iter().map(|&v| remap(v)).collect()).unwrap();
            let remapped = nn_interpolate(&ra, &rb, n).unwrap();
            prop_assert_eq!(direct, remapped.data().to_vec());
        }

        // linear commutes with affine remappings
        #[test]
        fn linear_commutes_with_affine_remap(
            (a, b) in slices(),
            n in 0.01f32..0.99,
            scale in -3.0f32..3.0,
            offset in -5.0f32..5.0,
        ) {
            let ta = Tensor::new(vec![a.len()], a.clone()).unwrap();
            let tb = Tensor::new(vec![b.len()], b.clone()).unwrap();
            let direct: Vec<f32> = linear_interpolate(&ta, &tb, n).unwrap()
                .data().iter().map(|&v| scale * v + offset).collect();
            let ra = Tensor::new(vec![a.len()], a.iter().map(|&v| scale * v + offset).collect()).unwrap();
            let rb = Tensor::new(vec![b.len()], b.iter().map(|&v| scale * v + offset).collect()).unwrap();
            let remapped = linear_interpolate(&ra, &rb, n).unwrap();
            for i in 0..a.len() {
                prop_assert!((direct[i] - remapped.data()[i]).abs() < 1e-3);
            }
        }
    }
}

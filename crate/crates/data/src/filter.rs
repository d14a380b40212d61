//! Separable Gaussian filtering on single-channel planes.

use ndarray::{Array2, ArrayView2};

/// Normalized 1-D Gaussian taps of length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable filtering with only fully-covered output positions ("valid").
pub fn filter_valid(plane: ArrayView2<'_, f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let k = taps.len();
    assert!(h >= k && w >= k, "plane smaller than the kernel");
    let horiz = Array2::from_shape_fn((h, w - k + 1), |(y, x)| {
        taps.iter().enumerate().map(|(i, t)| t * plane[[y, x + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, x)| {
        taps.iter().enumerate().map(|(i, t)| t * horiz[[y + i, x]]).sum::<f64>()
    })
}

/// Separable filtering with clamp-to-edge borders; output has the input shape.
pub fn filter_same(plane: ArrayView2<'_, f32>, taps: &[f64]) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (taps.len() / 2) as isize;
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * plane[[y, at(x as isize + i as isize - r, w)]] as f64)
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * horiz[[at(y as isize + i as isize - r, h), x]])
            .sum::<f64>() as f32
    })
}

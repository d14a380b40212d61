//! Full-reference distortion metrics on `[0, 1]` images.
//!
//! PSNR uses a peak of 1.0 and returns `f64::INFINITY` for identical inputs.
//! SSIM is the single-scale definition with an 11x11 Gaussian window
//! (sigma 1.5), `C1 = 0.01^2`, `C2 = 0.03^2`, evaluated over fully covered
//! window positions and averaged over channels. Luma uses full-range BT.601
//! weights with no studio offset.

use ndarray::{Array2, ArrayView2, Axis};
use vlmir_data::filter::{filter_valid, gaussian_kernel};
use vlmir_data::ImageTensor;

use crate::error::{EvalError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// The luma weights in thousandths; integer products of f32 inputs are exact in f64.
const LUMA_PER_MILLE: [f64; 3] = [299.0, 587.0, 114.0];

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(EvalError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.view().len() as f64;
    Ok(a.view()
        .iter()
        .zip(b.view().iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// PSNR of two single-channel planes with peak 1.0.
pub fn psnr_plane(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch(a.dim(), b.dim()));
    }
    let n = a.len() as f64;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// Mean SSIM of two single-channel planes.
pub fn ssim_plane(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch(a.dim(), b.dim()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid((&a * &a).view(), &taps);
    let bb = filter_valid((&b * &b).view(), &taps);
    let ab = filter_valid((&a * &b).view(), &taps);
    let mut total = 0.0;
    for ((((ma, mb), saa), sbb), sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

fn channel(img: &ImageTensor, c: usize) -> Array2<f64> {
    img.view().index_axis(Axis(2), c).mapv(|v| v as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim_plane(channel(a, c).view(), channel(b, c).view())?;
    }
    Ok(sum / 3.0)
}

/// Full-range BT.601 luma, `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_y(img: &ImageTensor) -> Array2<f64> {
    let v = img.view();
    Array2::from_shape_fn(img.dims(), |(y, x)| {
        let per_mille: f64 = (0..3).map(|c| LUMA_PER_MILLE[c] * v[[y, x, c]] as f64).sum();
        per_mille / 1000.0
    })
}

pub fn y_psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    psnr_plane(rgb_to_y(a).view(), rgb_to_y(b).view())
}

pub fn y_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    ssim_plane(rgb_to_y(a).view(), rgb_to_y(b).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn textured(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x, c| {
            0.5 + 0.3 * ((x as f32 * 0.4 + c as f32).sin() * (y as f32 * 0.3).cos())
        })
        .unwrap()
    }

    fn noisy(img: &ImageTensor, sigma: f32, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        ImageTensor::from_clamped(img.as_array().mapv(|v| v + n.sample(&mut rng))).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::filled(8, 8, [0.0; 3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let half = ImageTensor::filled(8, 8, [0.5; 3]).unwrap();
        assert!((psnr(&a, &half).unwrap() - 6.020_599_913).abs() < 1e-4);
        let tenth = ImageTensor::from_fn(8, 8, |_, _, _| 0.1).unwrap();
        assert!((psnr(&a, &tenth).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageTensor::filled(12, 12, [0.0; 3]).unwrap();
        let b = ImageTensor::filled(12, 13, [0.0; 3]).unwrap();
        assert!(matches!(psnr(&a, &b), Err(EvalError::ShapeMismatch(..))));
        assert!(matches!(ssim(&a, &b), Err(EvalError::ShapeMismatch(..))));
        let small = ImageTensor::filled(10, 30, [0.0; 3]).unwrap();
        assert!(matches!(ssim(&small, &small), Err(EvalError::TooSmall { .. })));
    }

    #[test]
    fn ssim_closed_forms() {
        let img = textured(24, 20);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let zero = ImageTensor::filled(16, 16, [0.0; 3]).unwrap();
        let one = ImageTensor::filled(16, 16, [1.0; 3]).unwrap();
        // zero variances reduce SSIM to C1 / (1 + C1)
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn luma_readout() {
        let px = |rgb| rgb_to_y(&ImageTensor::filled(1, 1, rgb).unwrap())[[0, 0]];
        assert!((px([1.0, 1.0, 1.0]) - 1.0).abs() < 1e-6);
        assert!((px([1.0, 0.0, 0.0]) - 0.299).abs() < 1e-7);
        assert_eq!(px([0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn chroma_only_difference_is_invisible_to_y_metrics() {
        // (-15, 9, -7) spans integers in the nullspace of 299 R + 587 G + 114 B;
        // a dyadic step keeps every value exact in f32
        let step = 1.0 / 256.0;
        let img = |k: f32| {
            ImageTensor::from_fn(16, 16, |y, x, c| {
                let base = [0.5, 0.25 + (x as f32) / 64.0, 0.5 + (y as f32) / 64.0][c];
                base + k * [-15.0, 9.0, -7.0][c] * step
            })
            .unwrap()
        };
        let (a, b) = (img(0.0), img(2.0));
        assert_eq!(rgb_to_y(&a), rgb_to_y(&b));
        assert!(psnr(&a, &b).unwrap().is_finite());
        assert_eq!(y_psnr(&a, &b).unwrap(), f64::INFINITY);
        assert_eq!(y_ssim(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn grayscale_y_metrics_equal_rgb_metrics() {
        let gray = |seed| {
            let t = textured(16, 16);
            let g = noisy(&t, 0.05, seed);
            ImageTensor::from_fn(16, 16, |y, x, _| g.view()[[y, x, 0]]).unwrap()
        };
        let (a, b) = (gray(1), gray(2));
        assert!((psnr(&a, &b).unwrap() - y_psnr(&a, &b).unwrap()).abs() < 1e-4);
        assert!((ssim(&a, &b).unwrap() - y_ssim(&a, &b).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let img = textured(32, 32);
        let values: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|&s| psnr(&img, &noisy(&img, s, 9)).unwrap())
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    proptest! {
        #[test]
        fn ssim_symmetric_bounded_and_flip_invariant(seed in 0u64..1000, sigma in 0.01f32..0.3) {
            let a = textured(16, 18);
            let b = noisy(&a, sigma, seed);
            let s_ab = ssim(&a, &b).unwrap();
            prop_assert!((s_ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s_ab));
            let flipped = ssim(&a.flip_horizontal(), &b.flip_horizontal()).unwrap();
            prop_assert!((s_ab - flipped).abs() < 1e-9);
            let vflipped = ssim(&a.flip_vertical(), &b.flip_vertical()).unwrap();
            prop_assert!((s_ab - vflipped).abs() < 1e-9);
        }
    }
}

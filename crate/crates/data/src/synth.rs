//! Synthetic degradations: additive Gaussian noise, atmospheric-scattering
//! haze over a smooth random depth field, and refractive raindrops.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::filter::{filter_same, gaussian_kernel};
use crate::image::ImageTensor;
use crate::label::DegradationLabel;

/// Default noise level: 50 on the 8-bit scale.
pub const DEFAULT_NOISE_SIGMA: f32 = 50.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeParams {
    pub airlight_min: f32,
    pub airlight_max: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    /// Side of the low-resolution uniform grid that is upsampled into depth.
    pub depth_grid: usize,
}

impl Default for HazeParams {
    fn default() -> Self {
        Self {
            airlight_min: 0.7,
            airlight_max: 1.0,
            beta_min: 0.8,
            beta_max: 2.0,
            depth_grid: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaindropParams {
    pub count_min: usize,
    pub count_max: usize,
    /// Drop semi-major axis as a fraction of the shorter image side.
    pub radius_min: f32,
    pub radius_max: f32,
    /// Minor/major axis ratio lower bound; the ratio is drawn from `[aspect_min, 1]`.
    pub aspect_min: f32,
    pub blur_sigma: f32,
    pub displacement_gain: f32,
    pub opacity: f32,
}

impl Default for RaindropParams {
    fn default() -> Self {
        Self {
            count_min: 6,
            count_max: 14,
            radius_min: 0.04,
            radius_max: 0.10,
            aspect_min: 0.6,
            blur_sigma: 1.5,
            displacement_gain: 0.6,
            opacity: 0.85,
        }
    }
}

impl RaindropParams {
    fn radii_px(&self, height: usize, width: usize) -> (f32, f32) {
        let side = height.min(width) as f32;
        ((self.radius_min * side).max(1.0), (self.radius_max * side).max(1.0))
    }

    /// Bounds on the binary mask area fraction implied by the drop count and
    /// radius ranges, with one pixel of rasterization slack on each axis.
    pub fn coverage_bounds(&self, height: usize, width: usize) -> (f64, f64) {
        if self.count_max == 0 {
            return (0.0, 0.0);
        }
        let area = (height * width) as f64;
        let (rmin, rmax) = self.radii_px(height, width);
        let (rmin, rmax) = (rmin as f64, rmax as f64);
        let lower = if self.count_min >= 1 {
            std::f64::consts::PI * (rmin - 1.0).max(0.0) * (rmin * self.aspect_min as f64 - 1.0).max(0.0) / area
        } else {
            0.0
        };
        let upper = self.count_max as f64 * std::f64::consts::PI * (rmax + 1.0).powi(2) / area;
        (lower, upper.min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub noise_sigma: f32,
    pub haze: HazeParams,
    pub raindrop: RaindropParams,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            haze: HazeParams::default(),
            raindrop: RaindropParams::default(),
            seed: 0,
        }
    }
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(DataError::InvalidParams(msg.to_string()))
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        check(
            self.noise_sigma > 0.0 && self.noise_sigma <= 1.0,
            "noise_sigma must lie in (0, 1]",
        )?;
        let h = &self.haze;
        check(
            (0.6..=1.0).contains(&h.airlight_min)
                && (0.6..=1.0).contains(&h.airlight_max)
                && h.airlight_min <= h.airlight_max,
            "haze airlight range must lie within [0.6, 1]",
        )?;
        check(
            h.beta_min > 0.0 && h.beta_min <= h.beta_max && h.beta_max.is_finite(),
            "haze beta range must be positive and ordered",
        )?;
        check(h.depth_grid >= 2, "haze depth_grid must be at least 2")?;
        let r = &self.raindrop;
        check(r.count_min <= r.count_max, "raindrop count range must be ordered")?;
        check(
            r.radius_min > 0.0 && r.radius_min <= r.radius_max && r.radius_max <= 0.5,
            "raindrop radius range must lie in (0, 0.5] and be ordered",
        )?;
        check(
            r.aspect_min > 0.0 && r.aspect_min <= 1.0,
            "raindrop aspect_min must lie in (0, 1]",
        )?;
        check(r.blur_sigma >= 0.0, "raindrop blur_sigma must be non-negative")?;
        check((0.0..=1.0).contains(&r.opacity), "raindrop opacity must lie in [0, 1]")?;
        Ok(())
    }

    /// Applies the degradation for `label` with a per-image seed.
    pub fn degrade(&self, gt: &ImageTensor, label: DegradationLabel, seed: u64) -> Result<ImageTensor> {
        match label {
            DegradationLabel::Noise => add_gaussian_noise(gt, self.noise_sigma, seed),
            DegradationLabel::Haze => synth_haze(gt, &self.haze, seed),
            DegradationLabel::Raindrop => synth_raindrop(gt, &self.raindrop, seed),
        }
    }
}

/// `clamp(gt + n, 0, 1)` with `n ~ N(0, sigma^2)` i.i.d. per value.
pub fn add_gaussian_noise(gt: &ImageTensor, sigma: f32, seed: u64) -> Result<ImageTensor> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(DataError::InvalidParams(format!("noise sigma {sigma} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).expect("sigma checked");
    let noisy = gt.as_array().mapv(|v| v + normal.sample(&mut rng));
    ImageTensor::from_clamped(noisy)
}

/// Smooth depth in `[0, 1]`: a `grid x grid` uniform field upsampled bilinearly.
pub fn random_depth_field(height: usize, width: usize, grid: usize, rng: &mut impl Rng) -> Array2<f32> {
    let coarse = Array2::from_shape_fn((grid, grid), |_| rng.random::<f32>());
    let g = (grid - 1) as f32;
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = if height > 1 {
            y as f32 / (height - 1) as f32 * g
        } else {
            0.0
        };
        let fx = if width > 1 {
            x as f32 / (width - 1) as f32 * g
        } else {
            0.0
        };
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = coarse[[y0, x0]] * (1.0 - tx) + coarse[[y0, x1]] * tx;
        let bot = coarse[[y1, x0]] * (1.0 - tx) + coarse[[y1, x1]] * tx;
        (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
    })
}

/// Atmospheric scattering `I = J t + A (1 - t)` with `t = exp(-beta * depth)`.
pub fn apply_haze(gt: &ImageTensor, depth: &Array2<f32>, airlight: f32, beta: f32) -> Result<ImageTensor> {
    if depth.dim() != gt.dims() {
        return Err(DataError::ShapeMismatch(depth.dim(), gt.dims()));
    }
    let out = Array3::from_shape_fn((gt.height(), gt.width(), 3), |(y, x, c)| {
        let t = (-beta * depth[[y, x]]).exp();
        gt.as_array()[[y, x, c]] * t + airlight * (1.0 - t)
    });
    ImageTensor::from_clamped(out)
}

pub fn synth_haze(gt: &ImageTensor, params: &HazeParams, seed: u64) -> Result<ImageTensor> {
    if params.depth_grid < 2 || params.beta_min <= 0.0 || params.beta_min > params.beta_max {
        return Err(DataError::InvalidParams("invalid haze parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let airlight = rng.random_range(params.airlight_min..=params.airlight_max);
    let beta = rng.random_range(params.beta_min..=params.beta_max);
    let depth = random_depth_field(gt.height(), gt.width(), params.depth_grid, &mut rng);
    apply_haze(gt, &depth, airlight, beta)
}

fn bilinear(img: &Array3<f32>, fy: f32, fx: f32, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    let fy = fy.clamp(0.0, (h - 1) as f32);
    let fx = fx.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
    let top = img[[y0, x0, c]] * (1.0 - tx) + img[[y0, x1, c]] * tx;
    let bot = img[[y1, x0, c]] * (1.0 - tx) + img[[y1, x1, c]] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Renders raindrops and also returns the binary drop mask.
pub fn render_raindrops(gt: &ImageTensor, params: &RaindropParams, seed: u64) -> Result<(ImageTensor, Array2<bool>)> {
    if params.count_min > params.count_max || params.radius_min <= 0.0 || params.radius_min > params.radius_max {
        return Err(DataError::InvalidParams("invalid raindrop parameters".into()));
    }
    let (h, w) = gt.dims();
    let src = gt.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(params.count_min..=params.count_max);
    let (rmin, rmax) = params.radii_px(h, w);

    let mut mask = Array2::from_elem((h, w), false);
    let mut refracted = src.clone();
    for _ in 0..count {
        let rx = rng.random_range(rmin..=rmax);
        let ry = rx * rng.random_range(params.aspect_min..=1.0);
        // keep the whole ellipse inside the frame when it fits
        let cx = if (w as f32) > 2.0 * rx {
            rng.random_range(rx..=w as f32 - rx)
        } else {
            w as f32 / 2.0
        };
        let cy = if (h as f32) > 2.0 * ry {
            rng.random_range(ry..=h as f32 - ry)
        } else {
            h as f32 / 2.0
        };
        let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    mask[[y, x]] = true;
                    // a drop acts as a small inverting lens
                    let sx = cx - params.displacement_gain * (px - cx) - 0.5;
                    let sy = cy - params.displacement_gain * (py - cy) - 0.5;
                    let lift = 0.06 * (1.0 - (dx * dx + dy * dy));
                    for c in 0..3 {
                        refracted[[y, x, c]] = (bilinear(src, sy, sx, c) + lift).min(1.0);
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok((gt.clone(), mask));
    }

    let taps = if params.blur_sigma > 0.0 {
        let size = (2.0 * (3.0 * params.blur_sigma).ceil() + 1.0) as usize;
        gaussian_kernel(size, params.blur_sigma as f64)
    } else {
        vec![1.0]
    };
    let mask_f = mask.mapv(|m| if m { 1.0f32 } else { 0.0 });
    let alpha = filter_same(mask_f.view(), &taps).mapv(|a| a * params.opacity);
    let mut out = src.clone();
    for c in 0..3 {
        let plane = refracted.index_axis(ndarray::Axis(2), c).to_owned();
        let blurred = filter_same(plane.view(), &taps);
        for y in 0..h {
            for x in 0..w {
                let a = alpha[[y, x]];
                out[[y, x, c]] = a * blurred[[y, x]] + (1.0 - a) * src[[y, x, c]];
            }
        }
    }
    Ok((ImageTensor::from_clamped(out)?, mask))
}

pub fn synth_raindrop(gt: &ImageTensor, params: &RaindropParams, seed: u64) -> Result<ImageTensor> {
    render_raindrops(gt, params, seed).map(|(img, _)| img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ToyScene;

    fn scene() -> ImageTensor {
        ToyScene::random("t", 5).render(48, 48).unwrap()
    }

    #[test]
    fn default_noise_level_is_fifty_over_255() {
        assert!((SynthParams::default().noise_sigma - 0.19608).abs() < 1e-5);
        SynthParams::default().validate().unwrap();
    }

    #[test]
    fn noise_is_seed_deterministic_and_range_checked() {
        let gt = scene();
        let a = add_gaussian_noise(&gt, 0.2, 9).unwrap();
        assert_eq!(a, add_gaussian_noise(&gt, 0.2, 9).unwrap());
        assert_ne!(a, add_gaussian_noise(&gt, 0.2, 10).unwrap());
        assert!(add_gaussian_noise(&gt, 0.0, 1).is_err());
        assert!(add_gaussian_noise(&gt, 1.5, 1).is_err());
    }

    /// Standard deviation of N(0, 1) truncated to [-a, a], by Simpson quadrature.
    fn truncated_unit_std(a: f64) -> f64 {
        let n = 20_000;
        let h = 2.0 * a / n as f64;
        let (mut z, mut m2) = (0.0, 0.0);
        for i in 0..=n {
            let x = -a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let pdf = (-x * x / 2.0).exp();
            z += w * pdf;
            m2 += w * x * x * pdf;
        }
        (m2 / z).sqrt()
    }

    #[test]
    fn noise_std_matches_sigma() {
        let gt = ImageTensor::filled(128, 128, [0.5; 3]).unwrap();
        let sigma = DEFAULT_NOISE_SIGMA as f64;
        let lq = add_gaussian_noise(&gt, sigma as f32, 42).unwrap();
        let all: Vec<f64> = lq.view().iter().map(|v| *v as f64 - 0.5).collect();

        // Dropping clamped values truncates the distribution at +-0.5, so the
        // interior std is compared with the truncated-normal value.
        let interior: Vec<f64> = all.iter().copied().filter(|d| d.abs() < 0.5).collect();
        let n = interior.len() as f64;
        let mean = interior.iter().sum::<f64>() / n;
        let std = (interior.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = sigma * truncated_unit_std(0.5 / sigma);
        assert!(
            (std - expected).abs() / expected < 0.02,
            "interior std {std} vs {expected}"
        );

        // The median absolute deviation is untouched by clamping at 2.5 sigma.
        let mut abs: Vec<f64> = all.iter().map(|d| d.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let robust = abs[abs.len() / 2] / 0.674_489_750;
        assert!((robust - sigma).abs() / sigma < 0.02, "robust std {robust}");
    }

    #[test]
    fn haze_closed_forms() {
        let gt = scene();
        let zero = Array2::zeros(gt.dims());
        assert_eq!(apply_haze(&gt, &zero, 0.8, 1.5).unwrap(), gt);

        let ones = Array2::from_elem(gt.dims(), 1.0);
        let thick = apply_haze(&gt, &ones, 0.8, 200.0).unwrap();
        assert!(thick.view().iter().all(|v| (v - 0.8).abs() < 1e-6));

        let beta = 1.3f32;
        let d = Array2::from_elem(gt.dims(), std::f32::consts::LN_2 / beta);
        let half = apply_haze(&gt, &d, 0.9, beta).unwrap();
        for (o, j) in half.view().iter().zip(gt.view().iter()) {
            assert!((o - (j / 2.0 + 0.45)).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_field_is_bounded_and_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_depth_field(64, 64, 8, &mut rng);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        let max_step = d
            .windows((1, 2))
            .into_iter()
            .map(|w| (w[[0, 0]] - w[[0, 1]]).abs())
            .fold(0.0f32, f32::max);
        assert!(max_step < 0.2);
    }

    #[test]
    fn no_drops_is_identity() {
        let gt = scene();
        let p = RaindropParams {
            count_min: 0,
            count_max: 0,
            ..Default::default()
        };
        assert_eq!(synth_raindrop(&gt, &p, 3).unwrap(), gt);
    }

    #[test]
    fn raindrop_is_deterministic() {
        let gt = scene();
        let p = RaindropParams::default();
        assert_eq!(synth_raindrop(&gt, &p, 3).unwrap(), synth_raindrop(&gt, &p, 3).unwrap());
        assert_ne!(synth_raindrop(&gt, &p, 3).unwrap(), gt);
    }

    #[test]
    fn raindrop_coverage_within_configured_range() {
        let gt = ToyScene::random("c", 2).render(64, 64).unwrap();
        let p = RaindropParams::default();
        let (lo, hi) = p.coverage_bounds(64, 64);
        assert!(lo > 0.0 && hi < 1.0);
        for seed in 0..100 {
            let (_, mask) = render_raindrops(&gt, &p, seed).unwrap();
            let frac = mask.iter().filter(|m| **m).count() as f64 / (64.0 * 64.0);
            assert!(
                frac >= lo && frac <= hi,
                "seed {seed}: coverage {frac} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn validation_rejects_degenerate_ranges() {
        let mut p = SynthParams::default();
        p.haze.airlight_min = 0.3;
        assert!(p.validate().is_err());
        let mut p = SynthParams::default();
        p.raindrop.count_min = 20;
        assert!(p.validate().is_err());
        let mut p = SynthParams::default();
        p.noise_sigma = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let gt = scene();
        let p = SynthParams::default();
        for label in DegradationLabel::ALL {
            let lq = p.degrade(&gt, label, 17).unwrap();
            assert_eq!(lq.dims(), gt.dims());
            assert!(lq.view().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

use std::path::Path;

use ndarray::{s, Array3, ArrayView3, Axis};

use crate::error::{DataError, Result};

/// An RGB image stored as an `(height, width, 3)` array of `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an array, rejecting wrong channel counts and out-of-range values.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(DataError::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(DataError::InvalidImage("empty image".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Wraps an array after clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        Self::from_clamped(Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    /// Pixel data in CHW order, as consumed by the networks.
    pub fn to_chw_vec(&self) -> Vec<f32> {
        self.data.view().permuted_axes([2, 0, 1]).iter().copied().collect()
    }

    /// Builds an image from CHW data, clamping into `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != 3 * height * width {
            return Err(DataError::InvalidImage(format!(
                "expected {} values, got {}",
                3 * height * width,
                chw.len()
            )));
        }
        let arr = Array3::from_shape_vec((3, height, width), chw.to_vec())
            .expect("length checked")
            .permuted_axes([1, 2, 0]);
        Self::from_clamped(arr.as_standard_layout().to_owned())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = ::image::open(path)
            .map_err(|source| DataError::Codec {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(data)
    }

    /// Writes an 8-bit RGB PNG, rounding to the nearest code value.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| DataError::Codec {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Encodes the image as 8-bit PNG bytes.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ::image::ImageFormat::Png)
            .map_err(|source| DataError::Codec {
                path: "<memory>".into(),
                source,
            })?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)
            .map_err(|source| DataError::Codec {
                path: "<memory>".into(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let (h, w) = self.dims();
        ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]] * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Rounds every value to the 8-bit grid, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(|v| (v * 255.0).round() / 255.0),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(DataError::InvalidImage(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            data: self
                .data
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(0));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let (sh, sw) = self.dims();
        let sy = sh as f32 / height as f32;
        let sx = sw as f32 / width as f32;
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let top = self.data[[y0, x0, c]] * (1.0 - tx) + self.data[[y0, x1, c]] * tx;
            let bot = self.data[[y1, x0, c]] * (1.0 - tx) + self.data[[y1, x1, c]] * tx;
            (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
        });
        Self { data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 255) as f32 / 255.0).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 3), 1.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 1), 0.5)).is_err());
        let clamped = ImageTensor::from_clamped(Array3::from_elem((2, 2, 3), -0.5)).unwrap();
        assert!(clamped.view().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(9, 13);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn chw_round_trip() {
        let img = gradient(5, 4);
        let chw = img.to_chw_vec();
        assert_eq!(chw[0], img.view()[[0, 0, 0]]);
        assert_eq!(chw[20], img.view()[[0, 0, 1]]);
        assert_eq!(ImageTensor::from_chw(5, 4, &chw).unwrap(), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient(6, 5);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().view()[[2, 0, 1]], img.view()[[2, 4, 1]]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = gradient(8, 8);
        assert_eq!(img.resize_bilinear(8, 8), img);
        let flat = ImageTensor::filled(5, 7, [0.25, 0.5, 0.75]).unwrap();
        let r = flat.resize_bilinear(16, 3);
        assert!(r
            .view()
            .iter()
            .zip([0.25, 0.5, 0.75].iter().cycle())
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// 8-bit RGB image in height × width × channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim("RawImage", &[height, width, 3], &[pixels.len()]));
        }
        Ok(RawImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        RawImage {
            height,
            width,
            pixels: vec![value; height * width * 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub height: usize,
    pub width: usize,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::square(112)
    }
}

impl PreprocessConfig {
    pub fn square(size: usize) -> Self {
        PreprocessConfig {
            height: size,
            width: size,
            channel_means: [0.5; 3],
            channel_stds: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.channel_stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "channel stds must be positive, got {:?}",
                self.channel_stds
            )));
        }
        Ok(())
    }
}

/// Maps byte `v` in channel `c` to `(v/255 - mean_c) / std_c`, channel-first.
/// No resizing: the image must already have the configured size.
pub fn preprocess(raw: &RawImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    cfg.validate()?;
    if raw.height != cfg.height || raw.width != cfg.width {
        return Err(Error::Preprocess(format!(
            "image is {}x{}, model input is {}x{}",
            raw.height, raw.width, cfg.height, cfg.width
        )));
    }
    let (h, w) = (raw.height, raw.width);
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for (px, rgb) in raw.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + px] =
                (f64::from(rgb[c]) / 255.0 - cfg.channel_means[c]) / cfg.channel_stds[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images() {
        let cfg = PreprocessConfig::default();
        let t = preprocess(&RawImage::filled(112, 112, 0), &cfg).unwrap();
        assert_eq!(t.shape(), &[3, 112, 112]);
        assert!(t.data().iter().all(|&v| v == -1.0));
        let t = preprocess(&RawImage::filled(112, 112, 255), &cfg).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        let t = preprocess(&RawImage::filled(112, 112, 128), &cfg).unwrap();
        // (128/255 - 0.5) / 0.5 = 1/255
        assert!(t.data().iter().all(|&v| (v - 0.003_921_568_627_451).abs() < 1e-12));
    }

    #[test]
    fn size_mismatch_is_error() {
        let err = preprocess(&RawImage::filled(16, 16, 0), &PreprocessConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Preprocess(ref m) if m.contains("112x112")));
    }

    #[test]
    fn channel_first_layout() {
        // pixel (0,1) red = 255, everything else 0
        let mut img = RawImage::filled(2, 2, 0);
        img.pixels[3] = 255;
        let t = preprocess(&img, &PreprocessConfig::square(2)).unwrap();
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[4 + 1], -1.0);
    }

    #[test]
    fn invertible_on_all_bytes() {
        let cfg = PreprocessConfig {
            height: 1,
            width: 256,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
        };
        let pixels: Vec<u8> = (0..=255u8).flat_map(|v| [v, v, v]).collect();
        let t = preprocess(&RawImage::new(1, 256, pixels).unwrap(), &cfg).unwrap();
        for c in 0..3 {
            for v in 0..256usize {
                let x = t.data()[c * 256 + v];
                let back = (255.0 * (x * cfg.channel_stds[c] + cfg.channel_means[c])).round();
                assert_eq!(back as usize, v);
            }
        }
    }
}

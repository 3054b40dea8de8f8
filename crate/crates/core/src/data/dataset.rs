use std::path::{Path, PathBuf};

use super::{load_annotations, preprocess, read_packed_images, AnnotationRecord, ImageRef, PreprocessConfig, RawImage};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Records paired with their preprocessed `[3, H, W]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub inputs: Vec<Tensor>,
}

impl Dataset {
    /// `images[i]` must be the pixels of `records[i]`.
    pub fn from_raw(
        records: Vec<AnnotationRecord>,
        images: &[RawImage],
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::dim("dataset images", &[records.len()], &[images.len()]));
        }
        let inputs = images
            .iter()
            .map(|img| preprocess(img, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records, inputs })
    }

    /// Loads a manifest and resolves its images. Packed references are read
    /// from the file with the manifest's stem and a `.bin` extension; path
    /// references are decoded relative to the manifest's directory.
    pub fn load(manifest: &Path, cfg: &PreprocessConfig) -> Result<Self> {
        let records = load_annotations(manifest)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut packed: Option<Vec<RawImage>> = None;
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let img = match &r.image {
                ImageRef::Packed(i) => {
                    if packed.is_none() {
                        packed = Some(read_packed_images(&packed_path_for(manifest))?);
                    }
                    let all = packed.as_ref().expect("loaded");
                    all.get(*i)
                        .cloned()
                        .ok_or_else(|| Error::Corrupt {
                            path: packed_path_for(manifest),
                            message: format!("record {} references missing image {i}", r.id),
                        })?
                }
                ImageRef::Path(p) => decode_image(&base.join(p))?,
            };
            images.push(img);
        }
        Self::from_raw(records, &images, cfg)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stacks the inputs of `indices` into a `[n, 3, H, W]` batch.
    pub fn batch_inputs(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.inputs[i]).collect();
        Tensor::stack(&items)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
        }
    }

    /// Per-sample input shape, if the dataset is non-empty.
    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }
}

/// `dir/train.csv` → `dir/train.bin`
pub fn packed_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn decode_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(h as usize, w as usize, rgb.into_raw())
}

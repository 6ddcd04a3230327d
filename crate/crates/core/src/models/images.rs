use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `m` images of `height×width×channels` values in `[0, 1]`, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    /// `images` must have shape `[m, h, w, c]`.
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid(
                "image_batch",
                format!("expected [m, h, w, c], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(invalid(
                "image_batch",
                format!("{} labels for {} images", labels.len(), images.shape()[0]),
            ));
        }
        if let Some(bad) = images.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(invalid("image_batch", format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn pixels_per_image(&self) -> usize {
        let (h, w, c) = self.dims();
        h * w * c
    }

    pub fn image(&self, i: usize) -> &[T] {
        self.images.row(i)
    }

    /// `[m, h·w·c]` view of the batch for fully-connected models.
    pub fn flatten(&self) -> Tensor<T> {
        self.images
            .reshape(vec![self.len(), self.pixels_per_image()])
            .expect("flattening preserves the element count")
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates batches with equal image dimensions.
    pub fn concat(batches: &[&Self]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| invalid("image_batch", "nothing to concatenate"))?;
        let dims = first.dims();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.dims() != dims {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.images.shape().to_vec(),
                    right: b.images.shape().to_vec(),
                });
            }
            data.extend_from_slice(b.images.data());
            labels.extend_from_slice(&b.labels);
        }
        let images = Tensor::new(vec![labels.len(), dims.0, dims.1, dims.2], data)?;
        Ok(Self { images, labels })
    }
}

/// Non-overlapping `factor×factor` average pooling of every image.
///
/// Output image `i` is the degraded version of input image `i`; labels are
/// carried over unchanged.
pub fn degrade<T: Scalar>(batch: &ImageBatch<T>, factor: usize) -> Result<ImageBatch<T>> {
    let (h, w, c) = batch.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(
            "degrade",
            format!("factor {factor} does not divide image size {h}x{w}"),
        ));
    }
    if factor == 1 {
        return Ok(batch.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::of_usize(factor * factor);
    let mut out = Vec::with_capacity(batch.len() * oh * ow * c);
    for n in 0..batch.len() {
        let img = batch.image(n);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let (y, x) = (oy * factor + dy, ox * factor + dx);
                            acc += img[(y * w + x) * c + ch];
                        }
                    }
                    // rounding can push a mean of ones a hair past 1
                    out.push((acc * inv).min(T::one()));
                }
            }
        }
    }
    let images = Tensor::new(vec![batch.len(), oh, ow, c], out)?;
    ImageBatch::new(images, batch.labels().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(h: usize, w: usize, data: &[f64]) -> ImageBatch<f64> {
        let m = data.len() / (h * w);
        ImageBatch::new(Tensor::from_f64(vec![m, h, w, 1], data).unwrap(), vec![0; m]).unwrap()
    }

    #[test]
    fn factor_one_is_identity() {
        let b = batch(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(degrade(&b, 1).unwrap(), b);
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let b = batch(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let d = degrade(&b, 2).unwrap();
        assert_eq!(d.dims(), (1, 1, 1));
        assert_eq!(d.images().data(), &[0.5]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let b = batch(4, 4, &[0.3; 16]);
        for f in [1, 2, 4] {
            let d = degrade(&b, f).unwrap();
            assert!(d.images().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn non_divisible_factor_errors() {
        let b = batch(4, 4, &[0.0; 16]);
        assert!(degrade(&b, 3).is_err());
        assert!(degrade(&b, 0).is_err());
    }

    #[test]
    fn pixel_range_enforced() {
        let t = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[1.5]).unwrap();
        assert!(ImageBatch::new(t, vec![0]).is_err());
    }

    #[test]
    fn multichannel_pooling_keeps_channels_apart() {
        // 2x2 image with 2 channels: channel 0 all 1, channel 1 all 0
        let t = Tensor::<f64>::from_f64(vec![1, 2, 2, 2], &[1., 0., 1., 0., 1., 0., 1., 0.]).unwrap();
        let d = degrade(&ImageBatch::new(t, vec![3]).unwrap(), 2).unwrap();
        assert_eq!(d.images().data(), &[1., 0.]);
        assert_eq!(d.labels(), &[3]);
    }
}

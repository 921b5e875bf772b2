//! A small strided segmentation network.
//!
//! Three 3x3 conv blocks (stride 2, 2, 1) form the feature extractor, so the
//! feature map sits at 1/4 of the input resolution; a 1x1 conv head scores
//! the classes; callers upsample the logits bilinearly back to image size.
//!
//! Weights are Kaiming-uniform (`±sqrt(6 / fan_in)`) from a counter-based
//! RNG, biases start at zero, and the draw order is fixed, so a seed fully
//! determines the network on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::{ops, Tensor, TensorError};

/// Spatial reduction factor between input and feature map.
pub const DOWNSAMPLE: usize = 4;

/// Channel widths of the first two extractor blocks.
pub const BLOCK_CHANNELS: [usize; 2] = [16, 32];

/// One convolution layer plus its geometry.
#[derive(Clone)]
pub struct Conv<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    pub(crate) fn init(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data: Vec<T> = (0..c_out * c_in * k * k)
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Conv {
            weight: Tensor::parameter(&[c_out, c_in, k, k], data).unwrap(),
            bias: Tensor::parameter(&[c_out], vec![T::zero(); c_out]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

/// Extractor + classifier head.
pub struct SegNet<T: Real> {
    pub classes: usize,
    pub feature_dim: usize,
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub conv3: Conv<T>,
    pub head: Conv<T>,
}

impl<T: Real> SegNet<T> {
    /// `classes` real classes (channel `c` scores class id `c + 1`),
    /// `feature_dim` channels in the aligned feature map.
    pub fn new(classes: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(classes >= 1 && feature_dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv::init(&mut rng, 3, BLOCK_CHANNELS[0], 3, 2, 1);
        let conv2 = Conv::init(&mut rng, BLOCK_CHANNELS[0], BLOCK_CHANNELS[1], 3, 2, 1);
        let conv3 = Conv::init(&mut rng, BLOCK_CHANNELS[1], feature_dim, 3, 1, 1);
        let head = Conv::init(&mut rng, feature_dim, classes, 1, 1, 0);
        SegNet {
            classes,
            feature_dim,
            conv1,
            conv2,
            conv3,
            head,
        }
    }

    /// Deepest feature map, `[feature_dim, h/4, w/4]`.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(self.taps(image)?.remove(0))
    }

    /// All three block outputs, deepest first:
    /// `[feature_dim, h/4, w/4]`, `[32, h/4, w/4]`, `[16, h/2, w/2]`.
    pub fn taps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>, TensorError> {
        let t1 = ops::relu(&self.conv1.forward(image)?);
        let t2 = ops::relu(&self.conv2.forward(&t1)?);
        let t3 = ops::relu(&self.conv3.forward(&t2)?);
        Ok(vec![t3, t2, t1])
    }

    /// Class scores at feature resolution, `[classes, h/4, w/4]`.
    pub fn logits_from(&self, features: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.head.forward(features)
    }

    /// Full forward: logits upsampled to `out_h x out_w`.
    pub fn predict(
        &self,
        image: &Tensor<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let f = self.features(image)?;
        let l = self.logits_from(&f)?;
        ops::bilinear_resize(&l, out_h, out_w)
    }

    /// Stable name → tensor pairs, in a fixed order shared by the optimizer
    /// and the checkpoint format.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(8);
        for (name, conv) in [
            ("net/conv1", &self.conv1),
            ("net/conv2", &self.conv2),
            ("net/conv3", &self.conv3),
            ("net/head", &self.head),
        ] {
            out.push((format!("{name}/weight"), conv.weight.clone()));
            out.push((format!("{name}/bias"), conv.bias.clone()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

//! Output-space adversarial baseline.
//!
//! A small fully-convolutional discriminator looks at softmax probability
//! maps and guesses which domain they came from. The segmentation network
//! is then also trained to make target-domain maps look source-like. Two
//! gradient barriers keep the game honest:
//!
//! - [`adversarial_loss`] (updates the segmenter) runs the discriminator
//!   with *detached parameters*, so only the probability map is pushed;
//! - [`discriminator_loss`] (updates the discriminator) detaches the
//!   probability maps, so the segmenter never sees this gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::net::Conv;
use crate::real::Real;
use crate::tensor::{ops, Tensor, TensorError};

/// Channel widths of the five discriminator stages.
pub const DISC_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1];

/// Negative slope of the leaky ReLUs between stages.
pub const LEAK: f64 = 0.2;

/// Probabilities are clamped here before the log.
pub const LOG_FLOOR: f64 = 1e-8;

/// Default weight of the adversarial term in the segmenter's total loss.
pub const DEFAULT_LAMBDA_ADV: f64 = 0.001;

/// Five 4x4 stride-2 convolutions; each stage halves the extent, so inputs
/// must be at least 32x32 for the last stage to see a non-empty map.
pub struct Discriminator<T: Real> {
    pub convs: Vec<Conv<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(5);
        let mut c_in = in_channels;
        for c_out in DISC_CHANNELS {
            convs.push(Conv::init(&mut rng, c_in, c_out, 4, 2, 1));
            c_in = c_out;
        }
        Discriminator { convs }
    }

    fn forward_with(convs: &[Conv<T>], probs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut x = probs.clone();
        let last = convs.len() - 1;
        for (i, conv) in convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = ops::leaky_relu(&x, T::from_f64(LEAK));
            }
        }
        Ok(ops::sigmoid(&x))
    }

    /// Domain score map in `(0, 1)`, shape `[1, h/32, w/32]`.
    pub fn forward(&self, probs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Self::forward_with(&self.convs, probs)
    }

    /// Same forward pass but through detached copies of the weights:
    /// gradients flow into `probs` only.
    pub fn forward_frozen(&self, probs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let frozen: Vec<Conv<T>> = self
            .convs
            .iter()
            .map(|c| Conv {
                weight: c.weight.detach(),
                bias: c.bias.detach(),
                stride: c.stride,
                pad: c.pad,
            })
            .collect();
        Self::forward_with(&frozen, probs)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(10);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("disc/conv{}/weight", i + 1), c.weight.clone()));
            out.push((format!("disc/conv{}/bias", i + 1), c.bias.clone()));
        }
        out
    }
}

/// Loss pushing the segmenter to fool the discriminator on target maps:
/// `-sum log D(target_probs)`, discriminator frozen.
pub fn adversarial_loss<T: Real>(
    disc: &Discriminator<T>,
    target_probs: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let score = disc.forward_frozen(target_probs)?;
    Ok(ops::neg_log_sum(&score, T::from_f64(LOG_FLOOR)))
}

/// Discriminator's own objective:
/// `-sum [log(1 - D(target)) + log D(source)]`, probability maps detached.
pub fn discriminator_loss<T: Real>(
    disc: &Discriminator<T>,
    source_probs: &Tensor<T>,
    target_probs: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let on_target = disc.forward(&target_probs.detach())?;
    let on_source = disc.forward(&source_probs.detach())?;
    let one = T::one();
    let fooled = ops::neg_log_sum(&ops::affine(&on_target, -one, one), T::from_f64(LOG_FLOOR));
    let spotted = ops::neg_log_sum(&on_source, T::from_f64(LOG_FLOOR));
    ops::add(&fooled, &spotted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// All-zero parameters make every stage output zero, so the final
    /// sigmoid sits at exactly 0.5 everywhere — handy for frozen values.
    fn zeroed(in_channels: usize) -> Discriminator<f64> {
        let d = Discriminator::<f64>::new(in_channels, 0);
        for (_, p) in d.parameters() {
            let n = p.numel();
            p.set_data(&vec![0.0; n]).unwrap();
        }
        d
    }

    #[test]
    fn five_stages_shrink_by_thirty_two() {
        let d = Discriminator::<f32>::new(5, 0);
        let probs = Tensor::zeros(&[5, 64, 64]);
        let s = d.forward(&probs).unwrap();
        assert_eq!(s.shape(), &[1, 2, 2]);
        let probs32 = Tensor::zeros(&[5, 32, 32]);
        assert_eq!(d.forward(&probs32).unwrap().shape(), &[1, 1, 1]);
    }

    #[test]
    fn undersized_input_is_an_error_not_a_panic() {
        let d = Discriminator::<f32>::new(3, 0);
        let tiny = Tensor::zeros(&[3, 16, 16]);
        assert!(d.forward(&tiny).is_err());
    }

    #[test]
    fn adversarial_loss_at_half_scores() {
        // 64x64 input -> 4 score cells at 0.5: loss = 4 ln 2.
        let d = zeroed(2);
        let probs = Tensor::<f64>::new(&[2, 64, 64], vec![0.5; 2 * 64 * 64]).unwrap();
        let loss = adversarial_loss(&d, &probs).unwrap();
        assert_relative_eq!(loss.value(), 4.0 * (2.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn discriminator_loss_at_half_scores() {
        let d = zeroed(2);
        let s = Tensor::<f64>::new(&[2, 32, 32], vec![0.3; 2 * 32 * 32]).unwrap();
        let t = Tensor::<f64>::new(&[2, 32, 32], vec![0.7; 2 * 32 * 32]).unwrap();
        // One score cell per side, both at 0.5: -(ln .5 + ln .5) = 2 ln 2.
        let loss = discriminator_loss(&d, &s, &t).unwrap();
        assert_relative_eq!(loss.value(), 2.0 * (2.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn adversarial_loss_reaches_probs_but_not_disc_weights() {
        let d = Discriminator::<f64>::new(2, 3);
        let probs = Tensor::<f64>::parameter(&[2, 32, 32], vec![0.5; 2 * 32 * 32]).unwrap();
        let loss = adversarial_loss(&d, &probs).unwrap();
        loss.backward().unwrap();
        assert!(probs.grad().is_some(), "segmenter side must receive gradient");
        for (name, p) in d.parameters() {
            assert!(p.grad().is_none(), "{name} must stay frozen");
        }
    }

    #[test]
    fn discriminator_loss_reaches_disc_weights_but_not_probs() {
        let d = Discriminator::<f64>::new(2, 3);
        let s = Tensor::<f64>::parameter(&[2, 32, 32], vec![0.4; 2 * 32 * 32]).unwrap();
        let t = Tensor::<f64>::parameter(&[2, 32, 32], vec![0.6; 2 * 32 * 32]).unwrap();
        let loss = discriminator_loss(&d, &s, &t).unwrap();
        loss.backward().unwrap();
        assert!(s.grad().is_none(), "probability maps are detached here");
        assert!(t.grad().is_none());
        let with_grad = d
            .parameters()
            .iter()
            .filter(|(_, p)| p.grad().is_some())
            .count();
        assert_eq!(with_grad, 10, "every disc tensor gets gradient");
    }

    #[test]
    fn parameter_names_are_stable() {
        let d = Discriminator::<f32>::new(4, 0);
        let names: Vec<String> = d.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "disc/conv1/weight");
        assert_eq!(names[9], "disc/conv5/bias");
    }
}

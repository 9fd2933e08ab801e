//! Weight Layer: multiplicative fusion of stride-4 low-level features with
//! hints decoded from the top pyramid level.
//!
//! High path: transposed convolution bringing res5 from stride 16 to stride
//! 4, then two 3x3 conv+BN+ReLU blocks. Low path: two conv+BN+ReLU blocks on
//! the [res1, res2, up(res3)] concatenation. The two paths multiply
//! elementwise, so a silent high path gates the output to zero.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ConvTranspose2d, FrozenBatchNorm, ParamStore};

/// Fused feature width.
pub const FUSED_CHANNELS: usize = 64;

pub struct WeightLayer {
    high_up: ConvTranspose2d,
    high_conv1: Conv2d,
    high_bn1: FrozenBatchNorm,
    high_conv2: Conv2d,
    high_bn2: FrozenBatchNorm,
    low_conv1: Conv2d,
    low_bn1: FrozenBatchNorm,
    low_conv2: Conv2d,
    low_bn2: FrozenBatchNorm,
}

impl WeightLayer {
    pub fn new(
        store: &ParamStore,
        name: &str,
        high_c: usize,
        low_c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = FUSED_CHANNELS;
        Ok(WeightLayer {
            high_up: ConvTranspose2d::new(store, &format!("{name}.high.up"), high_c, c, 4, 4, 0, rng)?,
            high_conv1: Conv2d::new(store, &format!("{name}.high.conv1"), c, c, 3, 1, 1, 1, rng)?,
            high_bn1: FrozenBatchNorm::new(store, &format!("{name}.high.bn1"), c, rng)?,
            high_conv2: Conv2d::new(store, &format!("{name}.high.conv2"), c, c, 3, 1, 1, 1, rng)?,
            high_bn2: FrozenBatchNorm::new(store, &format!("{name}.high.bn2"), c, rng)?,
            low_conv1: Conv2d::new(store, &format!("{name}.low.conv1"), low_c, c, 3, 1, 1, 1, rng)?,
            low_bn1: FrozenBatchNorm::new(store, &format!("{name}.low.bn1"), c, rng)?,
            low_conv2: Conv2d::new(store, &format!("{name}.low.conv2"), c, c, 3, 1, 1, 1, rng)?,
            low_bn2: FrozenBatchNorm::new(store, &format!("{name}.low.bn2"), c, rng)?,
        })
    }

    pub fn forward(&self, res5: &Tensor, low_cat: &Tensor) -> candle_core::Result<Tensor> {
        let mut high = self.high_up.forward(res5)?;
        high = self.high_bn1.forward(&self.high_conv1.forward(&high)?)?.relu()?;
        high = self.high_bn2.forward(&self.high_conv2.forward(&high)?)?.relu()?;
        let mut low = self.low_bn1.forward(&self.low_conv1.forward(low_cat)?)?.relu()?;
        low = self.low_bn2.forward(&self.low_conv2.forward(&low)?)?.relu()?;
        high.mul(&low)
    }
}

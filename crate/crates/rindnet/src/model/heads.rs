//! Decision heads producing single-channel logit maps.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Conv2d, ParamStore};

const HIDDEN: usize = 16;

/// RE/IE head: a 3x3 convolution then a 1x1 convolution.
pub struct ReIeHead {
    conv3: Conv2d,
    conv1: Conv2d,
    in_channels: usize,
}

impl ReIeHead {
    pub fn new(store: &ParamStore, name: &str, in_c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ReIeHead {
            conv3: Conv2d::new(store, &format!("{name}.conv3"), in_c, HIDDEN, 3, 1, 1, 1, rng)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), HIDDEN, 1, 1, 1, 0, 1, rng)?,
            in_channels: in_c,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.conv1.forward(&self.conv3.forward(x)?.relu()?)
    }
}

/// NE/DE head: three 1x1 convolutions, so its receptive field is exactly one
/// pixel.
pub struct NeDeHead {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    in_channels: usize,
}

impl NeDeHead {
    pub fn new(store: &ParamStore, name: &str, in_c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(NeDeHead {
            c1: Conv2d::new(store, &format!("{name}.conv1"), in_c, HIDDEN, 1, 1, 0, 1, rng)?,
            c2: Conv2d::new(store, &format!("{name}.conv2"), HIDDEN, HIDDEN, 1, 1, 0, 1, rng)?,
            c3: Conv2d::new(store, &format!("{name}.conv3"), HIDDEN, 1, 1, 1, 0, 1, rng)?,
            in_channels: in_c,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.c1.forward(x)?.relu()?;
        let x = self.c2.forward(&x)?.relu()?;
        self.c3.forward(&x)
    }
}

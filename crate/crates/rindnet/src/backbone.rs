//! Five-level feature pyramid from a 50-layer residual backbone.
//!
//! Stride schedule: res1 (stem conv + pool) and res2 sit at stride 4, res3 at
//! stride 8, res4 at stride 16, and the final stage keeps stride 16 by using
//! dilation 2 in place of a further stride. Channel counts are the standard
//! bottleneck widths 64/256/512/1024/2048.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, FrozenBatchNorm, LoadReport, ParamStore};

/// Feature maps res1..res5. For an input of size H x W (divisible by 16):
/// res1 `[64, H/4, W/4]`, res2 `[256, H/4, W/4]`, res3 `[512, H/8, W/8]`,
/// res4 `[1024, H/16, W/16]`, res5 `[2048, H/16, W/16]`.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub res1: Tensor,
    pub res2: Tensor,
    pub res3: Tensor,
    pub res4: Tensor,
    pub res5: Tensor,
}

impl FeaturePyramid {
    pub fn level(&self, k: usize) -> &Tensor {
        match k {
            1 => &self.res1,
            2 => &self.res2,
            3 => &self.res3,
            4 => &self.res4,
            5 => &self.res5,
            _ => panic!("pyramid level {k} out of range 1..=5"),
        }
    }

    /// (channels, stride) of each level.
    pub const SCHEDULE: [(usize, usize); 5] =
        [(64, 4), (256, 4), (512, 8), (1024, 16), (2048, 16)];
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        mid_c: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out_c = 4 * mid_c;
        let conv1 = Conv2d::new_no_bias(store, &format!("{name}.conv1"), in_c, mid_c, 1, 1, 0, 1, rng)?;
        let bn1 = FrozenBatchNorm::new(store, &format!("{name}.bn1"), mid_c, rng)?;
        let conv2 = Conv2d::new_no_bias(
            store,
            &format!("{name}.conv2"),
            mid_c,
            mid_c,
            3,
            stride,
            dilation,
            dilation,
            rng,
        )?;
        let bn2 = FrozenBatchNorm::new(store, &format!("{name}.bn2"), mid_c, rng)?;
        let conv3 = Conv2d::new_no_bias(store, &format!("{name}.conv3"), mid_c, out_c, 1, 1, 0, 1, rng)?;
        let bn3 = FrozenBatchNorm::new(store, &format!("{name}.bn3"), out_c, rng)?;
        let downsample = if stride != 1 || in_c != out_c {
            let conv = Conv2d::new_no_bias(
                store,
                &format!("{name}.downsample.conv"),
                in_c,
                out_c,
                1,
                stride,
                0,
                1,
                rng,
            )?;
            let bn = FrozenBatchNorm::new(store, &format!("{name}.downsample.bn"), out_c, rng)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        (shortcut + y)?.relu()
    }
}

pub struct Backbone {
    stem_conv: Conv2d,
    stem_bn: FrozenBatchNorm,
    stages: [Vec<Bottleneck>; 4],
}

impl Backbone {
    /// Residual stage depths of the 50-layer configuration.
    pub const DEPTHS: [usize; 4] = [3, 4, 6, 3];

    pub fn new(store: &ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let stem_conv = Conv2d::new_no_bias(store, "backbone.conv1", 3, 64, 7, 2, 3, 1, rng)?;
        let stem_bn = FrozenBatchNorm::new(store, "backbone.bn1", 64, rng)?;
        // (mid channels, first-block stride, dilation)
        let plan = [(64, 1, 1), (128, 2, 1), (256, 2, 1), (512, 1, 2)];
        let mut stages: [Vec<Bottleneck>; 4] = [vec![], vec![], vec![], vec![]];
        let mut in_c = 64;
        for (si, (mid, stride, dilation)) in plan.into_iter().enumerate() {
            for bi in 0..Self::DEPTHS[si] {
                let s = if bi == 0 { stride } else { 1 };
                let block = Bottleneck::new(
                    store,
                    &format!("backbone.layer{}.{bi}", si + 1),
                    in_c,
                    mid,
                    s,
                    dilation,
                    rng,
                )?;
                stages[si].push(block);
                in_c = 4 * mid;
            }
        }
        Ok(Backbone {
            stem_conv,
            stem_bn,
            stages,
        })
    }

    /// Forward pass to all five pyramid levels. Requires H and W divisible
    /// by 16; callers that cannot guarantee this pad first and un-pad after.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image
            .dims4()
            .map_err(|_| Error::Data("backbone input must be [B,3,H,W]".into()))?;
        if c != 3 {
            return Err(Error::Data(format!("backbone expects 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Data(format!(
                "backbone input {h}x{w} is not divisible by 16; pad before calling"
            )));
        }
        let x = self
            .stem_bn
            .forward(&self.stem_conv.forward(image)?)?
            .relu()?;
        let res1 = x.max_pool2d_with_stride(2, 2)?;
        let mut x = res1.clone();
        for block in &self.stages[0] {
            x = block.forward(&x)?;
        }
        let res2 = x.clone();
        for block in &self.stages[1] {
            x = block.forward(&x)?;
        }
        let res3 = x.clone();
        for block in &self.stages[2] {
            x = block.forward(&x)?;
        }
        let res4 = x.clone();
        for block in &self.stages[3] {
            x = block.forward(&x)?;
        }
        Ok(FeaturePyramid {
            res1,
            res2,
            res3,
            res4,
            res5: x,
        })
    }
}

/// Initialize backbone parameters from a weight archive (safetensors +
/// manifest, tensor names under `backbone.`). Returns the match report; in
/// strict mode every backbone parameter must be provided.
pub fn load_pretrained(store: &ParamStore, path: &std::path::Path, strict: bool) -> Result<LoadReport> {
    store.load(path, Some("backbone."), strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn build() -> (ParamStore, Backbone) {
        let store = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let backbone = Backbone::new(&store, &mut rng).unwrap();
        (store, backbone)
    }

    fn shape_of(t: &Tensor) -> Vec<usize> {
        t.dims().to_vec()
    }

    #[test]
    fn pyramid_shapes_follow_stride_schedule() {
        let (_, backbone) = build();
        for (h, w) in [(32usize, 48usize), (64, 64), (48, 80)] {
            let x = Tensor::zeros((1, 3, h, w), candle_core::DType::F32, &Device::Cpu).unwrap();
            let p = backbone.forward(&x).unwrap();
            assert_eq!(shape_of(&p.res1), vec![1, 64, h / 4, w / 4]);
            assert_eq!(shape_of(&p.res2), vec![1, 256, h / 4, w / 4]);
            assert_eq!(shape_of(&p.res3), vec![1, 512, h / 8, w / 8]);
            assert_eq!(shape_of(&p.res4), vec![1, 1024, h / 16, w / 16]);
            assert_eq!(shape_of(&p.res5), vec![1, 2048, h / 16, w / 16]);
        }
    }

    #[test]
    fn res5_at_160_is_10x10() {
        let (_, backbone) = build();
        let x = Tensor::zeros((1, 3, 160, 160), candle_core::DType::F32, &Device::Cpu).unwrap();
        let p = backbone.forward(&x).unwrap();
        assert_eq!(shape_of(&p.res5), vec![1, 2048, 10, 10]);
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let (_, backbone) = build();
        let x = Tensor::zeros((1, 3, 40, 48), candle_core::DType::F32, &Device::Cpu).unwrap();
        let err = backbone.forward(&x).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn inference_is_deterministic() {
        let (_, backbone) = build();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = backbone.forward(&x).unwrap();
        let b = backbone.forward(&x).unwrap();
        let va: Vec<f32> = a.res5.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.res5.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn pyramid_is_finite_with_loaded_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.safetensors");
        let (store, _) = build();
        store.save(&path).unwrap();

        let (store2, backbone2) = build();
        let report = load_pretrained(&store2, &path, true).unwrap();
        assert!(report.missing.is_empty());
        assert!(!report.matched.is_empty());

        // a synthetic "natural" image: smooth gradients plus a bright patch
        let mut data = vec![0f32; 3 * 64 * 64];
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    let v = 0.2 + 0.6 * (x as f32 / 63.0) * (c as f32 + 1.0) / 3.0
                        + if (16..32).contains(&y) && (16..32).contains(&x) {
                            0.3
                        } else {
                            0.0
                        };
                    data[c * 64 * 64 + y * 64 + x] = v;
                }
            }
        }
        let x = Tensor::from_vec(data, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = backbone2.forward(&x).unwrap();
        for t in [&p.res1, &p.res2, &p.res3, &p.res4, &p.res5] {
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "non-finite activation");
        }
        let mean: f32 = p
            .res5
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(mean.is_finite() && mean > 0.0, "res5 mean {mean}");
    }

    #[test]
    fn classifier_only_archive_fails_strict_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.safetensors");
        let donor = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        donor
            .var("fc.weight", &[10, 2048], crate::nn::Init::Zeros, &mut rng, true)
            .unwrap();
        donor.save(&path).unwrap();

        let (store, _) = build();
        let err = load_pretrained(&store, &path, true).unwrap_err();
        assert!(err.to_string().contains("unmatched"), "{err}");
        // non-strict still runs forward on random init
        let report = load_pretrained(&store, &path, false).unwrap();
        assert!(report.matched.is_empty());
        assert_eq!(report.unused, vec!["fc.weight"]);
    }
}

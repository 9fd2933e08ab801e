//! The three-stage edge detector.
//!
//! Stage I extracts the shared feature pyramid and per-level spatial cues.
//! Stage II prepares type-specific features: the RE/IE branch fuses low-level
//! features under high-level guidance (Weight Layer) before decoding, the
//! NE/DE branch decodes the top level directly, with the second decoder
//! stream shared between NE and DE. Stage III runs four decision heads over
//! decoded features plus spatial cues, and an image-driven attention map
//! reweights the initial logits into the final probabilities:
//! `Y = sigmoid(O * (1 + A_edge))`.

mod attention;
mod decoder;
mod heads;
mod spatial;
mod weight_layer;

pub use attention::AttentionModule;
pub use decoder::{Decoder, DecoderStream, STREAM_CHANNELS};
pub use heads::{NeDeHead, ReIeHead};
pub use spatial::{SpatialLayer, CUE_CHANNELS};
pub use weight_layer::{WeightLayer, FUSED_CHANNELS};

use candle_core::Tensor;
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::{DecoderStreams, FeedLevel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{bilinear_upsample_x2, Conv2d, ParamStore};

/// Per-channel input normalization, the convention of the pretrained
/// backbone lineage.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Channels of the stride-4 concatenation [res1, res2, up(res3)].
pub const LOW_CAT_CHANNELS: usize = 64 + 256 + 512;

/// One forward pass worth of outputs.
pub struct PredictionSet {
    /// Initial logits `[B, 4, H, W]`, type order (r, i, n, d).
    pub o: Tensor,
    /// Attention maps `[B, 5, H, W]` (background first), or `[B, 2, H, W]`
    /// in generic mode. Per-pixel channel sums are 1.
    pub a: Tensor,
    /// Final probabilities `[B, 4, H, W]`.
    pub y: Tensor,
}

/// Final fusion: `sigmoid(O * (1 + A_edge))` where `A_edge` stacks the four
/// edge channels of the attention map (the background channel is only used
/// by the training loss).
pub fn fuse_final(o: &Tensor, a: &Tensor) -> Result<Tensor> {
    let channels = a.dims4()?.1;
    let edge = match channels {
        5 => a.narrow(1, 1, 4)?,
        // generic mode: a single edge channel gates all four logit planes
        2 => a.narrow(1, 1, 1)?.broadcast_as(o.dims4()?)?,
        c => {
            return Err(Error::Config(format!(
                "attention map must have 5 (or 2 in generic mode) channels, got {c}"
            )))
        }
    };
    Ok(candle_nn::ops::sigmoid(&o.mul(&(edge + 1.0)?)?)?)
}

pub struct RindNet {
    cfg: ModelConfig,
    backbone: Backbone,
    spatial: Vec<SpatialLayer>,
    wl_r: Option<WeightLayer>,
    wl_i: Option<WeightLayer>,
    dec_r: Decoder,
    dec_i: Decoder,
    dec_n: Decoder,
    dec_d: Decoder,
    head_r: ReIeHead,
    head_i: ReIeHead,
    head_n: NeDeHead,
    head_d: NeDeHead,
    am: Option<AttentionModule>,
    generic_head: Option<Conv2d>,
}

fn feed_shape(feed: FeedLevel, use_wl: bool) -> (usize, usize) {
    // (input channels, upsampling steps to full resolution)
    match feed {
        FeedLevel::Low => {
            if use_wl {
                (FUSED_CHANNELS, 2)
            } else {
                (LOW_CAT_CHANNELS, 2)
            }
        }
        FeedLevel::High => (2048, 4),
    }
}

impl RindNet {
    pub fn new(cfg: &ModelConfig, store: &ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, rng)?;
        let mut spatial = Vec::with_capacity(5);
        for (k, (channels, stride)) in FeaturePyramid::SCHEDULE.iter().enumerate() {
            spatial.push(SpatialLayer::new(
                store,
                &format!("spatial.{}", k + 1),
                *channels,
                *stride,
                rng,
            )?);
        }

        let use_wl = cfg.use_wl && cfg.re_ie_feed == FeedLevel::Low;
        let (wl_r, wl_i) = if use_wl {
            (
                Some(WeightLayer::new(store, "wl.r", 2048, LOW_CAT_CHANNELS, rng)?),
                Some(WeightLayer::new(store, "wl.i", 2048, LOW_CAT_CHANNELS, rng)?),
            )
        } else {
            (None, None)
        };

        let (ri_in, ri_steps) = feed_shape(cfg.re_ie_feed, use_wl);
        let (nd_in, nd_steps) = feed_shape(cfg.ne_de_feed, false);
        let two = cfg.decoder_streams == DecoderStreams::Two;

        let s2 = |ty: &str| format!("decoder.{ty}.stream2");
        let dec_r = Decoder::new(
            store,
            "decoder.r.stream1",
            two.then(|| s2("r")).as_deref(),
            ri_in,
            ri_steps,
            rng,
        )?;
        let dec_i = Decoder::new(
            store,
            "decoder.i.stream1",
            two.then(|| s2("i")).as_deref(),
            ri_in,
            ri_steps,
            rng,
        )?;
        // NE and DE request the same second-stream names when sharing, which
        // aliases the underlying parameter storage.
        let shared = "decoder.nd_shared.stream2".to_string();
        let n2 = if cfg.ne_de_share_second_stream {
            shared.clone()
        } else {
            s2("n")
        };
        let d2 = if cfg.ne_de_share_second_stream {
            shared
        } else {
            s2("d")
        };
        let dec_n = Decoder::new(
            store,
            "decoder.n.stream1",
            two.then_some(n2.as_str()),
            nd_in,
            nd_steps,
            rng,
        )?;
        let dec_d = Decoder::new(
            store,
            "decoder.d.stream1",
            two.then_some(d2.as_str()),
            nd_in,
            nd_steps,
            rng,
        )?;

        let ri_head_in = dec_r.out_channels() + CUE_CHANNELS * cfg.re_ie_spatial.len();
        let nd_head_in = dec_n.out_channels() + CUE_CHANNELS * cfg.ne_de_spatial.len();
        let head_r = ReIeHead::new(store, "head.r", ri_head_in, rng)?;
        let head_i = ReIeHead::new(store, "head.i", ri_head_in, rng)?;
        let head_n = NeDeHead::new(store, "head.n", nd_head_in, rng)?;
        let head_d = NeDeHead::new(store, "head.d", nd_head_in, rng)?;

        let am = if cfg.use_am {
            let channels = if cfg.generic_mode { 2 } else { 5 };
            Some(AttentionModule::new(store, "am", channels, rng)?)
        } else {
            None
        };
        let generic_head = if cfg.generic_mode {
            Some(Conv2d::new(store, "generic.fuse", 4, 1, 1, 1, 0, 1, rng)?)
        } else {
            None
        };

        Ok(RindNet {
            cfg: cfg.clone(),
            backbone,
            spatial,
            wl_r,
            wl_i,
            dec_r,
            dec_i,
            dec_n,
            dec_d,
            head_r,
            head_i,
            head_n,
            head_d,
            am,
            generic_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head_r(&self) -> &ReIeHead {
        &self.head_r
    }

    pub fn head_n(&self) -> &NeDeHead {
        &self.head_n
    }

    fn cues(&self, pyramid: &FeaturePyramid, levels: &[usize]) -> candle_core::Result<Vec<Tensor>> {
        levels
            .iter()
            .map(|&k| self.spatial[k - 1].forward(pyramid.level(k)))
            .collect()
    }

    fn head_input(decoded: &Tensor, cues: &[Tensor]) -> candle_core::Result<Tensor> {
        if cues.is_empty() {
            return Ok(decoded.clone());
        }
        let mut parts = vec![decoded.clone()];
        parts.extend_from_slice(cues);
        Tensor::cat(&parts, 1)
    }

    /// Full forward pass. The input must be preprocessed ([`preprocess`]) and
    /// have H, W divisible by 16.
    pub fn forward_full(&self, image: &Tensor) -> Result<PredictionSet> {
        let (b, _, h, w) = image.dims4()?;
        let pyramid = self.backbone.forward(image)?;

        let needs_low =
            self.cfg.re_ie_feed == FeedLevel::Low || self.cfg.ne_de_feed == FeedLevel::Low;
        let low_cat = if needs_low {
            let up3 = bilinear_upsample_x2(&pyramid.res3)?;
            Some(Tensor::cat(&[&pyramid.res1, &pyramid.res2, &up3], 1)?)
        } else {
            None
        };

        let ri_input_r;
        let ri_input_i;
        match self.cfg.re_ie_feed {
            FeedLevel::Low => {
                let low = low_cat.as_ref().expect("low concatenation built above");
                match (&self.wl_r, &self.wl_i) {
                    (Some(wr), Some(wi)) => {
                        ri_input_r = wr.forward(&pyramid.res5, low)?;
                        ri_input_i = wi.forward(&pyramid.res5, low)?;
                    }
                    _ => {
                        ri_input_r = low.clone();
                        ri_input_i = low.clone();
                    }
                }
            }
            FeedLevel::High => {
                ri_input_r = pyramid.res5.clone();
                ri_input_i = pyramid.res5.clone();
            }
        }
        let nd_input = match self.cfg.ne_de_feed {
            FeedLevel::High => pyramid.res5.clone(),
            FeedLevel::Low => low_cat.as_ref().expect("low concatenation built above").clone(),
        };

        let f_r = self.dec_r.forward(&ri_input_r)?;
        let f_i = self.dec_i.forward(&ri_input_i)?;
        let f_n = self.dec_n.forward(&nd_input)?;
        let f_d = self.dec_d.forward(&nd_input)?;

        let cues_ri = self.cues(&pyramid, &self.cfg.re_ie_spatial)?;
        let cues_nd = self.cues(&pyramid, &self.cfg.ne_de_spatial)?;

        let o_r = self.head_r.forward(&Self::head_input(&f_r, &cues_ri)?)?;
        let o_i = self.head_i.forward(&Self::head_input(&f_i, &cues_ri)?)?;
        let o_n = self.head_n.forward(&Self::head_input(&f_n, &cues_nd)?)?;
        let o_d = self.head_d.forward(&Self::head_input(&f_d, &cues_nd)?)?;
        let o = Tensor::cat(&[&o_r, &o_i, &o_n, &o_d], 1)?;

        let (a, y) = match &self.am {
            Some(am) => {
                let a = am.forward(image)?;
                let y = fuse_final(&o, &a)?;
                (a, y)
            }
            None => {
                // without the attention module the final prediction is the
                // plain sigmoid of the initial logits
                let channels = if self.cfg.generic_mode { 2 } else { 5 };
                let a = Tensor::full(1.0f32 / channels as f32, (b, channels, h, w), image.device())?;
                let y = candle_nn::ops::sigmoid(&o)?;
                (a, y)
            }
        };
        Ok(PredictionSet { o, a, y })
    }

    /// Generic-edge forward: one probability map from a 1x1 convolution over
    /// the four final maps.
    pub fn forward_generic(&self, image: &Tensor) -> Result<(Tensor, PredictionSet)> {
        let Some(head) = &self.generic_head else {
            return Err(Error::Config(
                "forward_generic requires generic_mode = true".into(),
            ));
        };
        let set = self.forward_full(image)?;
        let p = candle_nn::ops::sigmoid(&head.forward(&set.y)?)?;
        Ok((p, set))
    }
}

/// Normalize an RGB `[3, H, W]` array into a `[1, 3, H, W]` model input.
pub fn preprocess(image: &Array3<f32>, device: &candle_core::Device) -> Result<Tensor> {
    preprocess_batch(std::slice::from_ref(image), device)
}

/// Normalize a batch of equally sized RGB arrays into `[B, 3, H, W]`.
pub fn preprocess_batch(images: &[Array3<f32>], device: &candle_core::Device) -> Result<Tensor> {
    let (c, h, w) = images
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .dim();
    if c != 3 {
        return Err(Error::Data(format!("expected 3 image channels, got {c}")));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::Data("batch images must share dimensions".into()));
        }
        for ch in 0..3 {
            let mean = INPUT_MEAN[ch];
            let std = INPUT_STD[ch];
            for y in 0..h {
                for x in 0..w {
                    data.push((img[[ch, y, x]] - mean) / std);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

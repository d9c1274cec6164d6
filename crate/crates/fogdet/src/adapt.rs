//! Domain-adaptation heads on the shared backbone: gradient-reversal domain
//! discriminator, depth estimation block, and reconstruction decoder.
//!
//! All heads attach to the final stride-16 feature map. The discriminator is
//! image-level: features pass through the reversal layer, a small conv
//! stack, global average pooling, and a single logit.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::DepthMap;
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::init::{conv_init, linear_init};
use crate::nn::tape::{Binding, Tape, TensorId};
use crate::nn::{ParamId, ParamSet};

/// Reversed-gradient scale. Forward is always the identity; `lambda` only
/// shapes the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlCoefficient {
    pub lambda: f64,
}

impl GrlCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(GrlCoefficient { lambda })
    }

    /// Linear warm-up from 0 to `max` over the first half of training, then
    /// flat at `max`.
    pub fn warmup(step: usize, total_steps: usize, max: f64) -> Self {
        let half = (total_steps as f64) * 0.5;
        let progress = if half > 0.0 {
            (step as f64 / half).min(1.0)
        } else {
            1.0
        };
        GrlCoefficient {
            lambda: max * progress,
        }
    }
}

/// Identity forward; upstream gradient times −lambda on the way back.
pub fn grad_reverse(t: &mut Tape, x: TensorId, lambda: GrlCoefficient) -> TensorId {
    t.grl(x, lambda.lambda)
}

/// Channel widths of the three heads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdaptConfig {
    pub disc_channels: usize,
    pub depth_channels: usize,
    /// Decoder widths after each 2x upsampling stage (coarse to fine).
    pub decoder_channels: [usize; 4],
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            disc_channels: 64,
            depth_channels: 64,
            decoder_channels: [128, 64, 32, 16],
        }
    }
}

impl AdaptConfig {
    /// Small configuration matching [`crate::detector::ArchConfig::desk`].
    pub fn desk() -> Self {
        AdaptConfig {
            disc_channels: 16,
            depth_channels: 16,
            decoder_channels: [24, 16, 12, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disc_channels == 0 || self.depth_channels == 0 {
            return Err(Error::invalid("head channel widths must be >= 1"));
        }
        if self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("decoder channel widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvSpec {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

/// Depth prediction on the tape: the pre-activation plane and the positive
/// depth plane `exp(pre_log)`, both shaped (1, 1, Hf, Wf). The depth loss
/// operates on `pre_log` directly, since L1 in log-depth space is
/// `|pre_log − ln d|`.
pub struct DepthEstimate {
    pub pre_log: TensorId,
    pub depth: TensorId,
}

/// Parameters and wiring of the discriminator, depth head, and decoder.
pub struct AdaptHeads {
    pub cfg: AdaptConfig,
    pub backbone_channels: usize,
    pub params: ParamSet,
    disc_conv1: ConvSpec,
    disc_conv2: ConvSpec,
    disc_fc: (ParamId, ParamId),
    depth_conv1: ConvSpec,
    depth_out: ConvSpec,
    dec_convs: Vec<ConvSpec>,
    dec_out: ConvSpec,
}

impl AdaptHeads {
    pub fn new<R: Rng>(cfg: AdaptConfig, backbone_channels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if backbone_channels == 0 {
            return Err(Error::invalid("backbone channel count must be >= 1"));
        }
        let mut params = ParamSet::new();
        let conv = |rng: &mut R, params: &mut ParamSet, name: &str, cout, cin, k, stride, pad| {
            let (w, b) = conv_init(rng, params, name, cout, cin, k);
            ConvSpec { w, b, stride, pad }
        };
        let dc = cfg.disc_channels;
        let disc_conv1 = conv(rng, &mut params, "disc.conv1", dc, backbone_channels, 3, 1, 1);
        let disc_conv2 = conv(rng, &mut params, "disc.conv2", dc, dc, 3, 1, 1);
        let disc_fc = linear_init(rng, &mut params, "disc.fc", dc, 1);

        let hc = cfg.depth_channels;
        let depth_conv1 = conv(rng, &mut params, "depth.conv1", hc, backbone_channels, 3, 1, 1);
        let depth_out = conv(rng, &mut params, "depth.out", 1, hc, 1, 1, 0);

        let mut dec_convs = Vec::new();
        let mut cin = backbone_channels;
        for (i, &cout) in cfg.decoder_channels.iter().enumerate() {
            dec_convs.push(conv(rng, &mut params, &format!("dec.conv{i}"), cout, cin, 3, 1, 1));
            cin = cout;
        }
        let dec_out = conv(rng, &mut params, "dec.out", 3, cin, 3, 1, 1);

        Ok(AdaptHeads {
            cfg,
            backbone_channels,
            params,
            disc_conv1,
            disc_conv2,
            disc_fc,
            depth_conv1,
            depth_out,
            dec_convs,
            dec_out,
        })
    }

    /// Rebuild wiring over an existing parameter set (checkpoint load).
    pub fn from_params(cfg: AdaptConfig, backbone_channels: usize, params: ParamSet) -> Result<Self> {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = AdaptHeads::new(cfg, backbone_channels, &mut rng)?;
        if !template.params.same_layout(&params) {
            return Err(Error::invalid(
                "parameter set does not match the adaptation head layout",
            ));
        }
        Ok(AdaptHeads { params, ..template })
    }

    fn check_features(&self, t: &Tape, f: &FeatureMap) -> Result<()> {
        let shape = t.value(f.tensor).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.backbone_channels {
            return Err(Error::invalid(format!(
                "feature tensor {shape:?} does not match head input channels {}",
                self.backbone_channels
            )));
        }
        Ok(())
    }

    fn apply_conv(&self, t: &mut Tape, bind: &Binding, s: &ConvSpec, x: TensorId) -> TensorId {
        let y = t.conv2d(x, bind.ids[s.w], s.stride, s.pad);
        t.bias_add4(y, bind.ids[s.b])
    }

    /// Domain logit per image, shape (N, 1). Features pass through the
    /// gradient-reversal layer first, so minimizing the domain loss pushes
    /// the backbone toward fog-invariant features. The forward value does
    /// not depend on lambda.
    pub fn discriminate_domain(
        &self,
        t: &mut Tape,
        bind: &Binding,
        f: &FeatureMap,
        lambda: GrlCoefficient,
    ) -> Result<TensorId> {
        self.check_features(t, f)?;
        let x = grad_reverse(t, f.tensor, lambda);
        let h = self.apply_conv(t, bind, &self.disc_conv1, x);
        let h = t.relu(h);
        let h = self.apply_conv(t, bind, &self.disc_conv2, h);
        let h = t.relu(h);
        let pooled = t.global_avg_pool(h); // (N, dc)
        let logit = t.matmul(pooled, bind.ids[self.disc_fc.0]);
        Ok(t.bias_add2(logit, bind.ids[self.disc_fc.1]))
    }

    /// Positive depth plane at feature resolution via an exponential output
    /// mapping.
    pub fn estimate_depth(&self, t: &mut Tape, bind: &Binding, f: &FeatureMap) -> Result<DepthEstimate> {
        self.check_features(t, f)?;
        let h = self.apply_conv(t, bind, &self.depth_conv1, f.tensor);
        let h = t.relu(h);
        let pre_log = self.apply_conv(t, bind, &self.depth_out, h);
        let depth = t.exp(pre_log);
        Ok(DepthEstimate { pre_log, depth })
    }

    /// Reconstruction of the network input: four 2x upsampling stages back
    /// to stride 1, logistic output, cropped to (out_h, out_w). Values lie
    /// in [0, 1].
    pub fn reconstruct_image(
        &self,
        t: &mut Tape,
        bind: &Binding,
        f: &FeatureMap,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        self.check_features(t, f)?;
        let up = f.hf * 16;
        let wp = f.wf * 16;
        if out_h > up || out_w > wp {
            return Err(Error::invalid(format!(
                "cannot reconstruct {out_h}x{out_w} from a {}x{} feature map",
                f.hf, f.wf
            )));
        }
        let mut cur = f.tensor;
        for spec in &self.dec_convs {
            cur = t.upsample2x(cur);
            cur = self.apply_conv(t, bind, spec, cur);
            cur = t.relu(cur);
        }
        let out = self.apply_conv(t, bind, &self.dec_out, cur);
        let out = t.sigmoid(out);
        Ok(t.crop4(out, out_h, out_w))
    }
}

/// Ground-truth depth mean-pooled to feature resolution: cell (i, j) is the
/// mean over the stride x stride block, clipped to the image extent.
pub fn mean_pool_depth(gt: &DepthMap, hf: usize, wf: usize, stride: usize) -> Result<Array2<f64>> {
    let (h, w) = (gt.height(), gt.width());
    if hf != h.div_ceil(stride) || wf != w.div_ceil(stride) {
        return Err(Error::invalid(format!(
            "feature grid {hf}x{wf} does not match depth {h}x{w} at stride {stride}"
        )));
    }
    let mut out = Array2::zeros((hf, wf));
    for i in 0..hf {
        for j in 0..wf {
            let y1 = (i * stride).min(h);
            let y2 = ((i + 1) * stride).min(h);
            let x1 = (j * stride).min(w);
            let x2 = ((j + 1) * stride).min(w);
            let mut sum = 0.0;
            for y in y1..y2 {
                for x in x1..x2 {
                    sum += gt.values()[[y, x]];
                }
            }
            out[[i, j]] = sum / ((y2 - y1) * (x2 - x1)) as f64;
        }
    }
    Ok(out)
}

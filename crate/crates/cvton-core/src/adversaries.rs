//! The three adversarial critics and their losses.
//!
//! * [`SegCritic`] — a UNet that labels every pixel of an image with one of
//!   `d` body-part classes or a (d+1)-st "generated" class.  Its loss is a
//!   class-balanced cross-entropy: real images supervise the body-part
//!   channels (each part weighted by the inverse of its pixel count, so
//!   small parts matter as much as large ones), generated images supervise
//!   only the fake channel.  The generator-side term rewards generated
//!   pixels that pass for their true body parts.
//! * [`MatchCritic`] — twin encoders over (person image, garment image)
//!   that answer with a single logit whether the garment matches the one
//!   worn in the image.
//! * [`PatchCritic`] — a small encoder scoring square crops centered on
//!   characteristic body parts (neck, arms), which keeps local texture
//!   honest where garment boundaries meet skin.
//!
//! Binary losses use the exact log-sigmoid identities
//! `−log σ(x) = softplus(−x)` and `−log(1−σ(x)) = softplus(x)`, which never
//! need clamping; the segmentation cross-entropy takes logarithms of
//! softmax probabilities and clamps them at [`LOG_FLOOR`] so the loss stays
//! bounded.
//!
//! Class weights are computed per sample: a part covering `n` of the `h*w`
//! pixels of its sample gets weight `h*w / n`, so `weight * count == h*w`
//! exactly for every present part, and parts absent from a sample are
//! skipped for that sample alone.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::NetConfig;
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};

/// Probabilities below this are clamped before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-8;

/// Pre-activation residual block with optional stride-2 downsampling.
struct DiscBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl DiscBlock {
    fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bn1 = BatchNorm2d::init(&format!("{name}.bn1"), in_ch, params);
        let conv1 = Conv2d::init(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, params, rng);
        let bn2 = BatchNorm2d::init(&format!("{name}.bn2"), out_ch, params);
        let conv2 = Conv2d::init(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, params, rng);
        let skip = (stride != 1 || in_ch != out_ch).then(|| {
            Conv2d::init(&format!("{name}.skip"), in_ch, out_ch, 1, stride, 0, params, rng)
        });
        DiscBlock {
            bn1,
            conv1,
            bn2,
            conv2,
            skip,
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        let t = s.tape;
        let mut h = self.conv1.forward(s, t.relu(self.bn1.forward(s, x)));
        h = self.conv2.forward(s, t.relu(self.bn2.forward(s, h)));
        let shortcut = match &self.skip {
            None => x,
            Some(conv) => conv.forward(s, x),
        };
        t.add(shortcut, h)
    }
}

/// UNet critic assigning every pixel a body-part or "generated" class.
///
/// `gen_upsamples + 1` stride-2 residual blocks contract the image, the
/// same number expand it back with skip connections, and a 1x1 head plus a
/// per-pixel softmax produce `(seg_classes + 1)`-way probabilities at the
/// input resolution.
pub struct SegCritic {
    pub params: ParamSet,
    enc: Vec<DiscBlock>,
    dec: Vec<DiscBlock>,
    head: Conv2d,
}

impl SegCritic {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = cfg.clone().validated()?;
        let mut params = ParamSet::new();
        let depth = cfg.gen_upsamples + 1;
        let widths = cfg.stage_widths(cfg.disc_width, depth);
        let mut enc = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(DiscBlock::init(&format!("dseg.enc{i}"), in_ch, w, 2, &mut params, rng));
            in_ch = w;
        }
        // Decoder step i produces the resolution of encoder level i; its
        // input concatenates the upsampled deeper features with the skip
        // tensor at that resolution (the raw image for i = 0).
        let mut dec = Vec::with_capacity(depth);
        let mut above = in_ch;
        for i in (0..depth).rev() {
            let skip_ch = if i == 0 { 3 } else { widths[i - 1] };
            let out_ch = if i == 0 { cfg.disc_width } else { widths[i - 1] };
            dec.push(DiscBlock::init(
                &format!("dseg.dec{i}"),
                above + skip_ch,
                out_ch,
                1,
                &mut params,
                rng,
            ));
            above = out_ch;
        }
        let head = Conv2d::init("dseg.head", above, cfg.seg_classes + 1, 1, 1, 0, &mut params, rng);
        Ok(SegCritic {
            params,
            enc,
            dec,
            head,
        })
    }

    /// Number of residual blocks (both directions).
    pub fn num_blocks(&self) -> usize {
        self.enc.len() + self.dec.len()
    }

    /// Per-pixel class probabilities `[B, d+1, H, W]` for images `[B,3,H,W]`.
    pub fn forward(&self, s: &Session, img: Var) -> Var {
        let t = s.tape;
        let mut skips = vec![img];
        let mut x = img;
        for block in &self.enc {
            x = block.forward(s, x);
            skips.push(x);
        }
        // skips[i] is the tensor at encoder level i (skips[0] = the image).
        for (j, block) in self.dec.iter().enumerate() {
            let level = self.enc.len() - 1 - j;
            x = t.nearest_up2(x);
            x = block.forward(s, t.concat_channels(&[x, skips[level]]));
        }
        t.softmax_channels(self.head.forward(s, x))
    }
}

/// Twin-encoder critic for (image, garment) correspondence.
pub struct MatchCritic {
    pub params: ParamSet,
    img_enc: Vec<DiscBlock>,
    garment_enc: Vec<DiscBlock>,
    head: Linear,
}

/// Blocks per matching-critic encoder.
const MATCH_BLOCKS: usize = 6;
/// Blocks in the patch critic.
const PATCH_BLOCKS: usize = 4;

impl MatchCritic {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = cfg.clone().validated()?;
        let mut params = ParamSet::new();
        let widths = cfg.stage_widths(cfg.disc_width, MATCH_BLOCKS);
        let build = |prefix: &str, params: &mut ParamSet, rng: &mut ChaCha8Rng| {
            let mut blocks = Vec::with_capacity(MATCH_BLOCKS);
            let mut in_ch = 3;
            for (i, &w) in widths.iter().enumerate() {
                // Downsample until the generator root resolution is
                // reached, then keep refining without shrinking.
                let stride = if i < cfg.gen_upsamples { 2 } else { 1 };
                blocks.push(DiscBlock::init(&format!("{prefix}{i}"), in_ch, w, stride, params, rng));
                in_ch = w;
            }
            blocks
        };
        let img_enc = build("dmth.img", &mut params, rng);
        let garment_enc = build("dmth.garment", &mut params, rng);
        let head = Linear::init("dmth.head", 2 * widths[MATCH_BLOCKS - 1], 1, &mut params, rng);
        Ok(MatchCritic {
            params,
            img_enc,
            garment_enc,
            head,
        })
    }

    /// One matching logit per sample: `[B,1]`.
    pub fn forward(&self, s: &Session, img: Var, garment: Var) -> Var {
        let t = s.tape;
        let mut a = img;
        for block in &self.img_enc {
            a = block.forward(s, a);
        }
        let mut b = garment;
        for block in &self.garment_enc {
            b = block.forward(s, b);
        }
        let joint = t.global_avg_pool(t.concat_channels(&[a, b]));
        self.head.forward(s, joint)
    }
}

/// Small encoder critic over body-part patches.
pub struct PatchCritic {
    pub params: ParamSet,
    enc: Vec<DiscBlock>,
    head: Linear,
    size: usize,
}

impl PatchCritic {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = cfg.clone().validated()?;
        let mut params = ParamSet::new();
        let widths = cfg.stage_widths(cfg.disc_width, PATCH_BLOCKS);
        // Halve the patch while it is larger than one pixel.
        let halvings = (cfg.patch_size.trailing_zeros() as usize).min(PATCH_BLOCKS);
        let mut enc = Vec::with_capacity(PATCH_BLOCKS);
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i < halvings { 2 } else { 1 };
            enc.push(DiscBlock::init(&format!("dptc.enc{i}"), in_ch, w, stride, &mut params, rng));
            in_ch = w;
        }
        let head = Linear::init("dptc.head", in_ch, 1, &mut params, rng);
        Ok(PatchCritic {
            params,
            enc,
            head,
            size: cfg.patch_size,
        })
    }

    /// Side length of the patches this critic expects.
    pub fn patch_size(&self) -> usize {
        self.size
    }

    /// One realism logit per patch: `[P,1]` for patches `[P,3,s,s]`.
    pub fn forward(&self, s: &Session, patches: Var) -> Var {
        let shape = s.tape.shape(patches);
        assert_eq!(
            (shape[2], shape[3]),
            (self.size, self.size),
            "patch critic configured for {0}x{0} patches, got {1}x{2}",
            self.size,
            shape[2],
            shape[3]
        );
        let mut x = patches;
        for block in &self.enc {
            x = block.forward(s, x);
        }
        self.head.forward(s, s.tape.global_avg_pool(x))
    }
}

// ----- segmentation loss -------------------------------------------------

/// Inverse-frequency class weights as a dense `[B, d+1, H, W]` tensor:
/// `h*w / count` on the pixels of each part present in each sample, zero
/// elsewhere and zero everywhere on the extra (d+1)-st channel.
pub fn part_weights(seg: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, d, h, w) = (seg.shape()[0], seg.shape()[1], seg.shape()[2], seg.shape()[3]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, d + 1, h, w]));
    for bi in 0..b {
        for k in 0..d {
            let mut count = 0usize;
            for i in 0..h {
                for j in 0..w {
                    if seg[[bi, k, i, j]] > 0.5 {
                        count += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let alpha = (h * w) as f64 / count as f64;
            for i in 0..h {
                for j in 0..w {
                    if seg[[bi, k, i, j]] > 0.5 {
                        out[[bi, k, i, j]] = alpha;
                    }
                }
            }
        }
    }
    out
}

/// Weighted negative log-likelihood of `pred` under the dense weight map,
/// averaged over batch and pixels: `−sum(weights ⊙ log pred) / (b·h·w)`.
fn weighted_nll(tape: &Tape, pred: Var, weights: ArrayD<f64>) -> Var {
    let shape = tape.shape(pred);
    assert_eq!(shape, weights.shape(), "prediction/weight shape mismatch");
    let denom = (shape[0] * shape[2] * shape[3]) as f64;
    let w = tape.constant(weights);
    let picked = tape.mul(w, tape.log_clamped(pred, LOG_FLOOR));
    tape.mul_scalar(tape.sum_all(picked), -1.0 / denom)
}

/// Critic-side segmentation loss: real images must be labeled with their
/// body parts (class-balanced), generated images with the fake channel.
pub fn seg_critic_loss(tape: &Tape, pred_real: Var, seg: &ArrayD<f64>, pred_fake: Var) -> Var {
    let real_term = weighted_nll(tape, pred_real, part_weights(seg));
    let shape = tape.shape(pred_fake);
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(c, seg.shape()[1] + 1, "fake prediction channel count");
    let mut fake_w = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
    fake_w
        .slice_mut(ndarray::s![.., c - 1..c, .., ..])
        .fill(1.0);
    let fake_term = weighted_nll(tape, pred_fake, fake_w);
    tape.add(real_term, fake_term)
}

/// Generator-side segmentation term: generated pixels should be classified
/// as the body parts they depict, with the same class balancing.
pub fn seg_generator_loss(tape: &Tape, pred_fake: Var, seg: &ArrayD<f64>) -> Var {
    weighted_nll(tape, pred_fake, part_weights(seg))
}

// ----- binary losses ------------------------------------------------------

/// Mean of `−log σ(x)` over all elements, via `softplus(−x)` (exact).
fn mean_log_sigmoid_loss(tape: &Tape, logits: Var) -> Var {
    tape.mean_all(tape.softplus(tape.mul_scalar(logits, -1.0)))
}

/// Critic-side binary loss: real logits toward 1, fake logits toward 0:
/// `E[softplus(−real)] + E[softplus(fake)]`.
pub fn bce_critic_loss(tape: &Tape, logit_real: Var, logit_fake: Var) -> Var {
    let real_term = mean_log_sigmoid_loss(tape, logit_real);
    let fake_term = tape.mean_all(tape.softplus(logit_fake));
    tape.add(real_term, fake_term)
}

/// Generator-side binary term: fake logits toward 1: `E[softplus(−fake)]`.
pub fn bce_generator_loss(tape: &Tape, logit_fake: Var) -> Var {
    mean_log_sigmoid_loss(tape, logit_fake)
}

// ----- patch extraction ---------------------------------------------------

/// Where the patch critic looks: one box per (sample, present part).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    /// `(sample, top row, left column)` per patch, in deterministic order
    /// (samples outer, configured channels inner).
    pub boxes: Vec<(usize, usize, usize)>,
    /// The segmentation channel each patch was centered on.
    pub channels: Vec<usize>,
}

impl PatchSet {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }
}

/// Deterministic patch placement: for every configured body-part channel
/// present in a sample, a `size`-sided box centered on the part's centroid
/// (rounded to pixels, clamped to the image bounds).  Absent parts are
/// skipped, so the set may be empty for degenerate segmentations.
pub fn patch_boxes(seg: &ArrayD<f64>, channels: &[usize], size: usize) -> PatchSet {
    let (b, d, h, w) = (seg.shape()[0], seg.shape()[1], seg.shape()[2], seg.shape()[3]);
    assert!(size <= h && size <= w, "patch {size} exceeds image {h}x{w}");
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for bi in 0..b {
        for &k in channels {
            assert!(k < d, "patch channel {k} outside the segmentation");
            let (mut rs, mut cs, mut n) = (0.0f64, 0.0f64, 0usize);
            for i in 0..h {
                for j in 0..w {
                    if seg[[bi, k, i, j]] > 0.5 {
                        rs += i as f64;
                        cs += j as f64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let center_r = rs / n as f64;
            let center_c = cs / n as f64;
            let r0 = ((center_r - size as f64 / 2.0).round().max(0.0) as usize).min(h - size);
            let c0 = ((center_c - size as f64 / 2.0).round().max(0.0) as usize).min(w - size);
            boxes.push((bi, r0, c0));
            labels.push(k);
        }
    }
    PatchSet {
        boxes,
        channels: labels,
    }
}

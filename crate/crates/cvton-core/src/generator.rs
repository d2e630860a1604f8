//! Context-aware try-on image generator.
//!
//! The network synthesizes the final try-on image from a stack of
//! conditioning planes called the *image context*: the one-hot body-part
//! segmentation `S`, the person image with the original garment hidden
//! `I_m`, the target garment `C`, and its geometrically warped version
//! `C_w`, concatenated channel-wise into `seg_classes + 9` planes.  The
//! context conditions the generator twice over:
//!
//! * its coarsest pyramid level passes through a learned 1x1 projection to
//!   become the starting activation, and
//! * every convolution input is modulated by *context-aware normalization*:
//!   plain batch normalization followed by `x_bn * gamma + beta`, where
//!   `gamma` and `beta` are full-resolution maps regressed from the context
//!   level at the activation's resolution (one shared convolution stage,
//!   then one head per map).
//!
//! The modulation heads are zero-initialized and `gamma` is parameterized
//! as `1 + head output`, so a freshly constructed generator behaves exactly
//! like its modulation-free counterpart — useful both as a stability
//! property for early adversarial steps and as a correctness check (see the
//! tests and [`Generator::with_modulation`]).
//!
//! Resolution arithmetic deserves a prominent note.  The generator always
//! starts at [`NetConfig::root_shape`] and doubles the resolution after
//! each of the *last* `gen_upsamples` residual blocks.  Six blocks with a
//! doubling after every one of them would turn 8x6 into 512x384 and
//! overshoot a 256x192 output; keeping all six blocks but placing only five
//! doublings — after blocks 2..=6 — lands exactly on 256x192.  The toy
//! preset works the same way with three doublings (8x6 -> 64x48).
//!
//! Masking polarity: `I_m` is the person image with the garment region
//! *removed*, `I * (1 - M_c)`, with masked pixels at 0 (mid-gray in the
//! [-1,1] image range) so white and dark garments are treated alike.  The
//! opposite convention — keeping only the garment pixels — is available
//! behind [`BuildContext::literal_mask_product`] for experiments.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamSet, Session};

/// How [`build_image_context`] assembles `I_m` from the person image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BuildContext {
    /// Hide the garment region: `I_m = I * (1 - M_c)`.  The sensible
    /// convention for try-on, and the default.
    #[default]
    MaskOutGarment,
    /// Keep only the garment region: `I_m = I * M_c`.
    LiteralMaskProduct,
}

impl BuildContext {
    /// True for the `I * M_c` variant.
    pub fn literal_mask_product(self) -> bool {
        matches!(self, BuildContext::LiteralMaskProduct)
    }
}

/// The conditioning stack at full resolution plus its downscaled pyramid.
///
/// `levels[0]` is the generator root resolution and `levels[last]` the full
/// resolution; each level doubles the previous one.  Segmentation channels
/// are downscaled with nearest-neighbour sampling (one-hot survives), image
/// channels with 2x2 area averaging (anti-aliased).
#[derive(Debug, Clone)]
pub struct ImageContext {
    seg_channels: usize,
    levels: Vec<ArrayD<f64>>,
}

impl ImageContext {
    /// Number of pyramid levels, root through full resolution.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Pyramid level `r`; `r = 0` is the coarsest.
    pub fn level(&self, r: usize) -> &ArrayD<f64> {
        &self.levels[r]
    }

    /// The full-resolution context tensor `[B, seg+9, H, W]`.
    pub fn full(&self) -> &ArrayD<f64> {
        self.levels.last().expect("context has at least one level")
    }

    /// Channels occupied by the one-hot segmentation (the leading block).
    pub fn seg_channels(&self) -> usize {
        self.seg_channels
    }
}

fn expect_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "{name}: expected shape {want:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Halve both spatial dims of `[B,C,H,W]`, taking the top-left sample of
/// every 2x2 cell.  Exact for one-hot planes.
fn nearest_down2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "nearest_down2: odd input {h}x{w}");
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h / 2, w / 2]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[[bi, ci, i, j]] = x[[bi, ci, 2 * i, 2 * j]];
                }
            }
        }
    }
    y
}

/// Halve both spatial dims of `[B,C,H,W]` by averaging every 2x2 cell.
fn area_down2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "area_down2: odd input {h}x{w}");
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h / 2, w / 2]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[[bi, ci, i, j]] = 0.25
                        * (x[[bi, ci, 2 * i, 2 * j]]
                            + x[[bi, ci, 2 * i, 2 * j + 1]]
                            + x[[bi, ci, 2 * i + 1, 2 * j]]
                            + x[[bi, ci, 2 * i + 1, 2 * j + 1]]);
                }
            }
        }
    }
    y
}

/// Assemble the image context from its ingredients and precompute the
/// resolution pyramid the generator reads from.
///
/// Inputs are `[B,·,H,W]` at the configured resolution: `seg` one-hot with
/// `seg_classes` channels, `person`/`garment`/`warped` RGB, `garment_mask`
/// a single channel marking the garment region on the person.  Channel
/// order of the result is fixed: segmentation, masked person, garment,
/// warped garment.
pub fn build_image_context(
    cfg: &NetConfig,
    seg: &ArrayD<f64>,
    person: &ArrayD<f64>,
    garment_mask: &ArrayD<f64>,
    garment: &ArrayD<f64>,
    warped: &ArrayD<f64>,
    mode: BuildContext,
) -> Result<ImageContext> {
    if seg.ndim() != 4 {
        return Err(Error::Shape(format!(
            "segmentation must be [B,C,H,W], got {:?}",
            seg.shape()
        )));
    }
    let b = seg.shape()[0];
    let (h, w) = (cfg.height, cfg.width);
    expect_shape("segmentation", seg.shape(), &[b, cfg.seg_classes, h, w])?;
    expect_shape("person image", person.shape(), &[b, 3, h, w])?;
    expect_shape("garment mask", garment_mask.shape(), &[b, 1, h, w])?;
    expect_shape("garment image", garment.shape(), &[b, 3, h, w])?;
    expect_shape("warped garment", warped.shape(), &[b, 3, h, w])?;

    let d = cfg.seg_classes;
    let mut full = ArrayD::<f64>::zeros(IxDyn(&[b, d + 9, h, w]));
    full.slice_mut(ndarray::s![.., ..d, .., ..]).assign(seg);
    {
        let mut im = full.slice_mut(ndarray::s![.., d..d + 3, .., ..]);
        for bi in 0..b {
            for ci in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let m = garment_mask[[bi, 0, i, j]];
                        let keep = if mode.literal_mask_product() { m } else { 1.0 - m };
                        im[[bi, ci, i, j]] = person[[bi, ci, i, j]] * keep;
                    }
                }
            }
        }
    }
    full.slice_mut(ndarray::s![.., d + 3..d + 6, .., ..]).assign(garment);
    full.slice_mut(ndarray::s![.., d + 6..d + 9, .., ..]).assign(warped);

    // Pyramid from full resolution down to the generator root, then stored
    // coarsest-first so `levels[r]` matches the activation after r doublings.
    let mut levels = vec![full];
    for _ in 0..cfg.gen_upsamples {
        let prev = levels.last().expect("non-empty");
        let seg_part = nearest_down2(&prev.slice(ndarray::s![.., ..d, .., ..]).to_owned().into_dyn());
        let img_part = area_down2(&prev.slice(ndarray::s![.., d.., .., ..]).to_owned().into_dyn());
        let (bh, bw) = (seg_part.shape()[2], seg_part.shape()[3]);
        let mut level = ArrayD::<f64>::zeros(IxDyn(&[b, d + 9, bh, bw]));
        level.slice_mut(ndarray::s![.., ..d, .., ..]).assign(&seg_part);
        level.slice_mut(ndarray::s![.., d.., .., ..]).assign(&img_part);
        levels.push(level);
    }
    levels.reverse();
    Ok(ImageContext {
        seg_channels: d,
        levels,
    })
}

/// Apply the learned modulation to an already-normalized activation:
/// `x_bn * (1 + gamma_raw) + beta`, all elementwise.
pub fn modulate(tape: &Tape, x_bn: Var, gamma_raw: Var, beta: Var) -> Var {
    let gamma = tape.add_scalar(gamma_raw, 1.0);
    tape.add(tape.mul(x_bn, gamma), beta)
}

/// The context-regression half of context-aware normalization.
struct CanHeads {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

/// Batch normalization optionally followed by context-aware modulation.
///
/// With modulation disabled the layer is a plain batch norm and no head
/// parameters exist; with it enabled, fresh heads are zero-initialized so
/// the modulation starts as the identity.
struct CanBn {
    bn: BatchNorm2d,
    can: Option<CanHeads>,
}

impl CanBn {
    fn init(
        name: &str,
        ch: usize,
        ic_ch: usize,
        hidden: usize,
        modulated: bool,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bn = BatchNorm2d::init(&format!("{name}.bn"), ch, params);
        let can = modulated.then(|| CanHeads {
            shared: Conv2d::init(&format!("{name}.shared"), ic_ch, hidden, 3, 1, 1, params, rng),
            gamma: Conv2d::init_zero(&format!("{name}.gamma_head"), hidden, ch, 3, 1, 1, params),
            beta: Conv2d::init_zero(&format!("{name}.beta_head"), hidden, ch, 3, 1, 1, params),
        });
        CanBn { bn, can }
    }

    fn forward(&self, s: &Session, x: Var, ic: Var) -> Var {
        let x_bn = self.bn.forward(s, x);
        match &self.can {
            None => x_bn,
            Some(heads) => {
                let t = s.tape;
                let hid = t.relu(heads.shared.forward(s, ic));
                let gamma_raw = heads.gamma.forward(s, hid);
                let beta = heads.beta.forward(s, hid);
                modulate(t, x_bn, gamma_raw, beta)
            }
        }
    }
}

/// Residual block with modulated normalization before every convolution.
struct ResBlock {
    norm1: CanBn,
    conv1: Conv2d,
    norm2: CanBn,
    conv2: Conv2d,
    skip: Option<(CanBn, Conv2d)>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ic_ch: usize,
        hidden: usize,
        modulated: bool,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = in_ch.min(out_ch);
        let norm1 = CanBn::init(&format!("{name}.norm1"), in_ch, ic_ch, hidden, modulated, params, rng);
        let conv1 = Conv2d::init(&format!("{name}.conv1"), in_ch, mid, 3, 1, 1, params, rng);
        let norm2 = CanBn::init(&format!("{name}.norm2"), mid, ic_ch, hidden, modulated, params, rng);
        let conv2 = Conv2d::init(&format!("{name}.conv2"), mid, out_ch, 3, 1, 1, params, rng);
        let skip = (in_ch != out_ch).then(|| {
            (
                CanBn::init(&format!("{name}.skip_norm"), in_ch, ic_ch, hidden, modulated, params, rng),
                Conv2d::init(&format!("{name}.skip_conv"), in_ch, out_ch, 1, 1, 0, params, rng),
            )
        });
        ResBlock {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward(&self, s: &Session, x: Var, ic: Var) -> Var {
        let t = s.tape;
        let mut h = self.conv1.forward(s, t.relu(self.norm1.forward(s, x, ic)));
        h = self.conv2.forward(s, t.relu(self.norm2.forward(s, h, ic)));
        let shortcut = match &self.skip {
            None => x,
            Some((norm, conv)) => conv.forward(s, norm.forward(s, x, ic)),
        };
        t.add(shortcut, h)
    }
}

/// The full generator: context projection, residual trunk, output head.
pub struct Generator {
    pub params: ParamSet,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Conv2d,
    first_upsampled: usize,
    num_levels: usize,
    root: (usize, usize),
    modulated: bool,
}

impl Generator {
    /// Standard construction with context-aware normalization enabled.
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_modulation(cfg, rng, true)
    }

    /// Construction with the context modulation switched off (every norm
    /// layer degenerates to plain batch norm).  Parameter names of everything
    /// except the modulation heads are identical to the modulated network,
    /// so weights can be moved between the two variants by name.
    pub fn with_modulation(cfg: &NetConfig, rng: &mut ChaCha8Rng, modulated: bool) -> Result<Self> {
        let cfg = cfg.clone().validated()?;
        let mut params = ParamSet::new();
        let ic_ch = cfg.context_channels();
        let hidden = cfg.gen_width;
        let widths = cfg.gen_block_widths();
        let stem = Conv2d::init("gen.stem", ic_ch, widths[0], 1, 1, 0, &mut params, rng);
        let mut blocks = Vec::with_capacity(cfg.gen_blocks);
        let mut in_ch = widths[0];
        for (i, &out_ch) in widths.iter().enumerate() {
            blocks.push(ResBlock::init(
                &format!("gen.block{i}"),
                in_ch,
                out_ch,
                ic_ch,
                hidden,
                modulated,
                &mut params,
                rng,
            ));
            in_ch = out_ch;
        }
        let head = Conv2d::init("gen.head", in_ch, 3, 3, 1, 1, &mut params, rng);
        Ok(Generator {
            params,
            stem,
            blocks,
            head,
            first_upsampled: cfg.gen_blocks - cfg.gen_upsamples,
            num_levels: cfg.gen_upsamples + 1,
            root: cfg.root_shape(),
            modulated,
        })
    }

    /// Whether context-aware modulation is active.
    pub fn modulated(&self) -> bool {
        self.modulated
    }

    /// Synthesize images from a context; output is `[B,3,H,W]` in [-1,1].
    pub fn forward(&self, s: &Session, ic: &ImageContext) -> Var {
        assert_eq!(
            ic.num_levels(),
            self.num_levels,
            "context pyramid depth does not match the generator"
        );
        let root = ic.level(0).shape();
        assert_eq!(
            (root[2], root[3]),
            self.root,
            "context root resolution does not match the generator"
        );
        let t = s.tape;
        let levels: Vec<Var> = (0..self.num_levels)
            .map(|r| t.constant(ic.level(r).clone()))
            .collect();
        let mut x = self.stem.forward(s, levels[0]);
        for (i, block) in self.blocks.iter().enumerate() {
            let r = i.saturating_sub(self.first_upsampled);
            x = block.forward(s, x, levels[r]);
            if i >= self.first_upsampled {
                x = t.nearest_up2(x);
            }
        }
        t.tanh(self.head.forward(s, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_gradcheck;
    use crate::rng::{rand_uniform, randn, rng_from};
    use std::collections::BTreeMap;

    /// 8x6 root, two doublings to 32x24, three blocks: small enough for
    /// finite differences, deep enough to cross an upsampling boundary.
    fn tiny_cfg() -> NetConfig {
        NetConfig {
            height: 32,
            width: 24,
            seg_classes: 4,
            enc_stages: 2,
            enc_width: 6,
            tps_points: 3,
            max_offset: 0.4,
            gen_blocks: 3,
            gen_upsamples: 2,
            gen_width: 6,
            disc_width: 6,
            patch_size: 4,
            feat_width: 6,
            feat_stages: 3,
            width_cap: 12,
            torso_channels: vec![1],
            patch_channels: vec![2, 3],
        }
        .validated()
        .unwrap()
    }

    fn one_hot_seg(rng: &mut rand_chacha::ChaCha8Rng, b: usize, d: usize, h: usize, w: usize) -> ArrayD<f64> {
        let picks = rand_uniform(rng, &[b, h, w], 0.0, 1.0);
        let mut seg = ArrayD::<f64>::zeros(IxDyn(&[b, d, h, w]));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let c = ((picks[[bi, i, j]] * d as f64) as usize).min(d - 1);
                    seg[[bi, c, i, j]] = 1.0;
                }
            }
        }
        seg
    }

    struct Ingredients {
        seg: ArrayD<f64>,
        person: ArrayD<f64>,
        mask: ArrayD<f64>,
        garment: ArrayD<f64>,
        warped: ArrayD<f64>,
    }

    fn ingredients(cfg: &NetConfig, b: usize, seed: u64) -> Ingredients {
        let mut rng = rng_from(seed);
        let (h, w) = (cfg.height, cfg.width);
        let mask_real = rand_uniform(&mut rng, &[b, 1, h, w], 0.0, 1.0).mapv(|v| (v > 0.5) as u8 as f64);
        Ingredients {
            seg: one_hot_seg(&mut rng, b, cfg.seg_classes, h, w),
            person: rand_uniform(&mut rng, &[b, 3, h, w], -1.0, 1.0),
            mask: mask_real,
            garment: rand_uniform(&mut rng, &[b, 3, h, w], -1.0, 1.0),
            warped: rand_uniform(&mut rng, &[b, 3, h, w], -1.0, 1.0),
        }
    }

    fn context(cfg: &NetConfig, ing: &Ingredients, mode: BuildContext) -> ImageContext {
        build_image_context(cfg, &ing.seg, &ing.person, &ing.mask, &ing.garment, &ing.warped, mode)
            .unwrap()
    }

    #[test]
    fn pyramid_levels_follow_the_doubling_chain() {
        let cfg = tiny_cfg();
        let ing = ingredients(&cfg, 2, 11);
        let ic = context(&cfg, &ing, BuildContext::default());
        assert_eq!(ic.num_levels(), 3);
        assert_eq!(ic.level(0).shape(), [2, 13, 8, 6]);
        assert_eq!(ic.level(1).shape(), [2, 13, 16, 12]);
        assert_eq!(ic.level(2).shape(), [2, 13, 32, 24]);
        assert_eq!(ic.full(), ic.level(2));
        assert_eq!(ic.seg_channels(), 4);
    }

    #[test]
    fn downscaled_segmentation_stays_one_hot_and_images_keep_their_mean() {
        let cfg = tiny_cfg();
        let ing = ingredients(&cfg, 2, 12);
        let ic = context(&cfg, &ing, BuildContext::default());
        let d = cfg.seg_classes;
        for r in 0..ic.num_levels() {
            let level = ic.level(r);
            let (b, h, w) = (level.shape()[0], level.shape()[2], level.shape()[3]);
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let mut sum = 0.0;
                        for c in 0..d {
                            let v = level[[bi, c, i, j]];
                            assert!(v == 0.0 || v == 1.0, "level {r}: non-binary seg value {v}");
                            sum += v;
                        }
                        assert_eq!(sum, 1.0, "level {r}: pixel not one-hot");
                    }
                }
            }
        }
        // Area averaging preserves the mean of every image channel exactly
        // (up to summation order).
        for c in d..d + 9 {
            let full_mean = ic.full().index_axis(ndarray::Axis(1), c).mean().unwrap();
            let root_mean = ic.level(0).index_axis(ndarray::Axis(1), c).mean().unwrap();
            assert!(
                (full_mean - root_mean).abs() < 1e-12,
                "channel {c}: mean drifted from {full_mean} to {root_mean}"
            );
        }
    }

    #[test]
    fn masked_person_follows_the_mask_polarity() {
        let cfg = tiny_cfg();
        let mut ing = ingredients(&cfg, 1, 13);
        let d = cfg.seg_classes;

        // All-zero mask: nothing is hidden.
        ing.mask.fill(0.0);
        let ic = context(&cfg, &ing, BuildContext::default());
        assert_eq!(ic.full().slice(ndarray::s![.., d..d + 3, .., ..]).into_dyn(), ing.person.view());

        // All-one mask: the whole person is hidden (mid-gray zeros).
        ing.mask.fill(1.0);
        let ic = context(&cfg, &ing, BuildContext::default());
        assert!(ic.full().slice(ndarray::s![.., d..d + 3, .., ..]).iter().all(|&v| v == 0.0));

        // Literal product keeps exactly what the default removes.
        let mut rng = rng_from(14);
        ing.mask = rand_uniform(&mut rng, &[1, 1, cfg.height, cfg.width], 0.0, 1.0)
            .mapv(|v| (v > 0.5) as u8 as f64);
        let removed = context(&cfg, &ing, BuildContext::MaskOutGarment);
        let kept = context(&cfg, &ing, BuildContext::LiteralMaskProduct);
        let sum = &removed.full().slice(ndarray::s![.., d..d + 3, .., ..])
            + &kept.full().slice(ndarray::s![.., d..d + 3, .., ..]);
        assert_eq!(sum.into_dyn(), ing.person.view(), "the two polarities must partition the person");
    }

    #[test]
    fn context_rejects_mismatched_resolutions() {
        let cfg = tiny_cfg();
        let ing = ingredients(&cfg, 1, 15);
        let short = ArrayD::<f64>::zeros(IxDyn(&[1, 3, cfg.height / 2, cfg.width]));
        let err = build_image_context(
            &cfg,
            &ing.seg,
            &short,
            &ing.mask,
            &ing.garment,
            &ing.warped,
            BuildContext::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "got {err:?}");
    }

    #[test]
    fn channel_order_is_seg_masked_garment_warped() {
        let cfg = tiny_cfg();
        let ing = ingredients(&cfg, 2, 16);
        let ic = context(&cfg, &ing, BuildContext::default());
        let d = cfg.seg_classes;
        let full = ic.full();
        assert_eq!(full.slice(ndarray::s![.., ..d, .., ..]).into_dyn(), ing.seg.view());
        assert_eq!(full.slice(ndarray::s![.., d + 3..d + 6, .., ..]).into_dyn(), ing.garment.view());
        assert_eq!(full.slice(ndarray::s![.., d + 6.., .., ..]).into_dyn(), ing.warped.view());
        // The masked person equals the elementwise product with the
        // complement of the mask.
        for bi in 0..2 {
            for c in 0..3 {
                for i in 0..cfg.height {
                    for j in 0..cfg.width {
                        let want = ing.person[[bi, c, i, j]] * (1.0 - ing.mask[[bi, 0, i, j]]);
                        assert_eq!(full[[bi, d + c, i, j]], want);
                    }
                }
            }
        }
    }

    #[test]
    fn modulation_matches_the_elementwise_oracle() {
        let mut rng = rng_from(17);
        let x = randn(&mut rng, &[2, 3, 4, 5]);
        let g = randn(&mut rng, &[2, 3, 4, 5]);
        let b = randn(&mut rng, &[2, 3, 4, 5]);
        let tape = Tape::new();
        let out = modulate(
            &tape,
            tape.constant(x.clone()),
            tape.constant(g.clone()),
            tape.constant(b.clone()),
        );
        let out = tape.value_owned(out);
        for (idx, &o) in out.indexed_iter() {
            let want = x[&idx] * (1.0 + g[&idx]) + b[&idx];
            assert!((o - want).abs() < 1e-12, "mismatch at {idx:?}: {o} vs {want}");
        }
    }

    #[test]
    fn zero_multiplier_returns_the_additive_term() {
        let mut rng = rng_from(18);
        let x = randn(&mut rng, &[1, 2, 3, 3]);
        let b = randn(&mut rng, &[1, 2, 3, 3]);
        let tape = Tape::new();
        // gamma_raw = -1 makes the multiplier 1 + (-1) = 0.
        let g = ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), -1.0);
        let out = modulate(
            &tape,
            tape.constant(x),
            tape.constant(g),
            tape.constant(b.clone()),
        );
        assert_eq!(tape.value_owned(out), b);
    }

    #[test]
    fn fresh_modulation_heads_leave_the_network_at_identity() {
        let cfg = tiny_cfg();
        let full = Generator::new(&cfg, &mut rng_from(19)).unwrap();
        let mut plain = Generator::with_modulation(&cfg, &mut rng_from(20), false).unwrap();
        assert!(full.modulated() && !plain.modulated());
        assert!(
            plain.params.num_scalars() < full.params.num_scalars(),
            "the plain variant must not own modulation heads"
        );
        // Align the shared weights; the modulated network's fresh heads
        // output exactly zero, so gamma = 1 and beta = 0 everywhere.
        plain.params.adopt(&full.params);
        let ing = ingredients(&cfg, 2, 21);
        let ic = context(&cfg, &ing, BuildContext::default());
        let run = |g: &Generator| {
            let tape = Tape::new();
            let s = Session::eval(&tape, &g.params);
            tape.value_owned(g.forward(&s, &ic))
        };
        let a = run(&full);
        let b = run(&plain);
        let max_diff = (&a - &b).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert_eq!(max_diff, 0.0, "identity modulation must be exact, off by {max_diff}");
    }

    /// Give the zero-initialized modulation heads small random weights so
    /// the context actually modulates something.
    fn randomize_heads(g: &mut Generator, seed: u64) {
        let mut rng = rng_from(seed);
        for (name, value) in g.params.params.iter_mut() {
            if name.contains("_head") {
                let noise = randn(&mut rng, value.shape());
                value.zip_mut_with(&noise, |v, &n| *v = 0.1 * n);
            }
        }
    }

    #[test]
    fn output_is_full_resolution_and_bounded() {
        let cfg = tiny_cfg();
        let mut gen = Generator::new(&cfg, &mut rng_from(22)).unwrap();
        randomize_heads(&mut gen, 23);
        let ing = ingredients(&cfg, 2, 24);
        let ic = context(&cfg, &ing, BuildContext::default());
        let tape = Tape::new();
        let s = Session::eval(&tape, &gen.params);
        let out = tape.value_owned(gen.forward(&s, &ic));
        assert_eq!(out.shape(), [2, 3, cfg.height, cfg.width]);
        assert!(out.iter().all(|v| v.abs() <= 1.0), "tanh range violated");
    }

    #[test]
    fn eval_outputs_are_reproducible() {
        let cfg = tiny_cfg();
        let mut gen = Generator::new(&cfg, &mut rng_from(25)).unwrap();
        randomize_heads(&mut gen, 26);
        let ing = ingredients(&cfg, 1, 27);
        let ic = context(&cfg, &ing, BuildContext::default());
        let run = || {
            let tape = Tape::new();
            let s = Session::eval(&tape, &gen.params);
            tape.value_owned(gen.forward(&s, &ic))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn garment_channels_steer_the_output() {
        let cfg = tiny_cfg();
        let mut gen = Generator::new(&cfg, &mut rng_from(28)).unwrap();
        randomize_heads(&mut gen, 29);
        let ing = ingredients(&cfg, 1, 30);
        let ic = context(&cfg, &ing, BuildContext::default());
        let mut shifted = ing;
        shifted.garment += 0.25;
        let ic2 = context(&cfg, &shifted, BuildContext::default());
        let run = |ic: &ImageContext| {
            let tape = Tape::new();
            let s = Session::eval(&tape, &gen.params);
            tape.value_owned(gen.forward(&s, ic))
        };
        assert_ne!(run(&ic), run(&ic2), "the generator ignored its garment conditioning");
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let gen = Generator::new(&cfg, &mut rng_from(31)).unwrap();
        let ing = ingredients(&cfg, 2, 32);
        let ic = context(&cfg, &ing, BuildContext::default());
        let run = |params: &ParamSet, want_grads: bool| {
            let tape = Tape::new();
            let s = Session::with_modes(&tape, params, want_grads, true);
            let out = gen.forward(&s, &ic);
            let loss = tape.mean_all(tape.mul(out, out));
            let value = tape.scalar_value(loss);
            let grads = if want_grads {
                let mut store = tape.backward(loss);
                s.grads(&mut store)
            } else {
                BTreeMap::new()
            };
            (value, grads)
        };
        let (_, analytic) = run(&gen.params, true);
        let picks = [
            "gen.stem.weight",
            "gen.block0.conv1.weight",
            "gen.block1.norm1.gamma_head.weight",
            "gen.block1.norm1.beta_head.bias",
            "gen.block2.norm2.shared.weight",
            "gen.block2.norm1.bn.gamma",
        ];
        let check = param_gradcheck(
            &gen.params,
            &analytic,
            &|n| picks.contains(&n),
            4,
            1e-6,
            33,
            &mut |p| run(p, false).0,
        );
        assert_eq!(check.checked, 4 * picks.len());
        assert!(check.within(1e-3), "{check:?}");
    }
}

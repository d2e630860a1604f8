//! Architectural configuration shared by every network in the pipeline.
//!
//! One [`NetConfig`] value pins down the resolution arithmetic that all the
//! pieces must agree on: how many times the matcher encoders downsample, how
//! many times the generator upsamples from its root resolution, how wide each
//! stage is, and how large the discriminator patches are. Validation happens
//! eagerly in [`NetConfig::validated`] so a bad combination fails with a
//! clear [`Error::Shape`]/[`Error::Config`] before any tensor is allocated.
//!
//! Two presets exist:
//!
//! * [`NetConfig::toy`] — 64×48, three halvings to an 8×6 root. Small enough
//!   to train end-to-end on one CPU core in minutes.
//! * [`NetConfig::paper_shape`] — 256×192, five halvings to the same 8×6
//!   root. The full-scale geometry; constructing it proves the arithmetic
//!   scales, even though the tests never train at this size.
//!
//! The two presets share the root resolution on purpose: the generator is
//! always six residual blocks with upsampling after the last `gen_upsamples`
//! of them, so the same block count serves both scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything the networks need to agree about shapes and widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Working image height in pixels.
    pub height: usize,
    /// Working image width in pixels.
    pub width: usize,
    /// Number of semantic segmentation classes (class 0 is background).
    pub seg_classes: usize,
    /// Downsampling stages in each matcher encoder (input shrinks 2^stages).
    pub enc_stages: usize,
    /// Channel width of the first matcher encoder stage.
    pub enc_width: usize,
    /// Side of the square control-point grid for the warp (n×n points).
    pub tps_points: usize,
    /// Warp offsets are squashed through tanh and scaled by this bound.
    pub max_offset: f64,
    /// Residual blocks in the generator.
    pub gen_blocks: usize,
    /// How many of the final generator blocks are followed by 2× upsampling.
    pub gen_upsamples: usize,
    /// Channel width of the generator at full resolution.
    pub gen_width: usize,
    /// Channel width of the first stage of each discriminator.
    pub disc_width: usize,
    /// Side of the square crops judged by the patch discriminator.
    pub patch_size: usize,
    /// Channel width of the first metric feature-extractor stage.
    pub feat_width: usize,
    /// Stages in the metric feature extractor (pooled between stages).
    pub feat_stages: usize,
    /// Per-stage channel widths are capped here as they double.
    pub width_cap: usize,
    /// Segmentation channels whose union is the body-area mask.
    pub torso_channels: Vec<usize>,
    /// Segmentation channels the patch critic samples patches from
    /// (characteristic body parts; parts absent from a sample are skipped).
    pub patch_channels: Vec<usize>,
}

impl NetConfig {
    /// Desk-scale preset: trains end-to-end on one CPU core.
    pub fn toy() -> Self {
        NetConfig {
            height: 64,
            width: 48,
            seg_classes: 25,
            enc_stages: 3,
            enc_width: 12,
            tps_points: 3,
            max_offset: 0.4,
            gen_blocks: 6,
            gen_upsamples: 3,
            gen_width: 12,
            disc_width: 12,
            patch_size: 8,
            feat_width: 16,
            feat_stages: 5,
            width_cap: 48,
            torso_channels: vec![1],
            patch_channels: vec![3, 4, 5, 6, 7],
        }
    }

    /// Full-scale geometry (never trained in tests, but must validate).
    pub fn paper_shape() -> Self {
        NetConfig {
            height: 256,
            width: 192,
            seg_classes: 25,
            enc_stages: 5,
            enc_width: 64,
            tps_points: 3,
            max_offset: 0.4,
            gen_blocks: 6,
            gen_upsamples: 5,
            gen_width: 16,
            disc_width: 64,
            patch_size: 32,
            feat_width: 32,
            feat_stages: 5,
            width_cap: 512,
            torso_channels: vec![1],
            patch_channels: vec![3, 4, 5, 6, 7],
        }
    }

    /// Validate and return self, so constructions can be chained.
    pub fn validated(self) -> Result<Self> {
        let div = |len: usize, stages: usize, what: &str| -> Result<()> {
            let factor = 1usize << stages;
            if len == 0 || len % factor != 0 || len / factor == 0 {
                return Err(Error::Shape(format!(
                    "{what}: {len} is not divisible into {stages} halvings \
                     (needs a positive multiple of {factor})"
                )));
            }
            Ok(())
        };
        div(self.height, self.enc_stages, "encoder stages vs height")?;
        div(self.width, self.enc_stages, "encoder stages vs width")?;
        div(self.height, self.gen_upsamples, "generator root vs height")?;
        div(self.width, self.gen_upsamples, "generator root vs width")?;
        // The segmentation discriminator goes one level deeper than the
        // generator root on its way down.
        div(self.height, self.gen_upsamples + 1, "segmentation critic depth vs height")?;
        div(self.width, self.gen_upsamples + 1, "segmentation critic depth vs width")?;
        // The metric extractor pools between stages, not after the last one.
        if self.feat_stages == 0 {
            return Err(Error::Config("feature extractor needs at least one stage".into()));
        }
        div(self.height, self.feat_stages - 1, "feature extractor vs height")?;
        div(self.width, self.feat_stages - 1, "feature extractor vs width")?;
        if self.gen_upsamples > self.gen_blocks {
            return Err(Error::Config(format!(
                "cannot upsample after {} of only {} generator blocks",
                self.gen_upsamples, self.gen_blocks
            )));
        }
        if self.tps_points < 2 {
            return Err(Error::Config(format!(
                "warp control grid must be at least 2x2, got {0}x{0}",
                self.tps_points
            )));
        }
        if !(self.max_offset > 0.0 && self.max_offset <= 1.0) {
            return Err(Error::Config(format!(
                "warp offset bound must be in (0, 1], got {}",
                self.max_offset
            )));
        }
        if self.seg_classes < 2 {
            return Err(Error::Config(format!(
                "need at least background + one body class, got {} classes",
                self.seg_classes
            )));
        }
        if self.patch_channels.is_empty()
            || self.patch_channels.iter().any(|&c| c >= self.seg_classes)
        {
            return Err(Error::Config(format!(
                "patch channel list {:?} must be non-empty and within {} classes",
                self.patch_channels, self.seg_classes
            )));
        }
        if self.torso_channels.is_empty()
            || self.torso_channels.iter().any(|&c| c >= self.seg_classes)
        {
            return Err(Error::Config(format!(
                "torso channel list {:?} must be non-empty and within {} classes",
                self.torso_channels, self.seg_classes
            )));
        }
        if self.patch_size == 0 || self.patch_size > self.height || self.patch_size > self.width {
            return Err(Error::Shape(format!(
                "patch size {} does not fit a {}x{} image",
                self.patch_size, self.height, self.width
            )));
        }
        for (name, v) in [
            ("encoder width", self.enc_width),
            ("generator width", self.gen_width),
            ("discriminator width", self.disc_width),
            ("feature extractor width", self.feat_width),
            ("width cap", self.width_cap),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(self)
    }

    /// Resolution the generator starts from: `(h, w) / 2^gen_upsamples`.
    pub fn root_shape(&self) -> (usize, usize) {
        (
            self.height >> self.gen_upsamples,
            self.width >> self.gen_upsamples,
        )
    }

    /// Resolution at the matcher encoder output.
    pub fn enc_out_shape(&self) -> (usize, usize) {
        (self.height >> self.enc_stages, self.width >> self.enc_stages)
    }

    /// Channels of the image context: segmentation one-hot, masked person,
    /// garment, warped garment (3 RGB planes each).
    pub fn context_channels(&self) -> usize {
        self.seg_classes + 9
    }

    /// Number of scalar warp parameters the matcher regresses.
    pub fn warp_param_len(&self) -> usize {
        2 * self.tps_points * self.tps_points
    }

    /// Channel widths for a stack of stages doubling from `base`, capped.
    pub fn stage_widths(&self, base: usize, stages: usize) -> Vec<usize> {
        (0..stages)
            .map(|i| (base << i.min(16)).min(self.width_cap))
            .collect()
    }

    /// Output channel width of each generator block.  Widths are widest at
    /// the root resolution and halve with every 2x upsampling; upsampling
    /// follows only the last `gen_upsamples` blocks, so the early blocks all
    /// share the root width.  Everything is capped at `width_cap`.
    pub fn gen_block_widths(&self) -> Vec<usize> {
        let first_upsampled = self.gen_blocks - self.gen_upsamples;
        (0..self.gen_blocks)
            .map(|i| {
                let ups_before = i.saturating_sub(first_upsampled);
                let doublings = (self.gen_upsamples - ups_before).min(16);
                (self.gen_width << doublings).min(self.width_cap)
            })
            .collect()
    }

    /// FNV-1a hash of the canonical JSON form; stored in checkpoints so a
    /// weight file refuses to load into a differently-shaped network.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }
}

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

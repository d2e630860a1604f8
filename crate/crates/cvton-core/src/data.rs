//! Procedural try-on dataset: articulated stick mannequins with patterned
//! torso garments, rendered with exact ground truth.
//!
//! Every sample consists of a person image, the catalog image of the worn
//! garment, a 25-channel body-part segmentation, and two binary masks (the
//! clothing region on the body and the garment support in the catalog
//! image).  The construction gives the geometric matcher a well-posed task
//! with a known answer: the catalog garment is the torso pattern rendered
//! at a canonical position on white, while the person wears the same
//! pattern translated by an integer offset that is bounded away from zero
//! and stays well inside the warp-offset budget, so the identity warp is
//! never optimal and a pure translation is always attainable.
//!
//! Segmentation channels: 0 background, 1 torso (= clothing region),
//! 2 head, 3 neck, 4/5 upper arms, 6/7 forearms, 8/9 legs; channels 10..24
//! stay empty so tensors keep the full 25-class shape.
//!
//! Everything is rendered on the 8-bit color lattice and stored as PNG, so
//! a write/load round trip reproduces the tensors bit for bit.  Generation
//! is deterministic: sample `i` of a split draws from its own seeded
//! stream, independent of all other samples.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, rng_stream};

/// Garment pattern families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Glyph,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Dots => "dots",
            Pattern::Glyph => "glyph",
        };
        f.write_str(s)
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solid" => Ok(Pattern::Solid),
            "stripes" => Ok(Pattern::Stripes),
            "dots" => Ok(Pattern::Dots),
            "glyph" => Ok(Pattern::Glyph),
            other => Err(Error::Data(format!("unknown pattern {other:?}"))),
        }
    }
}

/// Recipe for a procedural dataset.  All pose quantities are given in the
/// canonical 64x48 pixel frame and scale with the actual resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub height: usize,
    pub width: usize,
    pub seg_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Torso half-width range, canonical pixels.
    pub torso_halfwidth: (f64, f64),
    /// Arm angle from vertical, radians.
    pub arm_angle: (f64, f64),
    /// Magnitude range of the vertical body offset, canonical pixels.
    pub offset_rows: (f64, f64),
    /// Magnitude range of the horizontal body offset, canonical pixels.
    pub offset_cols: (f64, f64),
    pub patterns: Vec<Pattern>,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            height: 64,
            width: 48,
            seg_classes: 25,
            n_train: 200,
            n_test: 50,
            seed: 7,
            torso_halfwidth: (6.0, 9.0),
            arm_angle: (0.25, 0.7),
            offset_rows: (2.0, 8.0),
            offset_cols: (2.0, 6.0),
            patterns: vec![Pattern::Solid, Pattern::Stripes, Pattern::Dots, Pattern::Glyph],
        }
    }
}

impl ToySpec {
    pub fn validated(self) -> Result<Self> {
        if self.height < 32 || self.width < 24 {
            return Err(Error::Config(format!(
                "resolution {}x{} too small for the mannequin",
                self.height, self.width
            )));
        }
        if self.seg_classes < 10 {
            return Err(Error::Config(
                "need at least 10 segmentation classes for the body parts".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("both splits must be non-empty".into()));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("no garment patterns configured".into()));
        }
        let sy = self.height as f64 / 64.0;
        let sx = self.width as f64 / 48.0;
        if (self.offset_rows.0 * sy).round() < 1.0 || (self.offset_cols.0 * sx).round() < 1.0 {
            return Err(Error::Config(
                "minimum body offset rounds to zero at this resolution".into(),
            ));
        }
        // The matcher clamps warp offsets to max_offset (default 0.4) in
        // the [-1,1] coordinate frame; leave headroom so the ground truth
        // is attainable.
        let max_dy = (self.offset_rows.1 * sy) / ((self.height - 1) as f64 / 2.0);
        let max_dx = (self.offset_cols.1 * sx) / ((self.width - 1) as f64 / 2.0);
        if max_dy > 0.38 || max_dx > 0.38 {
            return Err(Error::Config(format!(
                "body offsets reach {max_dy:.2}/{max_dx:.2} of the half-extent; must stay under 0.38"
            )));
        }
        Ok(self)
    }
}

/// Ground-truth pose parameters, persisted in the index file.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    /// Body translation in rows (positive = down), exact pixels.
    pub dy: i64,
    /// Body translation in columns (positive = right), exact pixels.
    pub dx: i64,
    /// Torso half-width in pixels.
    pub half_width: usize,
    pub arm_left: f64,
    pub arm_right: f64,
    pub pattern: Pattern,
}

/// One loaded (or freshly rendered) sample.
#[derive(Debug, Clone)]
pub struct TryOnSample {
    pub id: String,
    /// `[3,H,W]` in [-1,1].
    pub person: ArrayD<f64>,
    /// `[3,H,W]` catalog garment on white.
    pub garment: ArrayD<f64>,
    /// `[d,H,W]` one-hot body parts.
    pub seg: ArrayD<f64>,
    /// `[1,H,W]` clothing region on the body (torso channel).
    pub clothing_mask: ArrayD<f64>,
    /// `[1,H,W]` garment support in the catalog image.
    pub garment_mask: ArrayD<f64>,
    pub pose: PoseParams,
}

/// How the loader pairs people with target garments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Everyone keeps their own garment (reconstruction setting).
    Paired,
    /// A seeded derangement: nobody receives their own garment.
    Shuffled,
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Pairing::Paired),
            "shuffled" | "unpaired" => Ok(Pairing::Shuffled),
            other => Err(Error::Config(format!("unknown pairing {other:?}"))),
        }
    }
}

/// A loaded split with its person-to-garment assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TryOnSample>,
    /// `samples[i]` is to wear the garment of `samples[pairing[i]]`.
    pub pairing: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The sample whose garment sample `i` should wear.
    pub fn target_of(&self, i: usize) -> &TryOnSample {
        &self.samples[self.pairing[i]]
    }
}

// ----- rendering -----------------------------------------------------------

/// Channel count of the stored segmentation maps.  The loader reconstructs
/// one-hot tensors at this depth regardless of how many channels are
/// actually populated.
pub const DATASET_SEG_CLASSES: usize = 25;

const SEG_BG: u8 = 0;
const SEG_TORSO: u8 = 1;
const SEG_HEAD: u8 = 2;
const SEG_NECK: u8 = 3;
const SEG_UPPER_ARM_L: u8 = 4;
const SEG_UPPER_ARM_R: u8 = 5;
const SEG_FOREARM_L: u8 = 6;
const SEG_FOREARM_R: u8 = 7;
const SEG_LEG_L: u8 = 8;
const SEG_LEG_R: u8 = 9;

const GLYPHS: [[u8; 5]; 4] = [
    // cross, T, L, frame — one bit per cell, row-major 5x5.
    [0b00100, 0b00100, 0b11111, 0b00100, 0b00100],
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
    [0b11111, 0b10001, 0b10001, 0b10001, 0b11111],
];

/// Everything needed to color a garment pixel in garment-local coordinates.
struct PatternInstance {
    kind: Pattern,
    color_a: [u8; 3],
    color_b: [u8; 3],
    period: i64,
    glyph: [u8; 5],
    rect_h: i64,
    rect_w: i64,
}

impl PatternInstance {
    fn color_at(&self, u: i64, v: i64) -> [u8; 3] {
        match self.kind {
            Pattern::Solid => self.color_a,
            Pattern::Stripes => {
                if v.rem_euclid(self.period) < self.period / 2 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            Pattern::Dots => {
                let p = self.period;
                let du = u.rem_euclid(p) - p / 2;
                let dv = v.rem_euclid(p) - p / 2;
                if 9 * (du * du + dv * dv) <= p * p {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            Pattern::Glyph => {
                let gu = (u * 5 / self.rect_h).clamp(0, 4) as usize;
                let gv = (v * 5 / self.rect_w).clamp(0, 4) as usize;
                if self.glyph[gu] >> (4 - gv) & 1 == 1 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
        }
    }
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn to_f64(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Saturated color on the 8-bit lattice, strictly darker than white.
fn random_color(rng: &mut rand_chacha::ChaCha8Rng) -> [u8; 3] {
    [
        rng.random_range(30..=240),
        rng.random_range(30..=240),
        rng.random_range(30..=240),
    ]
}

fn jitter_color(rng: &mut rand_chacha::ChaCha8Rng, base: [u8; 3], amount: i16) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let j = rng.random_range(-amount..=amount);
        *o = (b as i16 + j).clamp(30, 250) as u8;
    }
    out
}

struct Painter<'a> {
    idx: &'a mut [u8],
    h: i64,
    w: i64,
}

impl Painter<'_> {
    fn set(&mut self, r: i64, c: i64, class: u8) {
        if r >= 0 && r < self.h && c >= 0 && c < self.w {
            self.idx[(r * self.w + c) as usize] = class;
        }
    }

    fn rect(&mut self, r0: i64, r1: i64, c0: i64, c1: i64, class: u8) {
        for r in r0..r1 {
            for c in c0..c1 {
                self.set(r, c, class);
            }
        }
    }

    fn disk(&mut self, cr: f64, cc: f64, radius: f64, class: u8) {
        let r0 = (cr - radius).floor() as i64;
        let r1 = (cr + radius).ceil() as i64;
        for r in r0..=r1 {
            for c in (cc - radius).floor() as i64..=(cc + radius).ceil() as i64 {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                if dr * dr + dc * dc <= radius * radius {
                    self.set(r, c, class);
                }
            }
        }
    }

    /// Thick line from `(r, c)` with direction angle measured from
    /// straight down, leaning `side` (+1 right, -1 left).
    fn capsule(&mut self, r: f64, c: f64, angle: f64, side: f64, len: f64, thick: f64, class: u8) -> (f64, f64) {
        let dr = angle.cos();
        let dc = side * angle.sin();
        let steps = (len * 4.0).ceil() as usize;
        for k in 0..=steps {
            let t = len * k as f64 / steps as f64;
            self.disk(r + dr * t, c + dc * t, thick, class);
        }
        (r + dr * len, c + dc * len)
    }
}

/// Canonical torso rectangle (before body translation), integer pixels.
fn canonical_torso(spec: &ToySpec, hw: i64) -> (i64, i64, i64, i64) {
    let sy = spec.height as f64 / 64.0;
    let cx = spec.width as i64 / 2;
    let r0 = (14.0 * sy).round() as i64;
    let r1 = (34.0 * sy).round() as i64;
    (r0, r1, cx - hw, cx + hw)
}

/// Render sample `index` of `split` ("train" = 0, "test" = 1 stream).
pub(crate) fn render_sample(spec: &ToySpec, split: &str, index: usize) -> TryOnSample {
    let split_tag = if split == "train" { 0u64 } else { 1u64 };
    let mut rng = rng_stream(spec.seed, (split_tag << 32) | index as u64);
    let (h, w) = (spec.height as i64, spec.width as i64);
    let sy = spec.height as f64 / 64.0;
    let sx = spec.width as f64 / 48.0;
    let s = sy.min(sx);

    // Pose.
    let hw = rng.random_range(
        (spec.torso_halfwidth.0 * sx).round() as i64..=(spec.torso_halfwidth.1 * sx).round() as i64,
    );
    let dy_mag = rng.random_range(
        (spec.offset_rows.0 * sy).round() as i64..=(spec.offset_rows.1 * sy).round() as i64,
    );
    let dx_mag = rng.random_range(
        (spec.offset_cols.0 * sx).round() as i64..=(spec.offset_cols.1 * sx).round() as i64,
    );
    let dy = if rng.random::<bool>() { dy_mag } else { -dy_mag };
    let dx = if rng.random::<bool>() { dx_mag } else { -dx_mag };
    let arm_left = rng.random_range(spec.arm_angle.0..spec.arm_angle.1);
    let arm_right = rng.random_range(spec.arm_angle.0..spec.arm_angle.1);

    // Garment pattern.
    let kind = spec.patterns[rng.random_range(0..spec.patterns.len())];
    let (t_r0, t_r1, t_c0, t_c1) = canonical_torso(spec, hw);
    let base_period = [4.0, 6.0, 8.0][rng.random_range(0..3)];
    let pattern = PatternInstance {
        kind,
        color_a: random_color(&mut rng),
        color_b: random_color(&mut rng),
        period: ((base_period * sx).round() as i64).max(2),
        glyph: GLYPHS[rng.random_range(0..GLYPHS.len())],
        rect_h: t_r1 - t_r0,
        rect_w: t_c1 - t_c0,
    };

    // Body colors.
    let skin = jitter_color(&mut rng, [224, 172, 138], 10);
    let pants = jitter_color(&mut rng, [64, 64, 104], 10);
    let background = [26u8, 26, 26];

    // Paint the class-index map: later parts overwrite earlier ones.
    let mut idx = vec![SEG_BG; (h * w) as usize];
    {
        let mut p = Painter { idx: &mut idx, h, w };
        let cx = (w / 2 + dx) as f64;
        let leg_w = ((3.0 * sx).round() as i64).max(2);
        let leg_r1 = (50.0 * sy).round() as i64 + dy;
        let leg_l = w / 2 + dx - hw / 2;
        let leg_r = w / 2 + dx + hw / 2;
        p.rect(t_r1 + dy, leg_r1, leg_l - leg_w / 2, leg_l - leg_w / 2 + leg_w, SEG_LEG_L);
        p.rect(t_r1 + dy, leg_r1, leg_r - leg_w / 2, leg_r - leg_w / 2 + leg_w, SEG_LEG_R);
        p.rect(t_r0 + dy, t_r1 + dy, t_c0 + dx, t_c1 + dx, SEG_TORSO);
        let arm_thick = (1.2 * s).max(1.0);
        let upper_len = 8.0 * sy;
        let fore_len = 7.0 * sy;
        let shoulder_r = (t_r0 + dy) as f64 + 1.0;
        let (er, ec) = p.capsule(shoulder_r, (t_c0 + dx) as f64 - 1.0, arm_left, -1.0, upper_len, arm_thick, SEG_UPPER_ARM_L);
        p.capsule(er, ec, arm_left + 0.35, -1.0, fore_len, arm_thick, SEG_FOREARM_L);
        let (er, ec) = p.capsule(shoulder_r, (t_c1 + dx) as f64, arm_right, 1.0, upper_len, arm_thick, SEG_UPPER_ARM_R);
        p.capsule(er, ec, arm_right + 0.35, 1.0, fore_len, arm_thick, SEG_FOREARM_R);
        let neck_hw = ((1.5 * sx).round() as i64).max(1);
        p.rect((12.0 * sy).round() as i64 + dy, t_r0 + dy, w / 2 + dx - neck_hw, w / 2 + dx + neck_hw, SEG_NECK);
        p.disk((8.0 * sy) + dy as f64, cx, (4.5 * s).max(2.0), SEG_HEAD);
    }

    // Colorize the person and build the tensors.
    let d = spec.seg_classes;
    let (hu, wu) = (spec.height, spec.width);
    let mut person = ArrayD::<f64>::zeros(IxDyn(&[3, hu, wu]));
    let mut seg = ArrayD::<f64>::zeros(IxDyn(&[d, hu, wu]));
    let mut m_c = ArrayD::<f64>::zeros(IxDyn(&[1, hu, wu]));
    for i in 0..hu {
        for j in 0..wu {
            let class = idx[i * wu + j];
            seg[[class as usize, i, j]] = 1.0;
            let rgb = match class {
                SEG_TORSO => {
                    m_c[[0, i, j]] = 1.0;
                    let u = i as i64 - (t_r0 + dy);
                    let v = j as i64 - (t_c0 + dx);
                    pattern.color_at(u, v)
                }
                SEG_HEAD | SEG_NECK | SEG_UPPER_ARM_L | SEG_UPPER_ARM_R | SEG_FOREARM_L
                | SEG_FOREARM_R => skin,
                SEG_LEG_L | SEG_LEG_R => pants,
                _ => background,
            };
            for c in 0..3 {
                person[[c, i, j]] = to_f64(rgb[c]);
            }
        }
    }

    // Catalog garment: the same pattern at the canonical position on white.
    let mut garment = ArrayD::<f64>::from_elem(IxDyn(&[3, hu, wu]), to_f64(255));
    let mut m_t = ArrayD::<f64>::zeros(IxDyn(&[1, hu, wu]));
    for i in t_r0.max(0)..t_r1.min(h) {
        for j in t_c0.max(0)..t_c1.min(w) {
            let rgb = pattern.color_at(i - t_r0, j - t_c0);
            for c in 0..3 {
                garment[[c, i as usize, j as usize]] = to_f64(rgb[c]);
            }
            m_t[[0, i as usize, j as usize]] = 1.0;
        }
    }

    let id = format!("{split}_{index:04}");
    TryOnSample {
        garment_mask: m_t,
        clothing_mask: m_c,
        pose: PoseParams {
            dy,
            dx,
            half_width: hw as usize,
            arm_left,
            arm_right,
            pattern: kind,
        },
        id: id.clone(),
        person,
        garment,
        seg,
    }
}

// ----- disk format ----------------------------------------------------------

fn write_png(path: &Path, buf: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    image::save_buffer(path, buf, w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("write {}: {e}", path.display())))
}

fn save_rgb(path: &Path, img: &ArrayD<f64>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                buf[(i * w + j) * 3 + c] = to_u8(img[[c, i, j]]);
            }
        }
    }
    write_png(path, &buf, w, h, image::ExtendedColorType::Rgb8)
}

fn load_rgb(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[3, h, w]));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out[[c, i, j]] = to_f64(px.0[c]);
            }
        }
    }
    Ok(out)
}

/// Write an RGB image `[3,H,W]` with values in `[-1,1]` as an 8-bit PNG.
pub fn save_image(path: &Path, img: &ArrayD<f64>) -> Result<()> {
    if img.ndim() != 3 || img.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "expected a [3,H,W] image, got {:?}",
            img.shape()
        )));
    }
    save_rgb(path, img)
}

/// Read an 8-bit PNG into an RGB image `[3,H,W]` with values in `[-1,1]`.
pub fn load_image(path: &Path) -> Result<ArrayD<f64>> {
    load_rgb(path)
}

/// Concatenate same-height `[3,H,W]` images left to right.
pub fn hconcat(images: &[ArrayD<f64>]) -> Result<ArrayD<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (c, h) = (first.shape()[0], first.shape()[1]);
    let mut total_w = 0;
    for img in images {
        if img.ndim() != 3 || img.shape()[0] != c || img.shape()[1] != h {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} next to {:?}",
                img.shape(),
                first.shape()
            )));
        }
        total_w += img.shape()[2];
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, total_w]));
    let mut at = 0;
    for img in images {
        let w = img.shape()[2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ch, i, at + j]] = img[[ch, i, j]];
                }
            }
        }
        at += w;
    }
    Ok(out)
}

/// Segmentation stored as a grayscale class-index map.
fn save_seg(path: &Path, seg: &ArrayD<f64>) -> Result<()> {
    let (d, h, w) = (seg.shape()[0], seg.shape()[1], seg.shape()[2]);
    let mut buf = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut class = 0u8;
            for k in 0..d {
                if seg[[k, i, j]] == 1.0 {
                    class = k as u8;
                    break;
                }
            }
            buf[i * w + j] = class;
        }
    }
    write_png(path, &buf, w, h, image::ExtendedColorType::L8)
}

fn load_seg(path: &Path, d: usize) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[d, h, w]));
    for i in 0..h {
        for j in 0..w {
            let class = img.get_pixel(j as u32, i as u32).0[0] as usize;
            if class >= d {
                return Err(Error::Data(format!(
                    "corrupt segmentation {}: class {class} out of {d}",
                    path.display()
                )));
            }
            out[[class, i, j]] = 1.0;
        }
    }
    Ok(out)
}

/// Both masks share one RGB file: red = clothing mask, green = garment mask.
fn save_masks(path: &Path, m_c: &ArrayD<f64>, m_t: &ArrayD<f64>) -> Result<()> {
    let (h, w) = (m_c.shape()[1], m_c.shape()[2]);
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            buf[(i * w + j) * 3] = if m_c[[0, i, j]] > 0.5 { 255 } else { 0 };
            buf[(i * w + j) * 3 + 1] = if m_t[[0, i, j]] > 0.5 { 255 } else { 0 };
        }
    }
    write_png(path, &buf, w, h, image::ExtendedColorType::Rgb8)
}

fn load_masks(path: &Path) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut m_c = ArrayD::<f64>::zeros(IxDyn(&[1, h, w]));
    let mut m_t = ArrayD::<f64>::zeros(IxDyn(&[1, h, w]));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            if px.0[0] > 127 {
                m_c[[0, i, j]] = 1.0;
            }
            if px.0[1] > 127 {
                m_t[[0, i, j]] = 1.0;
            }
        }
    }
    Ok((m_c, m_t))
}

/// Render and write a full dataset under `root`.
///
/// Layout: `<root>/{train,test}/{person,garment,seg,masks}/<id>.png` plus a
/// per-split `index.txt` with one line per sample:
/// `<id> <garment_id> <dy> <dx> <half_width> <arm_left> <arm_right> <pattern>`.
pub fn generate_toy_dataset(spec: &ToySpec, root: &Path) -> Result<()> {
    let spec = spec.clone().validated()?;
    for (split, n) in [("train", spec.n_train), ("test", spec.n_test)] {
        let split_dir = root.join(split);
        for sub in ["person", "garment", "seg", "masks"] {
            std::fs::create_dir_all(split_dir.join(sub))?;
        }
        let mut index = String::new();
        for i in 0..n {
            let sample = render_sample(&spec, split, i);
            save_rgb(&split_dir.join("person").join(format!("{}.png", sample.id)), &sample.person)?;
            save_rgb(&split_dir.join("garment").join(format!("{}.png", sample.id)), &sample.garment)?;
            save_seg(&split_dir.join("seg").join(format!("{}.png", sample.id)), &sample.seg)?;
            save_masks(
                &split_dir.join("masks").join(format!("{}.png", sample.id)),
                &sample.clothing_mask,
                &sample.garment_mask,
            )?;
            let p = &sample.pose;
            index.push_str(&format!(
                "{} {} {} {} {} {:.6} {:.6} {}\n",
                sample.id, sample.id, p.dy, p.dx, p.half_width, p.arm_left, p.arm_right, p.pattern
            ));
        }
        std::fs::write(split_dir.join("index.txt"), index)?;
    }
    Ok(())
}

fn parse_index_line(line: &str, path: &Path) -> Result<(String, String, PoseParams)> {
    let bad = || Error::Data(format!("malformed index line in {}: {line:?}", path.display()));
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 8 {
        return Err(bad());
    }
    let num = |i: usize| -> Result<f64> { tokens[i].parse::<f64>().map_err(|_| bad()) };
    Ok((
        tokens[0].to_string(),
        tokens[1].to_string(),
        PoseParams {
            dy: num(2)? as i64,
            dx: num(3)? as i64,
            half_width: num(4)? as usize,
            arm_left: num(5)?,
            arm_right: num(6)?,
            pattern: tokens[7].parse::<Pattern>()?,
        },
    ))
}

/// Load one split.  `seed` drives the derangement for shuffled pairing and
/// is ignored for paired loading.
pub fn load_dataset(root: &Path, split: &str, pairing: Pairing, seed: u64) -> Result<Dataset> {
    if split != "train" && split != "test" {
        return Err(Error::Config(format!(
            "unknown split {split:?}: expected \"train\" or \"test\""
        )));
    }
    let split_dir = root.join(split);
    let index_path = split_dir.join("index.txt");
    let index = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::Data(format!("read {}: {e}", index_path.display())))?;

    let mut samples = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let (id, _garment_id, pose) = parse_index_line(line, &index_path)?;
        let person = load_rgb(&split_dir.join("person").join(format!("{id}.png")))?;
        let garment = load_rgb(&split_dir.join("garment").join(format!("{id}.png")))?;
        let seg = load_seg(&split_dir.join("seg").join(format!("{id}.png")), DATASET_SEG_CLASSES)?;
        let (clothing_mask, garment_mask) =
            load_masks(&split_dir.join("masks").join(format!("{id}.png")))?;
        samples.push(TryOnSample {
            id,
            person,
            garment,
            seg,
            clothing_mask,
            garment_mask,
            pose,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("empty index {}", index_path.display())));
    }

    let n = samples.len();
    let pairing = match pairing {
        Pairing::Paired => (0..n).collect(),
        Pairing::Shuffled => {
            if n < 2 {
                return Err(Error::Data(
                    "cannot shuffle a single sample into a derangement".into(),
                ));
            }
            let mut p = permutation(&mut rng_stream(seed, 0xDE7A_46E5), n);
            for i in 0..n {
                if p[i] == i {
                    let j = (i + 1) % n;
                    p.swap(i, j);
                }
            }
            assert!(p.iter().enumerate().all(|(i, &t)| i != t), "derangement failed");
            p
        }
    };
    Ok(Dataset { samples, pairing })
}

/// Masks used by the matcher's losses: the body region to compare
/// appearance over (union of the configured torso channels), the clothing
/// region, and the garment support.
pub fn derive_masks(
    sample: &TryOnSample,
    torso_channels: &[usize],
) -> Result<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> {
    let (d, h, w) = (sample.seg.shape()[0], sample.seg.shape()[1], sample.seg.shape()[2]);
    let mut m_b = ArrayD::<f64>::zeros(IxDyn(&[1, h, w]));
    let mut any = false;
    for &k in torso_channels {
        assert!(k < d, "torso channel {k} outside the segmentation");
        for i in 0..h {
            for j in 0..w {
                if sample.seg[[k, i, j]] > 0.5 {
                    m_b[[0, i, j]] = 1.0;
                    any = true;
                }
            }
        }
    }
    if !any {
        return Err(Error::Data(format!(
            "sample {}: empty body region for channels {torso_channels:?}",
            sample.id
        )));
    }
    Ok((m_b, sample.clothing_mask.clone(), sample.garment_mask.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_spec() -> ToySpec {
        ToySpec {
            n_train: 3,
            n_test: 2,
            ..ToySpec::default()
        }
    }

    fn file_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for path in entries {
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_deterministic_to_the_byte() {
        let spec = tiny_spec();
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        generate_toy_dataset(&spec, a.path()).unwrap();
        generate_toy_dataset(&spec, b.path()).unwrap();
        let fa = file_bytes(a.path());
        let fb = file_bytes(b.path());
        assert_eq!(fa.len(), fb.len());
        assert!(!fa.is_empty());
        for ((na, ba), (nb, bb)) in fa.iter().zip(fb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ba, bb, "file {na} differs between runs");
        }
    }

    #[test]
    fn round_trip_reproduces_tensors_exactly() {
        let spec = tiny_spec();
        let dir = TempDir::new().unwrap();
        generate_toy_dataset(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path(), "test", Pairing::Paired, 0).unwrap();
        assert_eq!(ds.len(), spec.n_test);
        for (i, loaded) in ds.samples.iter().enumerate() {
            let fresh = render_sample(&spec, "test", i);
            assert_eq!(loaded.id, fresh.id);
            assert_eq!(loaded.person, fresh.person, "person tensor drifted through PNG");
            assert_eq!(loaded.garment, fresh.garment);
            assert_eq!(loaded.seg, fresh.seg);
            assert_eq!(loaded.clothing_mask, fresh.clothing_mask);
            assert_eq!(loaded.garment_mask, fresh.garment_mask);
            assert_eq!(loaded.pose.dy, fresh.pose.dy);
            assert_eq!(loaded.pose.dx, fresh.pose.dx);
            assert_eq!(loaded.pose.pattern, fresh.pose.pattern);
        }
    }

    #[test]
    fn samples_satisfy_the_mask_invariants() {
        let spec = ToySpec {
            n_train: 8,
            n_test: 1,
            ..ToySpec::default()
        };
        for i in 0..spec.n_train {
            let s = render_sample(&spec, "train", i);
            // One-hot segmentation.
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let sum: f64 = (0..spec.seg_classes).map(|k| s.seg[[k, r, c]]).sum();
                    assert_eq!(sum, 1.0, "sample {i}: pixel ({r},{c}) not one-hot");
                }
            }
            // Clothing mask is exactly the torso channel.
            assert_eq!(
                s.clothing_mask.index_axis(ndarray::Axis(0), 0),
                s.seg.index_axis(ndarray::Axis(0), SEG_TORSO as usize),
                "sample {i}: clothing mask is not the torso channel"
            );
            // Garment support matches the non-white pixels exactly.
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let white = (0..3).all(|ch| s.garment[[ch, r, c]] == to_f64(255));
                    assert_eq!(
                        s.garment_mask[[0, r, c]] == 0.0,
                        white,
                        "sample {i}: garment mask disagrees with the support at ({r},{c})"
                    );
                }
            }
            // The worn pattern is the catalog pattern translated by (dy,dx):
            // every clothed pixel matches the catalog pixel it came from.
            for r in 0..spec.height as i64 {
                for c in 0..spec.width as i64 {
                    if s.clothing_mask[[0, r as usize, c as usize]] == 1.0 {
                        let (sr, sc) = (r - s.pose.dy, c - s.pose.dx);
                        assert!(
                            sr >= 0 && sc >= 0 && (sr as usize) < spec.height && (sc as usize) < spec.width,
                            "sample {i}: clothed pixel has no catalog source"
                        );
                        for ch in 0..3 {
                            assert_eq!(
                                s.person[[ch, r as usize, c as usize]],
                                s.garment[[ch, sr as usize, sc as usize]],
                                "sample {i}: pattern mismatch at ({r},{c})"
                            );
                        }
                    }
                }
            }
            // Torso region is non-empty and the offset is bounded away from 0.
            assert!(s.clothing_mask.sum() > 0.0);
            assert!(s.pose.dy.abs() >= 2 && s.pose.dx.abs() >= 2);
            assert!(s.pose.dy.abs() <= 8 && s.pose.dx.abs() <= 6);
        }
    }

    #[test]
    fn stripes_share_their_period_on_and_off_body() {
        let spec = ToySpec {
            patterns: vec![Pattern::Stripes],
            n_train: 1,
            n_test: 1,
            ..ToySpec::default()
        };
        let s = render_sample(&spec, "train", 0);
        // Autocorrelation of a binarized row, along columns; the first
        // positive peak is the stripe period.
        let period_of = |img: &ArrayD<f64>, mask: &ArrayD<f64>| -> usize {
            // Use the longest run of masked pixels in any row.
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let mut best: (usize, usize, usize) = (0, 0, 0); // (len, row, col0)
            for r in 0..h {
                let mut c = 0;
                while c < w {
                    if mask[[0, r, c]] == 1.0 {
                        let start = c;
                        while c < w && mask[[0, r, c]] == 1.0 {
                            c += 1;
                        }
                        if c - start > best.0 {
                            best = (c - start, r, start);
                        }
                    } else {
                        c += 1;
                    }
                }
            }
            let (len, row, col0) = best;
            assert!(len >= 8, "masked run too short for a period estimate");
            let vals: Vec<f64> = (0..len)
                .map(|k| (0..3).map(|ch| img[[ch, row, col0 + k]]).sum::<f64>())
                .collect();
            let mean = vals.iter().sum::<f64>() / len as f64;
            let score = |lag: usize| -> f64 {
                (0..len - lag)
                    .map(|k| (vals[k] - mean) * (vals[k + lag] - mean))
                    .sum::<f64>()
                    / (len - lag) as f64
            };
            // Smallest lag within 1% of the autocorrelation peak: the
            // fundamental period rather than one of its multiples.
            let lags: Vec<usize> = (2..=len - 4).collect();
            let peak = lags.iter().map(|&l| score(l)).fold(f64::MIN, f64::max);
            assert!(peak > 0.0, "no periodic structure found");
            *lags.iter().find(|&&l| score(l) >= 0.99 * peak).unwrap()
        };
        let on_body = period_of(&s.person, &s.clothing_mask);
        let catalog = period_of(&s.garment, &s.garment_mask);
        assert_eq!(on_body, catalog, "stripe period must survive the warp");
    }

    #[test]
    fn shuffled_pairing_is_a_derangement() {
        let spec = ToySpec {
            n_train: 5,
            n_test: 5,
            ..ToySpec::default()
        };
        let dir = TempDir::new().unwrap();
        generate_toy_dataset(&spec, dir.path()).unwrap();
        let paired = load_dataset(dir.path(), "test", Pairing::Paired, 3).unwrap();
        assert!(paired.pairing.iter().enumerate().all(|(i, &t)| i == t));
        assert_eq!(paired.target_of(2).id, paired.samples[2].id);
        let shuffled = load_dataset(dir.path(), "test", Pairing::Shuffled, 3).unwrap();
        assert!(
            shuffled.pairing.iter().enumerate().all(|(i, &t)| i != t),
            "derangement must have no fixed points: {:?}",
            shuffled.pairing
        );
        let again = load_dataset(dir.path(), "test", Pairing::Shuffled, 3).unwrap();
        assert_eq!(shuffled.pairing, again.pairing, "pairing must be seed-deterministic");
    }

    #[test]
    fn loader_reports_unknown_split_and_missing_index() {
        let dir = TempDir::new().unwrap();
        match load_dataset(dir.path(), "validation", Pairing::Paired, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("validation")),
            other => panic!("expected a config error, got {other:?}"),
        }
        match load_dataset(dir.path(), "train", Pairing::Paired, 0) {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("index.txt"), "error must name the path: {msg}")
            }
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn derived_masks_cover_the_clothing_region() {
        let spec = tiny_spec();
        let s = render_sample(&spec, "train", 0);
        let (m_b, m_c, m_t) = derive_masks(&s, &[SEG_TORSO as usize]).unwrap();
        assert_eq!(m_b, m_c, "with only the torso configured the two masks coincide");
        assert_eq!(m_t, s.garment_mask);
        // A body mask over torso + arms strictly contains the clothing mask.
        let (m_b_wide, m_c, _) = derive_masks(&s, &[1, 4, 5, 6, 7]).unwrap();
        for (b, c) in m_b_wide.iter().zip(m_c.iter()) {
            assert!(b >= c, "body mask must contain the clothing mask");
        }
        assert!(m_b_wide.sum() > m_c.sum());
    }

    #[test]
    fn empty_segmentation_is_rejected() {
        let spec = tiny_spec();
        let mut s = render_sample(&spec, "train", 0);
        s.seg.fill(0.0);
        match derive_masks(&s, &[1]) {
            Err(Error::Data(msg)) => assert!(msg.contains("empty body region")),
            other => panic!("expected a data error, got {other:?}"),
        }
    }

    #[test]
    fn pattern_tokens_round_trip() {
        for p in [Pattern::Solid, Pattern::Stripes, Pattern::Dots, Pattern::Glyph] {
            assert_eq!(p.to_string().parse::<Pattern>().unwrap(), p);
        }
        assert!(matches!("plaid".parse::<Pattern>(), Err(Error::Data(_))));
        assert!(matches!("paired".parse::<Pairing>(), Ok(Pairing::Paired)));
        assert!(matches!("unpaired".parse::<Pairing>(), Ok(Pairing::Shuffled)));
        assert!(matches!("festive".parse::<Pairing>(), Err(Error::Config(_))));
    }
}

//! Geometric matcher: predicts a thin-plate warp that fits a flat garment
//! onto a posed body.
//!
//! Two twin encoders look at different things — one at the garment image,
//! one at the body segmentation — and meet in a correlation matrix: both
//! feature volumes are channel-L2-normalized, flattened over space, and
//! every site of one is dotted against every site of the other
//! (`Corr = Ψ₁ᵀΨ₂`). A small convolutional regressor reads the correlation
//! volume and emits the control-point offsets of the warp, squashed through
//! `tanh` and scaled by a configured bound so early training cannot fold
//! the garment over itself.
//!
//! The prediction head is zero-initialized, which makes the untrained
//! matcher the *exact* identity: zero offsets produce the integer identity
//! grid (see [`crate::tps`]), and sampling at integer pixels reproduces the
//! input bit for bit. Training therefore starts from "no warp" and can only
//! improve on it.
//!
//! Three losses supervise the warp, all mean-normalized so the default
//! weights are resolution-independent:
//!
//! * shape: L1 between the warped garment mask and the clothing area,
//! * appearance: L1 between warped garment and person, inside the body area,
//! * feature: weighted per-layer L1 between extractor features of the same
//!   masked pair (deeper layers weighted more).

#[cfg(test)]
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::NetConfig;
use crate::error::Result;
use crate::metrics::FeatureExtractor;
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};
use crate::tps::{TpsSolver, DEFAULT_RIDGE};

/// Per-layer weights for the matcher's feature-space loss; deeper layers
/// count more (each level doubles).
pub const FEATURE_LAYER_WEIGHTS: [f64; 5] = [0.0625, 0.125, 0.25, 0.5, 1.0];

/// Balancing weights of the matcher objective.
#[derive(Debug, Clone, Copy)]
pub struct MatcherWeights {
    pub shp: f64,
    pub app: f64,
    pub vgg: f64,
}

impl Default for MatcherWeights {
    fn default() -> Self {
        MatcherWeights {
            shp: 1.0,
            app: 1.0,
            vgg: 0.1,
        }
    }
}

/// Scalar values of one matcher loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MatcherLossReport {
    pub shp: f64,
    pub app: f64,
    pub vgg: f64,
    pub total: f64,
}

/// One encoder stage: stride-2 convolution → batch-norm → relu.
#[derive(Debug, Clone)]
struct EncStage {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Downsampling feature encoder (one of the twins, or a discriminator stem).
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<EncStage>,
    in_ch: usize,
}

impl Encoder {
    pub fn init(
        name: &str,
        in_ch: usize,
        widths: &[usize],
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut cur = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(EncStage {
                conv: Conv2d::init(&format!("{name}.{i}.conv"), cur, w, 3, 2, 1, params, rng),
                bn: BatchNorm2d::init(&format!("{name}.{i}.bn"), w, params),
            });
            cur = w;
        }
        Encoder { stages, in_ch }
    }

    /// `[b, in_ch, h, w] → [b, widths.last(), h/2^stages, w/2^stages]`.
    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let shape = s.tape.shape(x);
        assert_eq!(
            shape[1], self.in_ch,
            "encoder expects {} input channels, got {}",
            self.in_ch, shape[1]
        );
        let mut cur = x;
        for stage in &self.stages {
            cur = s.tape.relu(stage.bn.forward(s, stage.conv.forward(s, cur)));
        }
        cur
    }
}

/// `Corr = Ψ₁ᵀΨ₂` over channel-normalized feature volumes `[b, c, hf, wf]`:
/// every entry is a dot product of two unit vectors, so the whole matrix
/// lives in [−1, 1] up to the normalization epsilon.
pub fn correlate(tape: &Tape, f1: Var, f2: Var) -> Var {
    let s1 = tape.shape(f1);
    let s2 = tape.shape(f2);
    assert_eq!(s1, s2, "correlation needs matching feature volumes");
    let (b, c, hf, wf) = (s1[0], s1[1], s1[2], s1[3]);
    let sites = hf * wf;
    let n1 = tape.channel_l2_normalize(f1, 1e-12);
    let n2 = tape.channel_l2_normalize(f2, 1e-12);
    let psi1 = tape.reshape(n1, &[b, c, sites]);
    let psi2 = tape.reshape(n2, &[b, c, sites]);
    tape.bmm(tape.transpose_last2(psi1), psi2)
}

/// Correlation-to-offsets regressor: four conv stages and a linear head.
#[derive(Debug, Clone)]
struct Regressor {
    stages: Vec<EncStage>,
    head: Linear,
    max_offset: f64,
    hf: usize,
    wf: usize,
}

impl Regressor {
    fn init(
        name: &str,
        cfg: &NetConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (hf, wf) = cfg.enc_out_shape();
        let sites = hf * wf;
        let widths = cfg.stage_widths(cfg.enc_width, 4);
        let mut stages = Vec::new();
        let mut cur = sites;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(EncStage {
                conv: Conv2d::init(&format!("{name}.{i}.conv"), cur, w, 3, 1, 1, params, rng),
                bn: BatchNorm2d::init(&format!("{name}.{i}.bn"), w, params),
            });
            cur = w;
        }
        // Zero-initialized head: the untrained warp is exactly the identity.
        let head = Linear::init_zero(&format!("{name}.head"), cur * sites, cfg.warp_param_len(), params);
        Regressor {
            stages,
            head,
            max_offset: cfg.max_offset,
            hf,
            wf,
        }
    }

    /// `corr [b, sites, sites] → offsets [b, 2n²]`, bounded by `max_offset`.
    fn forward(&self, s: &Session, corr: Var) -> Var {
        let shape = s.tape.shape(corr);
        let (b, sites) = (shape[0], shape[1]);
        assert_eq!(sites, self.hf * self.wf, "correlation does not match encoder output");
        let mut cur = s.tape.reshape(corr, &[b, sites, self.hf, self.wf]);
        for stage in &self.stages {
            cur = s.tape.relu(stage.bn.forward(s, stage.conv.forward(s, cur)));
        }
        let cshape = s.tape.shape(cur);
        let flat = s.tape.reshape(cur, &[b, cshape[1] * cshape[2] * cshape[3]]);
        let raw = self.head.forward(s, flat);
        s.tape.mul_scalar(s.tape.tanh(raw), self.max_offset)
    }
}

/// Everything the matcher computes in one forward pass.
pub struct MatcherOutput {
    /// Control-point offsets `[b, 2n²]`, in normalized units.
    pub theta: Var,
    /// Dense sampling grid `[b, h, w, 2]` in pixels.
    pub grid: Var,
    /// Garment warped onto the body `[b, 3, h, w]`.
    pub warped_garment: Var,
    /// Garment mask warped the same way `[b, 1, h, w]`.
    pub warped_mask: Var,
}

/// The full geometric matcher: twin encoders, correlation, regressor, warp.
pub struct Matcher {
    pub params: ParamSet,
    enc_garment: Encoder,
    enc_seg: Encoder,
    regressor: Regressor,
    solver: TpsSolver,
}

impl Matcher {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let widths = cfg.stage_widths(cfg.enc_width, cfg.enc_stages);
        let enc_garment = Encoder::init("match.garment", 3, &widths, &mut params, rng);
        let enc_seg = Encoder::init("match.seg", cfg.seg_classes, &widths, &mut params, rng);
        let regressor = Regressor::init("match.regress", cfg, &mut params, rng);
        let solver = TpsSolver::new(cfg.tps_points, cfg.height, cfg.width, DEFAULT_RIDGE)?;
        Ok(Matcher {
            params,
            enc_garment,
            enc_seg,
            regressor,
            solver,
        })
    }

    pub fn solver(&self) -> &TpsSolver {
        &self.solver
    }

    /// Predict offsets only (no warping).
    pub fn regress(&self, s: &Session, garment: Var, seg: Var) -> Var {
        let f1 = self.enc_garment.forward(s, garment);
        let f2 = self.enc_seg.forward(s, seg);
        let corr = correlate(s.tape, f1, f2);
        self.regressor.forward(s, corr)
    }

    /// Full pass: predict the warp from `(garment, seg)` and apply it to the
    /// garment image and its mask.
    pub fn forward(&self, s: &Session, garment: Var, garment_mask: Var, seg: Var) -> MatcherOutput {
        let theta = self.regress(s, garment, seg);
        let grid = self.solver.grid_op(s.tape, theta);
        let warped_garment = s.tape.grid_sample_border(garment, grid);
        let warped_mask = s.tape.grid_sample_border(garment_mask, grid);
        MatcherOutput {
            theta,
            grid,
            warped_garment,
            warped_mask,
        }
    }
}

/// Repeat a 1-channel mask across `ch` channels.
pub fn expand_mask(tape: &Tape, mask: Var, ch: usize) -> Var {
    assert_eq!(tape.shape(mask)[1], 1, "expand_mask expects [b,1,h,w]");
    if ch == 1 {
        return mask;
    }
    tape.concat_channels(&vec![mask; ch])
}

/// Mean absolute difference between the warped garment mask and the target
/// clothing area.
pub fn loss_shape(tape: &Tape, warped_mask: Var, clothing_mask: Var) -> Var {
    assert_eq!(
        tape.shape(warped_mask),
        tape.shape(clothing_mask),
        "shape loss needs masks at the same resolution"
    );
    tape.mean_all(tape.abs(tape.sub(warped_mask, clothing_mask)))
}

/// Mean L1 between warped garment and person, restricted to the body area:
/// both images are multiplied by the mask first, so pixels outside it
/// contribute exactly zero.
pub fn loss_appearance(tape: &Tape, warped: Var, person: Var, body_mask: Var) -> Var {
    assert_eq!(
        tape.shape(warped),
        tape.shape(person),
        "appearance loss needs images at the same resolution"
    );
    let ch = tape.shape(warped)[1];
    let m = expand_mask(tape, body_mask, ch);
    tape.mean_all(tape.abs(tape.sub(tape.mul(warped, m), tape.mul(person, m))))
}

/// Feature-space distance between the masked pair, weighted per layer.
pub fn loss_features(
    tape: &Tape,
    fx: &FeatureExtractor,
    warped: Var,
    person: Var,
    body_mask: Var,
    weights: &[f64],
) -> Var {
    assert_eq!(
        fx.num_layers(),
        weights.len(),
        "feature loss needs one weight per extractor layer"
    );
    let ch = tape.shape(warped)[1];
    let m = expand_mask(tape, body_mask, ch);
    crate::metrics::perceptual_loss(tape, fx, tape.mul(warped, m), tape.mul(person, m), weights)
}

/// Weighted sum of the three matcher losses, plus a scalar report.
pub fn matcher_objective(
    tape: &Tape,
    shp: Var,
    app: Var,
    vgg: Var,
    w: &MatcherWeights,
) -> (Var, MatcherLossReport) {
    let total = tape.add(
        tape.add(tape.mul_scalar(shp, w.shp), tape.mul_scalar(app, w.app)),
        tape.mul_scalar(vgg, w.vgg),
    );
    let report = MatcherLossReport {
        shp: tape.scalar_value(shp),
        app: tape.scalar_value(app),
        vgg: tape.scalar_value(vgg),
        total: tape.scalar_value(total),
    };
    (total, report)
}

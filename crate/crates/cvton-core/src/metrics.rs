//! Perceptual features, the perceptual loss, and the FID/LPIPS metrics.
//!
//! Everything here is built on one [`FeatureExtractor`]: a small convnet
//! with *fixed random weights* drawn from a seed baked into this file. It
//! is never trained, so every run of the program — today or months from
//! now — extracts identical features, and metric numbers are comparable
//! across runs without downloading a pretrained backbone.
//!
//! **The numbers are comparable only to themselves.** A random-feature FID
//! or LPIPS ranks models trained in this repository perfectly well, but it
//! is not on the scale of published Inception-FID or VGG-LPIPS values; the
//! report records the extractor fingerprint so mixed-up comparisons are
//! detectable.
//!
//! Three consumers share the extractor:
//!
//! * the training-time perceptual loss (weighted per-layer mean-L1),
//! * LPIPS (unit-normalized feature differences, squared, spatially
//!   averaged, summed over layers; channel weights default to 1),
//! * FID (Fréchet distance between Gaussian fits of final-layer
//!   embeddings, matrix square root by symmetric eigendecomposition).

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{fnv1a, NetConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet, Session};
use crate::rng::rng_from;

/// Seed the extractor weights are drawn from — part of the metric's
/// definition, not a tunable.
const EXTRACTOR_SEED: u64 = 0x4558_5452;

/// Cap on extractor stage widths; the final stage is the FID embedding, so
/// this is the embedding dimension once the widths have doubled up to it.
const EXTRACTOR_WIDTH_CAP: usize = 64;

/// Per-layer weights for the perceptual loss (all ones).
pub const PERCEPTUAL_WEIGHTS: [f64; 5] = [1.0; 5];

/// Eigenvalues of a covariance more negative than this are an error, not
/// noise to clamp away.
const PSD_TOLERANCE: f64 = 1e-8;

/// Fixed random convnet producing a pyramid of feature maps.
///
/// Stages are `conv 3×3 (pad 1) → relu`, with 2× average pooling *between*
/// stages, so `stages` maps come out at descending resolutions. No
/// normalization layers: the map is translation-equivariant away from the
/// padded border, which the tests lean on.
pub struct FeatureExtractor {
    params: ParamSet,
    convs: Vec<Conv2d>,
    widths: Vec<usize>,
}

impl FeatureExtractor {
    /// Build the default extractor for a configuration. Same config ⇒ same
    /// weights, bit for bit.
    pub fn new(cfg: &NetConfig) -> Self {
        let mut rng = rng_from(EXTRACTOR_SEED);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut widths = Vec::new();
        let mut in_ch = 3;
        for i in 0..cfg.feat_stages {
            let out_ch = (cfg.feat_width << i.min(16)).min(EXTRACTOR_WIDTH_CAP);
            convs.push(Conv2d::init(
                &format!("feat.{i}"),
                in_ch,
                out_ch,
                3,
                1,
                1,
                &mut params,
                &mut rng,
            ));
            widths.push(out_ch);
            in_ch = out_ch;
        }
        FeatureExtractor {
            params,
            convs,
            widths,
        }
    }

    /// Number of feature maps produced.
    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    /// Read-only view of the weights, e.g. for archiving them.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Channels of the final map — the FID embedding dimension.
    pub fn embed_dim(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    /// Fingerprint of the weights, recorded in metric reports so numbers
    /// from different extractors are never compared by accident.
    pub fn fingerprint(&self) -> String {
        let mut h = fnv1a(b"feature-extractor");
        for (name, value) in &self.params.params {
            h ^= fnv1a(name.as_bytes());
            for v in value.iter() {
                h ^= fnv1a(&v.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }

    /// Feature pyramid of `x [b, 3, h, w]` on the caller's tape. The
    /// weights enter as gradient-free constants, so using this inside a
    /// training loss costs no extra backward work for the extractor.
    pub fn features(&self, tape: &Tape, x: Var) -> Vec<Var> {
        let s = Session::eval(tape, &self.params);
        let mut maps = Vec::with_capacity(self.convs.len());
        let mut cur = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                cur = tape.avg_pool2(cur, 2);
            }
            cur = tape.relu(conv.forward(&s, cur));
            maps.push(cur);
        }
        maps
    }

    /// Feature pyramid without a tape, for pure evaluation.
    pub fn features_eval(&self, x: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        self.features(&tape, xv)
            .into_iter()
            .map(|v| tape.value_owned(v))
            .collect()
    }

    /// FID embeddings: final feature map, spatially averaged → `[n, d]`.
    /// Images arrive as a batch `[n, 3, h, w]`.
    pub fn embed(&self, images: &ArrayD<f64>) -> Array2<f64> {
        let maps = self.features_eval(images);
        let last = maps.last().expect("at least one stage");
        let (n, c, h, w) = (
            last.shape()[0],
            last.shape()[1],
            last.shape()[2],
            last.shape()[3],
        );
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for r in 0..h {
                    for col in 0..w {
                        acc += last[[i, ci, r, col]];
                    }
                }
                out[(i, ci)] = acc / (h * w) as f64;
            }
        }
        out
    }
}

/// Weighted per-layer mean-L1 distance between two images' feature
/// pyramids, as a tape op (differentiable through both images).
pub fn perceptual_loss(
    tape: &Tape,
    fx: &FeatureExtractor,
    a: Var,
    b: Var,
    weights: &[f64],
) -> Var {
    let fa = fx.features(tape, a);
    let fb = fx.features(tape, b);
    assert_eq!(weights.len(), fa.len(), "one weight per feature layer");
    let mut total = tape.constant(ArrayD::zeros(IxDyn(&[])));
    for ((ma, mb), &w) in fa.into_iter().zip(fb).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let term = tape.mean_all(tape.abs(tape.sub(ma, mb)));
        total = tape.add(total, tape.mul_scalar(term, w));
    }
    total
}

/// LPIPS-style distance per batch element: per-layer unit-normalized
/// feature differences, squared, channel-weighted (weights default 1),
/// spatially averaged, summed over layers.
pub fn lpips_batch(
    fx: &FeatureExtractor,
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    weights: &[f64],
) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape(), "lpips inputs must match in shape");
    let fa = fx.features_eval(a);
    let fb = fx.features_eval(b);
    assert_eq!(weights.len(), fa.len(), "one weight per feature layer");
    let n = a.shape()[0];
    let mut out = vec![0.0; n];
    for ((ma, mb), &w) in fa.iter().zip(&fb).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let (c, h, wd) = (ma.shape()[1], ma.shape()[2], ma.shape()[3]);
        for (i, acc) in out.iter_mut().enumerate() {
            let mut layer = 0.0;
            for r in 0..h {
                for col in 0..wd {
                    // Unit-normalize the channel vectors at this site.
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for ci in 0..c {
                        na += ma[[i, ci, r, col]] * ma[[i, ci, r, col]];
                        nb += mb[[i, ci, r, col]] * mb[[i, ci, r, col]];
                    }
                    let na = (na + 1e-10).sqrt();
                    let nb = (nb + 1e-10).sqrt();
                    for ci in 0..c {
                        let d = ma[[i, ci, r, col]] / na - mb[[i, ci, r, col]] / nb;
                        layer += d * d;
                    }
                }
            }
            *acc += w * layer / (h * wd) as f64;
        }
    }
    out
}

/// LPIPS between two single images `[3, h, w]` with all-ones weights.
pub fn lpips_pair(fx: &FeatureExtractor, a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let stack = |x: &ArrayD<f64>| {
        let mut s = vec![1usize];
        s.extend_from_slice(x.shape());
        x.clone().into_shape_with_order(IxDyn(&s)).unwrap()
    };
    let w = vec![1.0; fx.num_layers()];
    lpips_batch(fx, &stack(a), &stack(b), &w)[0]
}

/// Gaussian fit of a set of embeddings: mean and (unbiased) covariance.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl EmbeddingStats {
    /// Two-pass moments over `[n, d]` embeddings; needs `n ≥ 2` for the
    /// unbiased covariance.
    pub fn from_embeddings(x: &Array2<f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::Data(format!(
                "need at least 2 embeddings for covariance, got {n}"
            )));
        }
        let mut mean = Array1::<f64>::zeros(d);
        for row in x.rows() {
            mean += &row;
        }
        mean /= n as f64;
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in x.rows() {
            let dlt = &row - &mean;
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += dlt[i] * dlt[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        Ok(EmbeddingStats { mean, cov, n })
    }
}

/// Square root of a symmetric PSD matrix by eigendecomposition. Slightly
/// negative eigenvalues (roundoff) clamp to zero; anything below the
/// tolerance is reported as a numeric failure instead of silently fixed.
fn sym_sqrt(m: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let d = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = nalgebra::SymmetricEigen::new(dm);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::Numeric(format!(
                "{what} is not positive semi-definite (eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    let root = &q * nalgebra::DMatrix::from_diagonal(&vals) * q.transpose();
    Ok(Array2::from_shape_fn((d, d), |(i, j)| root[(i, j)]))
}

/// Fréchet distance between two Gaussian fits:
/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^{1/2})`.
///
/// The cross term uses `tr((Σ₁Σ₂)^{1/2}) = tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`, which
/// keeps every decomposition symmetric. The result is clamped at zero when
/// roundoff leaves it a hair negative.
pub fn fid(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(Error::Shape(format!(
            "embedding dims disagree: {d} vs {}",
            b.mean.len()
        )));
    }
    let mut mean_term = 0.0;
    for i in 0..d {
        let dv = a.mean[i] - b.mean[i];
        mean_term += dv * dv;
    }
    let ra = sym_sqrt(&a.cov, "first covariance")?;
    let inner = ra.dot(&b.cov).dot(&ra);
    let cross = sym_sqrt(&inner, "covariance product")?;
    let mut trace_term = 0.0;
    for i in 0..d {
        trace_term += a.cov[(i, i)] + b.cov[(i, i)] - 2.0 * cross[(i, i)];
    }
    let value = mean_term + trace_term;
    if value < -1e-6 {
        return Err(Error::Numeric(format!(
            "Fréchet distance came out negative ({value:.3e}); covariances are ill-conditioned"
        )));
    }
    Ok(value.max(0.0))
}

/// FID between two stacks of images `[n, 3, h, w]`, embedding both with
/// the same extractor.
pub fn fid_between_image_sets(
    fx: &FeatureExtractor,
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
) -> Result<f64> {
    let sa = EmbeddingStats::from_embeddings(&fx.embed(a))?;
    let sb = EmbeddingStats::from_embeddings(&fx.embed(b))?;
    fid(&sa, &sb)
}

/// Which comparison a metric report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Generated image vs the ground-truth image of the same pair:
    /// LPIPS mean ± std (FID of the two sets comes along for free).
    Paired,
    /// Generated set vs real set with shuffled garments: FID only.
    Unpaired,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Protocol::Paired),
            "unpaired" => Ok(Protocol::Unpaired),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected paired|unpaired)"
            ))),
        }
    }
}

/// Serialized result of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub n_samples: usize,
    pub fid: f64,
    pub lpips_mean: Option<f64>,
    pub lpips_std: Option<f64>,
    pub extractor_id: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Numeric(format!("report not serializable: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("unparseable report {}: {e}", path.display())))
    }
}

/// Score a stack of generated images `[n, 3, h, w]` against references of
/// the same shape. Paired protocol: references are the ground-truth images
/// of the same pairs, LPIPS is reported per pair. Unpaired: references are
/// just the real set, only FID is meaningful.
pub fn evaluate_images(
    fx: &FeatureExtractor,
    generated: &ArrayD<f64>,
    reference: &ArrayD<f64>,
    protocol: Protocol,
    seed: u64,
) -> Result<MetricReport> {
    let n = generated.shape()[0];
    if n == 0 || reference.shape()[0] == 0 {
        return Err(Error::Data("cannot evaluate an empty image set".into()));
    }
    let fid_value = fid_between_image_sets(fx, generated, reference)?;
    let (lpips_mean, lpips_std) = match protocol {
        Protocol::Paired => {
            assert_eq!(
                generated.shape(),
                reference.shape(),
                "paired evaluation needs matching stacks"
            );
            let w = vec![1.0; fx.num_layers()];
            let values = lpips_batch(fx, generated, reference, &w);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            (Some(mean), Some(var.sqrt()))
        }
        Protocol::Unpaired => (None, None),
    };
    Ok(MetricReport {
        protocol,
        n_samples: n,
        fid: fid_value,
        lpips_mean,
        lpips_std,
        extractor_id: fx.fingerprint(),
        seed,
    })
}

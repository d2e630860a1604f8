//! Two-stage training orchestration: first the geometric matcher on paired
//! data, then the generator with its three critics on top of the frozen
//! matcher.  Also home to checkpointing, inference from a checkpoint, and
//! test-set evaluation.
//!
//! Every run is fully deterministic for a given seed: network
//! initialization, epoch shuffling, and evaluation pairing all draw from
//! separate named streams of the one seed, and data loading is
//! index-ordered.  Each stage writes `ckpt_<epoch>.ckpt`,
//! `config.snapshot`, and `losses.log` (one structured line per step) into
//! its output directory.
//!
//! Within a batch the order is: one generator forward, one critic update
//! on the detached output, then the generator update against the freshly
//! updated critics.  Averaged (EMA) generator weights are maintained after
//! every generator step and stored alongside the live ones.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::adversaries::{
    bce_critic_loss, bce_generator_loss, patch_boxes, seg_critic_loss, seg_generator_loss,
    MatchCritic, PatchCritic, SegCritic,
};
use crate::autodiff::Tape;
use crate::config::NetConfig;
use crate::data::{derive_masks, Dataset};
use crate::error::{Error, Result};
use crate::generator::{build_image_context, BuildContext, Generator};
use crate::matcher::{
    loss_appearance, loss_features, loss_shape, matcher_objective, Matcher, MatcherWeights,
};
use crate::metrics::{
    evaluate_images, perceptual_loss, FeatureExtractor, MetricReport, Protocol,
};
use crate::nn::{Adam, ParamSet, Session, BN_MOMENTUM};
use crate::rng::{permutation, rng_stream};

// Named seed streams, so every consumer of randomness is independent.
pub(crate) const SALT_MATCHER_INIT: u64 = 0x4D41_5443;
pub(crate) const SALT_GEN_INIT: u64 = 0x47454E_31;
pub(crate) const SALT_DSEG_INIT: u64 = 0xD15C_0001;
pub(crate) const SALT_DMTH_INIT: u64 = 0xD15C_0002;
pub(crate) const SALT_DPTC_INIT: u64 = 0xD15C_0003;
pub(crate) const SALT_ORDER: u64 = 0x0EA0_0000;

/// Optimization hyperparameters, loss weights, and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Matcher learning rate.
    pub lr_bpgm: f64,
    /// Generator learning rate.
    pub lr_g: f64,
    /// Critic learning rate.
    pub lr_d: f64,
    /// Matcher loss weights: mask overlap, masked L1, masked features.
    pub w_shape: f64,
    pub w_appearance: f64,
    pub w_features: f64,
    /// Generator loss weights.
    pub w_perceptual: f64,
    pub w_seg: f64,
    pub w_match: f64,
    pub w_patch: f64,
    /// Decay of the averaged generator weights.
    pub ema_decay: f64,
    pub epochs_bpgm: usize,
    pub epochs_g: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Ablation: plain normalization instead of context-conditioned.
    pub no_can: bool,
    /// Ablation: feed the unwarped garment as the warped channel.
    pub no_bpgm: bool,
    /// Ablation: train the generator on the perceptual loss alone.
    pub no_discriminators: bool,
    /// Ablation: keep no weight average.
    pub no_ema: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_bpgm: 1e-4,
            lr_g: 1e-4,
            lr_d: 4e-4,
            w_shape: 1.0,
            w_appearance: 1.0,
            w_features: 0.1,
            w_perceptual: 10.0,
            w_seg: 1.0,
            w_match: 1.0,
            w_patch: 1.0,
            ema_decay: 0.9999,
            epochs_bpgm: 30,
            epochs_g: 100,
            batch_size: 4,
            seed: 7,
            no_can: false,
            no_bpgm: false,
            no_discriminators: false,
            no_ema: false,
        }
    }
}

impl TrainConfig {
    pub fn validated(self) -> Result<Self> {
        for (name, v) in [
            ("lr_bpgm", self.lr_bpgm),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0,1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs_bpgm == 0 || self.epochs_g == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn matcher_weights(&self) -> MatcherWeights {
        MatcherWeights {
            shp: self.w_shape,
            app: self.w_appearance,
            vgg: self.w_features,
        }
    }
}

/// A complete run configuration: architecture plus training schedule.
/// This is what `config.snapshot` holds and what the CLI reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "NetConfig::toy")]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }
}

// ----- checkpoints ----------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"VTONCKP1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    epoch: usize,
    net_digest: u64,
    flags: BTreeMap<String, bool>,
    /// Tensor names and shapes, in storage order.
    tensors: Vec<(String, Vec<usize>)>,
}

/// A parameter archive: every tensor of a training stage, keyed by a
/// namespaced path such as `gen/param/gen.block0.conv1.weight`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: usize,
    pub net_digest: u64,
    pub flags: BTreeMap<String, bool>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    fn new(kind: &str, epoch: usize, cfg: &NetConfig) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            epoch,
            net_digest: cfg.digest(),
            flags: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    fn put_params(&mut self, prefix: &str, ps: &ParamSet) {
        for (k, v) in &ps.params {
            self.tensors.insert(format!("{prefix}/param/{k}"), v.clone());
        }
        for (k, v) in &ps.buffers {
            self.tensors.insert(format!("{prefix}/buffer/{k}"), v.clone());
        }
    }

    /// Overwrite every entry of `into` from the archive; any missing name
    /// or shape mismatch is an incompatibility error.
    fn get_params(&self, prefix: &str, into: &mut ParamSet) -> Result<()> {
        let fill = |kind: &str, dst: &mut BTreeMap<String, ArrayD<f64>>| -> Result<()> {
            for (k, v) in dst.iter_mut() {
                let key = format!("{prefix}/{kind}/{k}");
                let src = self.tensors.get(&key).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor {key} in {} checkpoint", self.kind))
                })?;
                if src.shape() != v.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key}: stored shape {:?}, expected {:?}",
                        src.shape(),
                        v.shape()
                    )));
                }
                v.assign(src);
            }
            Ok(())
        };
        fill("param", &mut into.params)?;
        fill("buffer", &mut into.buffers)
    }

    /// Whether any tensor lives under `prefix/` — e.g. `"ema"` tells
    /// whether averaged generator weights were stored.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        let want = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&want))
    }

    fn put_adam(&mut self, prefix: &str, adam: &Adam) {
        let (t, m, v) = adam.state();
        self.tensors.insert(
            format!("{prefix}/t"),
            ArrayD::from_elem(IxDyn(&[1]), t as f64),
        );
        for (k, a) in m {
            self.tensors.insert(format!("{prefix}/m/{k}"), a.clone());
        }
        for (k, a) in v {
            self.tensors.insert(format!("{prefix}/v/{k}"), a.clone());
        }
    }

    /// Rebuild the optimizer recorded under `prefix` (step counter and
    /// moment estimates), so training can resume exactly where it stopped.
    pub fn get_adam(&self, prefix: &str, lr: f64) -> Result<Adam> {
        let t_key = format!("{prefix}/t");
        let t = self
            .tensors
            .get(&t_key)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {t_key}")))?[[0]]
            as u64;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let (mp, vp) = (format!("{prefix}/m/"), format!("{prefix}/v/"));
        for (k, a) in &self.tensors {
            if let Some(name) = k.strip_prefix(&mp) {
                m.insert(name.to_string(), a.clone());
            } else if let Some(name) = k.strip_prefix(&vp) {
                v.insert(name.to_string(), a.clone());
            }
        }
        let mut adam = Adam::new(lr);
        adam.restore(t, m, v);
        Ok(adam)
    }

    /// Serialize: magic, little-endian header length, JSON header, then the
    /// raw little-endian f64 payload of every tensor in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            kind: self.kind.clone(),
            epoch: self.epoch,
            net_digest: self.net_digest,
            flags: self.flags.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect(),
        };
        let head = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("encode header: {e}")))?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&head);
        for v in self.tensors.values() {
            for &x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let head_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_at = 16 + head_len;
        if bytes.len() < body_at {
            return Err(bad("truncated header"));
        }
        let header: CkptHeader = serde_json::from_slice(&bytes[16..body_at])
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        let mut at = body_at;
        for (name, shape) in &header.tensors {
            let len: usize = shape.iter().product();
            let end = at + 8 * len;
            if bytes.len() < end {
                return Err(bad("truncated tensor payload"));
            }
            let data: Vec<f64> = bytes[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name.clone(), arr);
            at = end;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            epoch: header.epoch,
            net_digest: header.net_digest,
            flags: header.flags,
            tensors,
        })
    }

    fn check_compatible(&self, cfg: &NetConfig, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {:?}",
                self.kind
            )));
        }
        if self.net_digest != cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with a different architecture \
                 (digest {:#x}, current {:#x})",
                self.net_digest,
                cfg.digest()
            )));
        }
        Ok(())
    }

    fn flag(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }
}

/// Rebuild the matcher from a checkpoint (weights and running statistics).
pub fn load_matcher(cfg: &NetConfig, ckpt: &Checkpoint) -> Result<Matcher> {
    ckpt.check_compatible(cfg, "matcher")?;
    let mut m = Matcher::new(cfg, &mut rng_stream(0, SALT_MATCHER_INIT))?;
    ckpt.get_params("matcher", &mut m.params)?;
    Ok(m)
}

fn matcher_checkpoint(cfg: &NetConfig, m: &Matcher, adam: &Adam, epoch: usize) -> Checkpoint {
    let mut c = Checkpoint::new("matcher", epoch, cfg);
    c.put_params("matcher", &m.params);
    c.put_adam("adam", adam);
    c
}

// ----- batches --------------------------------------------------------------

/// One training batch, everything `[B,·,H,W]`.
pub(crate) struct Batch {
    pub person: ArrayD<f64>,
    pub seg: ArrayD<f64>,
    /// Clothing region on the body.
    pub clothing: ArrayD<f64>,
    /// Body-area mask for the matcher's appearance terms.
    pub body: ArrayD<f64>,
    /// Target garment (own garment unless the dataset pairing says else).
    pub garment: ArrayD<f64>,
    /// Support of the target garment in its catalog image.
    pub garment_mask: ArrayD<f64>,
}

pub(crate) fn make_batch(
    cfg: &NetConfig,
    ds: &Dataset,
    idxs: &[usize],
    use_pairing: bool,
) -> Result<Batch> {
    assert!(!idxs.is_empty(), "empty batch");
    let mut person = Vec::new();
    let mut seg = Vec::new();
    let mut clothing = Vec::new();
    let mut body = Vec::new();
    let mut garment = Vec::new();
    let mut garment_mask = Vec::new();
    for &i in idxs {
        let s = &ds.samples[i];
        let t = if use_pairing { ds.target_of(i) } else { s };
        if s.person.shape() != [3, cfg.height, cfg.width] {
            return Err(Error::Shape(format!(
                "sample {} is {:?}, the configuration wants [3, {}, {}]",
                s.id,
                s.person.shape(),
                cfg.height,
                cfg.width
            )));
        }
        if s.seg.shape()[0] != cfg.seg_classes {
            return Err(Error::Shape(format!(
                "sample {} has {} segmentation channels, the configuration wants {}",
                s.id,
                s.seg.shape()[0],
                cfg.seg_classes
            )));
        }
        let (m_b, m_c, _) = derive_masks(s, &cfg.torso_channels)?;
        person.push(s.person.clone());
        seg.push(s.seg.clone());
        clothing.push(m_c);
        body.push(m_b);
        garment.push(t.garment.clone());
        garment_mask.push(t.garment_mask.clone());
    }
    let stack = |items: &[ArrayD<f64>]| -> ArrayD<f64> {
        let views: Vec<_> = items.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &views).expect("uniform sample shapes")
    };
    Ok(Batch {
        person: stack(&person),
        seg: stack(&seg),
        clothing: stack(&clothing),
        body: stack(&body),
        garment: stack(&garment),
        garment_mask: stack(&garment_mask),
    })
}

// ----- shared loop plumbing --------------------------------------------------

/// A finished stage: the resulting archive plus per-epoch component means.
/// `epoch_means[0]` is a pre-training evaluation pass (no updates);
/// `epoch_means[e]` for `e >= 1` averages the steps of training epoch `e`.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub epoch_means: Vec<BTreeMap<String, f64>>,
}

struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn new() -> Self {
        RunLog { lines: Vec::new() }
    }

    fn step(&mut self, epoch: usize, step: usize, comps: &BTreeMap<String, f64>) {
        let mut line = format!("epoch={epoch} step={step}");
        for (k, v) in comps {
            line.push_str(&format!(" {k}={v:.6}"));
        }
        self.lines.push(line);
    }

    fn epoch_summary(&mut self, epoch: usize, means: &BTreeMap<String, f64>) {
        let mut line = format!("epoch={epoch} summary");
        for (k, v) in means {
            line.push_str(&format!(" {k}_mean={v:.6}"));
        }
        self.lines.push(line);
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.lines.join("\n") + "\n")?;
        Ok(())
    }
}

fn mean_of(steps: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in steps {
        for (k, v) in s {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

fn ensure_finite(comps: &BTreeMap<String, f64>, stage: &str) -> Result<()> {
    for (k, v) in comps {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{stage}: loss component {k} became {v}"
            )));
        }
    }
    Ok(())
}


/// Per-layer weights for the matcher's feature loss at any extractor
/// depth: the deepest layer weighs 1 and each shallower layer halves,
/// matching the five-layer defaults in the matcher module.
fn feature_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 / (1u64 << (n - 1 - i)) as f64).collect()
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    permutation(&mut rng_stream(seed, SALT_ORDER ^ epoch as u64), n)
}

fn prepare_out_dir(out: &Path, run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), run.to_toml_string())?;
    Ok(())
}

// ----- stage 1: geometric matcher --------------------------------------------

/// One matcher pass over a batch.  Returns the loss components; when
/// `update` is set, also applies an optimizer step and commits statistics.
fn matcher_pass(
    _cfg: &NetConfig,
    tc: &TrainConfig,
    fx: &FeatureExtractor,
    matcher: &mut Matcher,
    adam: &mut Adam,
    batch: &Batch,
    update: bool,
) -> Result<BTreeMap<String, f64>> {
    let tape = Tape::new();
    let (comps, pending) = {
        let s = Session::with_modes(&tape, &matcher.params, update, true);
        let garment = tape.constant(batch.garment.clone());
        let garment_mask = tape.constant(batch.garment_mask.clone());
        let seg = tape.constant(batch.seg.clone());
        let person = tape.constant(batch.person.clone());
        let clothing = tape.constant(batch.clothing.clone());
        let body = tape.constant(batch.body.clone());

        let out = matcher.forward(&s, garment, garment_mask, seg);
        let l_shp = loss_shape(&tape, out.warped_mask, clothing);
        let l_app = loss_appearance(&tape, out.warped_garment, person, body);
        let l_vgg = loss_features(
            &tape,
            fx,
            out.warped_garment,
            person,
            body,
            &feature_weights(fx.num_layers()),
        );
        let (total, report) = matcher_objective(&tape, l_shp, l_app, l_vgg, &tc.matcher_weights());

        let comps: BTreeMap<String, f64> = [
            ("l_shp".to_string(), report.shp),
            ("l_app".to_string(), report.app),
            ("l_vgg".to_string(), report.vgg),
            ("l_total".to_string(), report.total),
        ]
        .into_iter()
        .collect();

        let pending = if update {
            let mut store = tape.backward(total);
            Some((s.grads(&mut store), s.take_stats()))
        } else {
            None
        };
        (comps, pending)
    };
    ensure_finite(&comps, "matcher")?;
    if let Some((grads, stats)) = pending {
        adam.step(&mut matcher.params, &grads);
        matcher.params.commit_stats(stats, BN_MOMENTUM);
    }
    Ok(comps)
}

/// Train the geometric matcher on paired data and write its artifacts.
pub fn train_bpgm(
    cfg: &NetConfig,
    tc: &TrainConfig,
    data: &Dataset,
    out: &Path,
) -> Result<TrainRun> {
    let cfg = cfg.clone().validated()?;
    let tc = tc.clone().validated()?;
    prepare_out_dir(out, &RunConfig { net: cfg.clone(), train: tc.clone() })?;

    let fx = FeatureExtractor::new(&cfg);
    let mut matcher = Matcher::new(&cfg, &mut rng_stream(tc.seed, SALT_MATCHER_INIT))?;
    let mut adam = Adam::new(tc.lr_bpgm);

    let n = data.len();
    let mut log = RunLog::new();
    let mut epoch_means = Vec::new();

    for epoch in 0..=tc.epochs_bpgm {
        let update = epoch > 0;
        let order = if update {
            epoch_order(tc.seed, epoch, n)
        } else {
            (0..n).collect()
        };
        let mut steps = Vec::new();
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = make_batch(&cfg, data, chunk, false)?;
            let comps = matcher_pass(&cfg, &tc, &fx, &mut matcher, &mut adam, &batch, update)?;
            log.step(epoch, step, &comps);
            steps.push(comps);
        }
        let means = mean_of(&steps);
        log.epoch_summary(epoch, &means);
        epoch_means.push(means);
    }

    let checkpoint = matcher_checkpoint(&cfg, &matcher, &adam, tc.epochs_bpgm);
    checkpoint.save(&out.join(format!("ckpt_{}.ckpt", tc.epochs_bpgm)))?;
    log.write(&out.join("losses.log"))?;
    Ok(TrainRun {
        checkpoint,
        epoch_means,
    })
}

/// Per-sample shape losses of the trained warp next to the identity warp
/// (no warping at all), for measuring whether warping actually helps.
pub fn matcher_shape_losses(
    cfg: &NetConfig,
    matcher: &Matcher,
    data: &Dataset,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for i in 0..data.len() {
        let batch = make_batch(cfg, data, &[i], false)?;
        let tape = Tape::new();
        let s = Session::eval(&tape, &matcher.params);
        let garment = tape.constant(batch.garment.clone());
        let garment_mask = tape.constant(batch.garment_mask.clone());
        let seg = tape.constant(batch.seg.clone());
        let clothing = tape.constant(batch.clothing.clone());
        let fwd = matcher.forward(&s, garment, garment_mask, seg);
        let trained = tape.scalar_value(loss_shape(&tape, fwd.warped_mask, clothing));
        let identity = tape.scalar_value(loss_shape(&tape, garment_mask, clothing));
        out.push((trained, identity));
    }
    Ok(out)
}

// ----- stage 2: generator + critics ------------------------------------------

struct Critics {
    seg: SegCritic,
    mth: MatchCritic,
    ptc: PatchCritic,
    adam_seg: Adam,
    adam_mth: Adam,
    adam_ptc: Adam,
}

impl Critics {
    fn new(cfg: &NetConfig, tc: &TrainConfig) -> Result<Self> {
        Ok(Critics {
            seg: SegCritic::new(cfg, &mut rng_stream(tc.seed, SALT_DSEG_INIT))?,
            mth: MatchCritic::new(cfg, &mut rng_stream(tc.seed, SALT_DMTH_INIT))?,
            ptc: PatchCritic::new(cfg, &mut rng_stream(tc.seed, SALT_DPTC_INIT))?,
            adam_seg: Adam::new(tc.lr_d),
            adam_mth: Adam::new(tc.lr_d),
            adam_ptc: Adam::new(tc.lr_d),
        })
    }
}

/// Warp the batch's garments with a frozen matcher (running statistics),
/// or pass them through untouched when no matcher is in play.
fn warp_for_context(matcher: Option<&Matcher>, batch: &Batch) -> ArrayD<f64> {
    match matcher {
        Some(m) => {
            let tape = Tape::new();
            let s = Session::eval(&tape, &m.params);
            let garment = tape.constant(batch.garment.clone());
            let garment_mask = tape.constant(batch.garment_mask.clone());
            let seg = tape.constant(batch.seg.clone());
            let out = m.forward(&s, garment, garment_mask, seg);
            tape.value_owned(out.warped_garment)
        }
        None => batch.garment.clone(),
    }
}

/// One combined critic-then-generator pass over a batch.
#[allow(clippy::too_many_arguments)]
fn generator_pass(
    cfg: &NetConfig,
    tc: &TrainConfig,
    fx: &FeatureExtractor,
    generator: &mut Generator,
    ema: Option<&mut ParamSet>,
    adam_g: &mut Adam,
    critics: Option<&mut Critics>,
    matcher: Option<&Matcher>,
    batch: &Batch,
    update: bool,
) -> Result<BTreeMap<String, f64>> {
    let warped = warp_for_context(matcher, batch);
    let ic = build_image_context(
        cfg,
        &batch.seg,
        &batch.person,
        &batch.clothing,
        &batch.garment,
        &warped,
        BuildContext::MaskOutGarment,
    )?;

    let mut comps: BTreeMap<String, f64> = BTreeMap::new();
    let patches = patch_boxes(&batch.seg, &cfg.patch_channels, cfg.patch_size);

    // One generator forward; its value doubles as the critics' fake input.
    // Everything holding a borrow of a parameter set lives inside this
    // block; the optimizer steps on those sets happen after it closes.
    let tape = Tape::new();
    let g_pending = {
        let sg = Session::with_modes(&tape, &generator.params, update, true);
        let fake = generator.forward(&sg, &ic);
        let fake_val = tape.value_owned(fake);

        if let Some(cr) = critics {
            // Critic update on the detached fake.
            let d_pending = {
                let td = Tape::new();
                let real = td.constant(batch.person.clone());
                let fk = td.constant(fake_val.clone());
                let garment = td.constant(batch.garment.clone());
                let s_seg = Session::with_modes(&td, &cr.seg.params, update, true);
                let s_mth = Session::with_modes(&td, &cr.mth.params, update, true);
                let s_ptc = Session::with_modes(&td, &cr.ptc.params, update, true);

                let l_dseg = seg_critic_loss(
                    &td,
                    cr.seg.forward(&s_seg, real),
                    &batch.seg,
                    cr.seg.forward(&s_seg, fk),
                );
                let l_dmth = bce_critic_loss(
                    &td,
                    cr.mth.forward(&s_mth, real, garment),
                    cr.mth.forward(&s_mth, fk, garment),
                );
                let mut total_d = td.add(l_dseg, l_dmth);
                let l_dptc = if patches.is_empty() {
                    0.0
                } else {
                    let rp = td.extract_patches(real, &patches.boxes, cfg.patch_size);
                    let fp = td.extract_patches(fk, &patches.boxes, cfg.patch_size);
                    let l =
                        bce_critic_loss(&td, cr.ptc.forward(&s_ptc, rp), cr.ptc.forward(&s_ptc, fp));
                    total_d = td.add(total_d, l);
                    td.scalar_value(l)
                };
                comps.insert("l_d_seg".into(), td.scalar_value(l_dseg));
                comps.insert("l_d_mth".into(), td.scalar_value(l_dmth));
                comps.insert("l_d_ptc".into(), l_dptc);
                comps.insert("l_d_total".into(), td.scalar_value(total_d));

                if update {
                    let mut store = td.backward(total_d);
                    Some([
                        (s_seg.grads(&mut store), s_seg.take_stats()),
                        (s_mth.grads(&mut store), s_mth.take_stats()),
                        (s_ptc.grads(&mut store), s_ptc.take_stats()),
                    ])
                } else {
                    None
                }
            };
            if let Some([dseg, dmth, dptc]) = d_pending {
                cr.adam_seg.step(&mut cr.seg.params, &dseg.0);
                cr.seg.params.commit_stats(dseg.1, BN_MOMENTUM);
                cr.adam_mth.step(&mut cr.mth.params, &dmth.0);
                cr.mth.params.commit_stats(dmth.1, BN_MOMENTUM);
                cr.adam_ptc.step(&mut cr.ptc.params, &dptc.0);
                cr.ptc.params.commit_stats(dptc.1, BN_MOMENTUM);
            }

            // Generator objective against the updated critics, on the
            // original tape so gradients flow back to the generator.
            let person_v = tape.constant(batch.person.clone());
            let garment_v = tape.constant(batch.garment.clone());
            let l_per = perceptual_loss(&tape, fx, fake, person_v, &vec![1.0; fx.num_layers()]);
            let s_seg_g = Session::with_modes(&tape, &cr.seg.params, false, true);
            let s_mth_g = Session::with_modes(&tape, &cr.mth.params, false, true);
            let s_ptc_g = Session::with_modes(&tape, &cr.ptc.params, false, true);
            let l_gseg = seg_generator_loss(&tape, cr.seg.forward(&s_seg_g, fake), &batch.seg);
            let l_gmth = bce_generator_loss(&tape, cr.mth.forward(&s_mth_g, fake, garment_v));
            let mut total_g = tape.add(
                tape.mul_scalar(l_per, tc.w_perceptual),
                tape.add(
                    tape.mul_scalar(l_gseg, tc.w_seg),
                    tape.mul_scalar(l_gmth, tc.w_match),
                ),
            );
            let l_gptc = if patches.is_empty() {
                0.0
            } else {
                let fp = tape.extract_patches(fake, &patches.boxes, cfg.patch_size);
                let l = bce_generator_loss(&tape, cr.ptc.forward(&s_ptc_g, fp));
                total_g = tape.add(total_g, tape.mul_scalar(l, tc.w_patch));
                tape.scalar_value(l)
            };
            comps.insert("l_per".into(), tape.scalar_value(l_per));
            comps.insert("l_g_seg".into(), tape.scalar_value(l_gseg));
            comps.insert("l_g_mth".into(), tape.scalar_value(l_gmth));
            comps.insert("l_g_ptc".into(), l_gptc);
            comps.insert("l_g_total".into(), tape.scalar_value(total_g));

            if update {
                let mut store = tape.backward(total_g);
                Some((sg.grads(&mut store), sg.take_stats()))
            } else {
                None
            }
        } else {
            // Perceptual objective alone.
            let person_v = tape.constant(batch.person.clone());
            let l_per = perceptual_loss(&tape, fx, fake, person_v, &vec![1.0; fx.num_layers()]);
            let total_g = tape.mul_scalar(l_per, tc.w_perceptual);
            comps.insert("l_per".into(), tape.scalar_value(l_per));
            comps.insert("l_g_total".into(), tape.scalar_value(total_g));
            if update {
                let mut store = tape.backward(total_g);
                Some((sg.grads(&mut store), sg.take_stats()))
            } else {
                None
            }
        }
    };

    ensure_finite(&comps, "generator")?;
    if let Some((grads, stats)) = g_pending {
        adam_g.step(&mut generator.params, &grads);
        generator.params.commit_stats(stats, BN_MOMENTUM);
        if let Some(shadow) = ema {
            shadow.ema_update(&generator.params, tc.ema_decay);
        }
    }
    Ok(comps)
}

/// Train the generator (and, unless ablated, its critics) on top of a
/// frozen matcher checkpoint.
pub fn train_generator(
    cfg: &NetConfig,
    tc: &TrainConfig,
    data: &Dataset,
    bpgm: Option<&Checkpoint>,
    out: &Path,
) -> Result<TrainRun> {
    let cfg = cfg.clone().validated()?;
    let tc = tc.clone().validated()?;
    prepare_out_dir(out, &RunConfig { net: cfg.clone(), train: tc.clone() })?;

    let matcher = if tc.no_bpgm {
        None
    } else {
        let ckpt = bpgm.ok_or_else(|| {
            Error::Config("generator training needs a matcher checkpoint (or no_bpgm)".into())
        })?;
        Some(load_matcher(&cfg, ckpt)?)
    };

    let fx = FeatureExtractor::new(&cfg);
    let mut generator =
        Generator::with_modulation(&cfg, &mut rng_stream(tc.seed, SALT_GEN_INIT), !tc.no_can)?;
    let mut ema = if tc.no_ema {
        None
    } else {
        Some(generator.params.clone())
    };
    let mut adam_g = Adam::new(tc.lr_g);
    let mut critics = if tc.no_discriminators {
        None
    } else {
        Some(Critics::new(&cfg, &tc)?)
    };

    let n = data.len();
    let mut log = RunLog::new();
    let mut epoch_means = Vec::new();

    for epoch in 0..=tc.epochs_g {
        let update = epoch > 0;
        let order = if update {
            epoch_order(tc.seed, epoch, n)
        } else {
            (0..n).collect()
        };
        let mut steps = Vec::new();
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = make_batch(&cfg, data, chunk, false)?;
            let comps = generator_pass(
                &cfg,
                &tc,
                &fx,
                &mut generator,
                ema.as_mut(),
                &mut adam_g,
                critics.as_mut(),
                matcher.as_ref(),
                &batch,
                update,
            )?;
            log.step(epoch, step, &comps);
            steps.push(comps);
        }
        let means = mean_of(&steps);
        log.epoch_summary(epoch, &means);
        epoch_means.push(means);
    }

    let mut checkpoint = Checkpoint::new("generator", tc.epochs_g, &cfg);
    for (name, on) in [
        ("no_can", tc.no_can),
        ("no_bpgm", tc.no_bpgm),
        ("no_discriminators", tc.no_discriminators),
        ("no_ema", tc.no_ema),
    ] {
        checkpoint.flags.insert(name.to_string(), on);
    }
    checkpoint.put_params("gen", &generator.params);
    checkpoint.put_adam("adam_g", &adam_g);
    if let Some(shadow) = &ema {
        checkpoint.put_params("ema", shadow);
    }
    if let Some(m) = &matcher {
        checkpoint.put_params("matcher", &m.params);
    }
    if let Some(cr) = &critics {
        checkpoint.put_params("dseg", &cr.seg.params);
        checkpoint.put_params("dmth", &cr.mth.params);
        checkpoint.put_params("dptc", &cr.ptc.params);
        checkpoint.put_adam("adam_dseg", &cr.adam_seg);
        checkpoint.put_adam("adam_dmth", &cr.adam_mth);
        checkpoint.put_adam("adam_dptc", &cr.adam_ptc);
    }
    checkpoint.save(&out.join(format!("ckpt_{}.ckpt", tc.epochs_g)))?;
    log.write(&out.join("losses.log"))?;
    Ok(TrainRun {
        checkpoint,
        epoch_means,
    })
}

// ----- inference --------------------------------------------------------------

/// A generator checkpoint rebuilt into runnable networks.
pub struct LoadedPipeline {
    pub generator: Generator,
    pub ema: Option<ParamSet>,
    pub matcher: Option<Matcher>,
    pub flags: BTreeMap<String, bool>,
}

/// Rebuild every network stored in a generator checkpoint.
pub fn load_pipeline(cfg: &NetConfig, ckpt: &Checkpoint) -> Result<LoadedPipeline> {
    ckpt.check_compatible(cfg, "generator")?;
    let mut generator = Generator::with_modulation(
        cfg,
        &mut rng_stream(0, SALT_GEN_INIT),
        !ckpt.flag("no_can"),
    )?;
    ckpt.get_params("gen", &mut generator.params)?;
    let ema = if ckpt.has_prefix("ema") {
        let mut shadow = generator.params.clone();
        ckpt.get_params("ema", &mut shadow)?;
        Some(shadow)
    } else {
        None
    };
    let matcher = if ckpt.flag("no_bpgm") {
        None
    } else {
        let mut m = Matcher::new(cfg, &mut rng_stream(0, SALT_MATCHER_INIT))?;
        ckpt.get_params("matcher", &mut m.params)?;
        Some(m)
    };
    Ok(LoadedPipeline {
        generator,
        ema,
        matcher,
        flags: ckpt.flags.clone(),
    })
}

impl LoadedPipeline {
    /// Dress `person` in `garment`.  All inputs `[B,·,H,W]`; returns the
    /// generated images and the warped garments, both `[B,3,H,W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn infer(
        &self,
        cfg: &NetConfig,
        person: &ArrayD<f64>,
        seg: &ArrayD<f64>,
        clothing_mask: &ArrayD<f64>,
        garment: &ArrayD<f64>,
        garment_mask: &ArrayD<f64>,
        use_ema: bool,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let params = if use_ema {
            self.ema.as_ref().ok_or_else(|| {
                Error::Checkpoint("checkpoint holds no averaged weights".into())
            })?
        } else {
            &self.generator.params
        };
        let warped = match &self.matcher {
            Some(m) => {
                let tape = Tape::new();
                let s = Session::eval(&tape, &m.params);
                let out = m.forward(
                    &s,
                    tape.constant(garment.clone()),
                    tape.constant(garment_mask.clone()),
                    tape.constant(seg.clone()),
                );
                tape.value_owned(out.warped_garment)
            }
            None => garment.clone(),
        };
        let ic = build_image_context(
            cfg,
            seg,
            person,
            clothing_mask,
            garment,
            &warped,
            BuildContext::MaskOutGarment,
        )?;
        let tape = Tape::new();
        let s = Session::eval(&tape, params);
        let fake = self.generator.forward(&s, &ic);
        Ok((tape.value_owned(fake), warped))
    }

    /// Convenience wrapper over the dataset pairing: dresses sample `i` in
    /// the garment its pairing assigns.
    pub fn infer_index(
        &self,
        cfg: &NetConfig,
        ds: &Dataset,
        i: usize,
        use_ema: bool,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let batch = make_batch(cfg, ds, &[i], true)?;
        self.infer(
            cfg,
            &batch.person,
            &batch.seg,
            &batch.clothing,
            &batch.garment,
            &batch.garment_mask,
            use_ema,
        )
    }
}

/// Generate a try-on image for every sample (following the dataset's
/// pairing) and score the set against the real images.
pub fn evaluate_testset(
    cfg: &NetConfig,
    ckpt: &Checkpoint,
    data: &Dataset,
    protocol: Protocol,
    seed: u64,
    use_ema: bool,
) -> Result<MetricReport> {
    let pipeline = load_pipeline(cfg, ckpt)?;
    let n = data.len();
    let mut generated = ArrayD::<f64>::zeros(IxDyn(&[n, 3, cfg.height, cfg.width]));
    let mut reference = ArrayD::<f64>::zeros(IxDyn(&[n, 3, cfg.height, cfg.width]));
    let idxs: Vec<usize> = (0..n).collect();
    for chunk in idxs.chunks(8) {
        let batch = make_batch(cfg, data, chunk, true)?;
        let (fake, _) = pipeline.infer(
            cfg,
            &batch.person,
            &batch.seg,
            &batch.clothing,
            &batch.garment,
            &batch.garment_mask,
            use_ema,
        )?;
        for (bi, &i) in chunk.iter().enumerate() {
            generated
                .index_axis_mut(Axis(0), i)
                .assign(&fake.index_axis(Axis(0), bi));
            reference
                .index_axis_mut(Axis(0), i)
                .assign(&batch.person.index_axis(Axis(0), bi));
        }
    }
    let fx = FeatureExtractor::new(cfg);
    evaluate_images(&fx, &generated, &reference, protocol, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, load_dataset, Pairing, ToySpec};
    use tempfile::TempDir;

    /// Small architecture on 32x24 images with the standard 25-channel
    /// segmentation, so it can train on down-scaled procedural data.
    fn tiny_cfg() -> NetConfig {
        NetConfig {
            height: 32,
            width: 24,
            seg_classes: 25,
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
            patch_channels: vec![4, 5],
        }
        .validated()
        .unwrap()
    }

    fn tiny_data(n_train: usize, n_test: usize) -> (TempDir, Dataset) {
        let spec = ToySpec {
            height: 32,
            width: 24,
            n_train,
            n_test,
            ..ToySpec::default()
        };
        let dir = TempDir::new().unwrap();
        generate_toy_dataset(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path(), "train", Pairing::Paired, 0).unwrap();
        (dir, ds)
    }

    fn fast_tc() -> TrainConfig {
        TrainConfig {
            lr_bpgm: 1e-3,
            lr_g: 2e-4,
            lr_d: 8e-4,
            epochs_bpgm: 2,
            epochs_g: 1,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_hold_and_validation_rejects_nonsense() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_bpgm, 1e-4);
        assert_eq!(tc.lr_g, 1e-4);
        assert_eq!(tc.lr_d, 4e-4);
        assert_eq!(tc.w_features, 0.1);
        assert_eq!(tc.w_perceptual, 10.0);
        assert_eq!(tc.ema_decay, 0.9999);
        assert_eq!((tc.epochs_bpgm, tc.epochs_g), (30, 100));
        assert!(tc.clone().validated().is_ok());
        for broken in [
            TrainConfig { lr_g: 0.0, ..tc.clone() },
            TrainConfig { lr_d: -1.0, ..tc.clone() },
            TrainConfig { ema_decay: 1.0, ..tc.clone() },
            TrainConfig { batch_size: 0, ..tc.clone() },
            TrainConfig { epochs_bpgm: 0, ..tc.clone() },
        ] {
            assert!(matches!(broken.validated(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn run_config_reads_partial_toml_and_round_trips() {
        let run = RunConfig::from_toml_str("[train]\nlr_g = 0.002\n").unwrap();
        assert_eq!(run.train.lr_g, 0.002);
        assert_eq!(run.train.lr_d, 4e-4, "unset fields keep their defaults");
        assert_eq!(run.net, NetConfig::toy(), "missing net section means the toy preset");
        let text = run.to_toml_string();
        let again = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(again, run);
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nlr_g = \"fast\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_stable() {
        let cfg = tiny_cfg();
        let matcher = Matcher::new(&cfg, &mut rng_stream(3, SALT_MATCHER_INIT)).unwrap();
        let adam = Adam::new(1e-4);
        let ckpt = matcher_checkpoint(&cfg, &matcher, &adam, 5);
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.epoch, 5);
        assert_eq!(loaded.kind, "matcher");
        loaded.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "save -> load -> save must reproduce the file byte for byte"
        );

        // Wrong architecture is refused.
        let other = NetConfig { enc_width: 8, ..tiny_cfg() };
        assert!(matches!(
            load_matcher(&other, &loaded),
            Err(Error::Checkpoint(_))
        ));
        // Corruption is refused.
        let mut bytes = std::fs::read(&p1).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p2), Err(Error::Checkpoint(_))));
        std::fs::write(&p2, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&p2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn matcher_smoke_run_reduces_its_objective() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(8, 1);
        let out = TempDir::new().unwrap();
        let run = train_bpgm(&cfg, &fast_tc(), &ds, out.path()).unwrap();
        assert_eq!(run.epoch_means.len(), 3, "eval pass + two epochs");
        let first = run.epoch_means[0]["l_total"];
        let last = run.epoch_means.last().unwrap()["l_total"];
        assert!(
            last < first,
            "objective should fall below the pre-training value: {first} -> {last}"
        );
        assert!(out.path().join("ckpt_2.ckpt").is_file());
        assert!(out.path().join("config.snapshot").is_file());
        let log = std::fs::read_to_string(out.path().join("losses.log")).unwrap();
        assert!(log.lines().any(|l| l.starts_with("epoch=1 step=0 ")));
        assert!(log.contains("l_shp="));
    }

    #[test]
    fn zero_loss_weights_leave_the_matcher_untouched() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(4, 1);
        let tc = TrainConfig {
            w_shape: 0.0,
            w_appearance: 0.0,
            w_features: 0.0,
            epochs_bpgm: 1,
            ..fast_tc()
        };
        let out = TempDir::new().unwrap();
        let fresh = Matcher::new(&cfg, &mut rng_stream(tc.seed, SALT_MATCHER_INIT)).unwrap();
        let run = train_bpgm(&cfg, &tc, &ds, out.path()).unwrap();
        let trained = load_matcher(&cfg, &run.checkpoint).unwrap();
        for (name, before) in &fresh.params.params {
            let after = trained.params.param(name);
            assert_eq!(
                before, after,
                "{name} moved despite an all-zero objective"
            );
        }
    }

    #[test]
    fn matcher_training_resumes_bitwise_from_a_checkpoint() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(4, 1);
        let tc = TrainConfig { epochs_bpgm: 1, ..fast_tc() };
        let out = TempDir::new().unwrap();
        let run = train_bpgm(&cfg, &tc, &ds, out.path()).unwrap();

        // Restore nets and optimizer through a disk round trip.
        let path = out.path().join("ckpt_1.ckpt");
        let loaded = Checkpoint::load(&path).unwrap();
        let mut m1 = load_matcher(&cfg, &run.checkpoint).unwrap();
        let mut a1 = run.checkpoint.get_adam("adam", tc.lr_bpgm).unwrap();
        let mut m2 = load_matcher(&cfg, &loaded).unwrap();
        let mut a2 = loaded.get_adam("adam", tc.lr_bpgm).unwrap();

        let fx = FeatureExtractor::new(&cfg);
        let batch = make_batch(&cfg, &ds, &[0, 1, 2, 3], false).unwrap();
        let c1 = matcher_pass(&cfg, &tc, &fx, &mut m1, &mut a1, &batch, true).unwrap();
        let c2 = matcher_pass(&cfg, &tc, &fx, &mut m2, &mut a2, &batch, true).unwrap();
        assert_eq!(c1, c2, "one more identical step must give identical losses");
        for (name, p) in &m1.params.params {
            assert_eq!(p, m2.params.param(name), "{name} diverged after resume");
        }
    }

    #[test]
    fn generator_smoke_trains_with_critics_and_checkpoints_everything() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(4, 1);
        let tc = fast_tc();
        let out_m = TempDir::new().unwrap();
        let bpgm = train_bpgm(&cfg, &TrainConfig { epochs_bpgm: 1, ..tc.clone() }, &ds, out_m.path())
            .unwrap()
            .checkpoint;
        let out_g = TempDir::new().unwrap();
        let run = train_generator(&cfg, &tc, &ds, Some(&bpgm), out_g.path()).unwrap();
        assert_eq!(run.epoch_means.len(), 2);
        for key in ["l_per", "l_g_seg", "l_g_mth", "l_d_seg", "l_d_mth", "l_g_total", "l_d_total"] {
            assert!(
                run.epoch_means[1].contains_key(key),
                "missing loss component {key}"
            );
            assert!(run.epoch_means[1][key].is_finite());
        }
        let ck = &run.checkpoint;
        assert_eq!(ck.kind, "generator");
        for prefix in ["gen", "ema", "matcher", "dseg", "dmth", "dptc"] {
            assert!(ck.has_prefix(prefix), "checkpoint lacks {prefix} tensors");
        }

        // Inference from the archive: deterministic, right shape, in range.
        let pipeline = load_pipeline(&cfg, ck).unwrap();
        let (img1, warped) = pipeline.infer_index(&cfg, &ds, 0, false).unwrap();
        let (img2, _) = pipeline.infer_index(&cfg, &ds, 0, false).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(img1.shape(), &[1, 3, cfg.height, cfg.width]);
        assert_eq!(warped.shape(), &[1, 3, cfg.height, cfg.width]);
        assert!(img1.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (img_ema, _) = pipeline.infer_index(&cfg, &ds, 0, true).unwrap();
        assert_eq!(img_ema.shape(), img1.shape());
    }

    #[test]
    fn ablations_strip_their_components_from_the_archive() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(2, 1);
        let tc = TrainConfig {
            no_can: true,
            no_bpgm: true,
            no_discriminators: true,
            no_ema: true,
            epochs_g: 1,
            batch_size: 2,
            ..fast_tc()
        };
        let out = TempDir::new().unwrap();
        let run = train_generator(&cfg, &tc, &ds, None, out.path()).unwrap();
        let ck = &run.checkpoint;
        assert!(ck.has_prefix("gen"));
        for prefix in ["ema", "matcher", "dseg", "dmth", "dptc"] {
            assert!(!ck.has_prefix(prefix), "{prefix} must be absent when ablated");
        }
        assert!(ck.flag("no_can") && ck.flag("no_bpgm"));
        assert!(
            !ck.tensors.keys().any(|k| k.contains("gamma_head")),
            "plain normalization must carry no modulation heads"
        );
        // Perceptual-only epochs log exactly the two generator components.
        assert!(run.epoch_means[1].contains_key("l_per"));
        assert!(!run.epoch_means[1].contains_key("l_d_total"));

        let pipeline = load_pipeline(&cfg, ck).unwrap();
        let (img, warped) = pipeline.infer_index(&cfg, &ds, 0, false).unwrap();
        assert_eq!(img.shape(), &[1, 3, cfg.height, cfg.width]);
        // Without a matcher the context takes the garment as it is.
        assert_eq!(warped, make_batch(&cfg, &ds, &[0], true).unwrap().garment);
        assert!(matches!(
            pipeline.infer_index(&cfg, &ds, 0, true),
            Err(Error::Checkpoint(_))
        ));

        // Requiring a matcher checkpoint without supplying one fails.
        let need_matcher = TrainConfig { no_bpgm: false, ..tc };
        assert!(matches!(
            train_generator(&cfg, &need_matcher, &ds, None, out.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn perceptual_only_step_matches_a_hand_built_oracle() {
        // With critics ablated, one training step must equal an
        // independently constructed perceptual-gradient Adam step.
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(2, 1);
        let tc = TrainConfig {
            no_bpgm: true,
            no_discriminators: true,
            no_ema: true,
            epochs_g: 1,
            batch_size: 2,
            ..fast_tc()
        };
        let out = TempDir::new().unwrap();
        let run = train_generator(&cfg, &tc, &ds, None, out.path()).unwrap();

        // Oracle: same init, same single batch, loss built by hand.
        let mut generator =
            Generator::with_modulation(&cfg, &mut rng_stream(tc.seed, SALT_GEN_INIT), true)
                .unwrap();
        let fx = FeatureExtractor::new(&cfg);
        let order = epoch_order(tc.seed, 1, ds.len());
        let batch = make_batch(&cfg, &ds, &order, false).unwrap();
        let ic = build_image_context(
            &cfg,
            &batch.seg,
            &batch.person,
            &batch.clothing,
            &batch.garment,
            &batch.garment,
            BuildContext::MaskOutGarment,
        )
        .unwrap();
        let tape = Tape::new();
        let (grads, stats) = {
            let s = Session::train(&tape, &generator.params);
            let fake = generator.forward(&s, &ic);
            let l_per = perceptual_loss(
                &tape,
                &fx,
                fake,
                tape.constant(batch.person.clone()),
                &vec![1.0; fx.num_layers()],
            );
            let total = tape.mul_scalar(l_per, tc.w_perceptual);
            let mut store = tape.backward(total);
            (s.grads(&mut store), s.take_stats())
        };
        let mut adam = Adam::new(tc.lr_g);
        adam.step(&mut generator.params, &grads);
        generator.params.commit_stats(stats, BN_MOMENTUM);

        let trained = load_pipeline(&cfg, &run.checkpoint).unwrap();
        for (name, p) in &generator.params.params {
            assert_eq!(
                p,
                trained.generator.params.param(name),
                "{name}: training step disagrees with the hand-built step"
            );
        }
    }

    #[test]
    fn evaluation_produces_finite_scores() {
        let cfg = tiny_cfg();
        let (_dir, ds) = tiny_data(3, 1);
        let tc = TrainConfig {
            no_bpgm: true,
            no_discriminators: true,
            no_ema: true,
            epochs_g: 1,
            batch_size: 3,
            ..fast_tc()
        };
        let out = TempDir::new().unwrap();
        let run = train_generator(&cfg, &tc, &ds, None, out.path()).unwrap();
        let report =
            evaluate_testset(&cfg, &run.checkpoint, &ds, Protocol::Paired, 0, false).unwrap();
        assert!(report.fid.is_finite() && report.fid >= 0.0);
        let lpips = report.lpips_mean.expect("paired protocol reports LPIPS");
        assert!(lpips.is_finite());
    }
}

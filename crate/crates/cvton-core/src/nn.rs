//! Named parameters, forward-pass sessions, layers, and the optimizer.
//!
//! Networks in this crate are *data*, not closures: a [`ParamSet`] maps
//! stable string names to tensors, and layer structs ([`Conv2d`],
//! [`BatchNorm2d`], [`Linear`]) remember only which names they own. A
//! forward pass opens a [`Session`] over one tape; the session turns each
//! named parameter into a tape variable exactly once — a trainable leaf in
//! a training session, a gradient-free constant otherwise — so frozen
//! networks cost nothing on the backward pass.
//!
//! Batch-norm running statistics live in the `ParamSet` as *buffers*,
//! separate from trainable parameters. Training sessions normalize with
//! batch statistics and record them; the caller commits them into the
//! buffers after the optimizer step via [`ParamSet::commit_stats`].
//! Evaluation sessions normalize with the stored buffers and record
//! nothing. (A gradient-free training-mode session is also legal — that is
//! how a just-updated discriminator judges the generator inside the same
//! step without its statistics drifting.)

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradStore, Tape, Var};
use crate::rng::randn;

/// Default momentum for running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default epsilon inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;

/// Named tensors of one network: trainable parameters plus buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub buffers: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a trainable parameter. Names are unique by construction —
    /// a duplicate means two layers claimed the same name, which is a bug.
    pub fn insert_param(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn insert_buffer(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.buffers.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate buffer name {name:?}");
    }

    pub fn param(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn buffer(&self, name: &str) -> &ArrayD<f64> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name:?}"))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Fold freshly recorded batch statistics into the running buffers:
    /// `buf ← (1−momentum)·buf + momentum·batch`.
    pub fn commit_stats(&mut self, stats: Vec<(String, ArrayD<f64>)>, momentum: f64) {
        for (name, batch) in stats {
            let buf = self
                .buffers
                .get_mut(&name)
                .unwrap_or_else(|| panic!("stats for unknown buffer {name:?}"));
            assert_eq!(buf.shape(), batch.shape(), "buffer {name:?} shape changed");
            buf.zip_mut_with(&batch, |b, &v| *b = (1.0 - momentum) * *b + momentum * v);
        }
    }

    /// Move every parameter toward `live`: `p ← decay·p + (1−decay)·live`.
    /// Buffers are copied verbatim — running statistics track the live
    /// network, only the weights are smoothed.
    /// Copy every value from `other` whose name also exists here, leaving
    /// names unique to either side untouched.  Lets two networks that share
    /// a naming scheme (e.g. a full model and an ablated variant) agree on
    /// their common weights regardless of initialization order.
    pub fn adopt(&mut self, other: &ParamSet) {
        for (dst, src) in [
            (&mut self.params, &other.params),
            (&mut self.buffers, &other.buffers),
        ] {
            for (name, value) in dst.iter_mut() {
                if let Some(v) = src.get(name) {
                    assert_eq!(
                        value.shape(),
                        v.shape(),
                        "adopt: shape mismatch for {name}"
                    );
                    value.assign(v);
                }
            }
        }
    }

    pub fn ema_update(&mut self, live: &ParamSet, decay: f64) {
        assert_eq!(
            self.params.len(),
            live.params.len(),
            "shadow and live networks disagree on parameter names"
        );
        for (name, p) in self.params.iter_mut() {
            let l = live.param(name);
            p.zip_mut_with(l, |s, &v| *s = decay * *s + (1.0 - decay) * v);
        }
        for (name, b) in self.buffers.iter_mut() {
            b.assign(live.buffer(name));
        }
    }
}

/// One forward pass of one network over one tape.
pub struct Session<'s> {
    pub tape: &'s Tape,
    params: &'s ParamSet,
    trainable: bool,
    train_mode: bool,
    vars: RefCell<BTreeMap<String, Var>>,
    stats: RefCell<Vec<(String, ArrayD<f64>)>>,
}

impl<'s> Session<'s> {
    /// Trainable leaves, batch-statistics normalization.
    pub fn train(tape: &'s Tape, params: &'s ParamSet) -> Self {
        Session::with_modes(tape, params, true, true)
    }

    /// Gradient-free constants, running-statistics normalization.
    pub fn eval(tape: &'s Tape, params: &'s ParamSet) -> Self {
        Session::with_modes(tape, params, false, false)
    }

    /// Explicit control over both axes: `trainable` decides leaf vs
    /// constant, `train_mode` decides batch vs running statistics.
    pub fn with_modes(
        tape: &'s Tape,
        params: &'s ParamSet,
        trainable: bool,
        train_mode: bool,
    ) -> Self {
        Session {
            tape,
            params,
            trainable,
            train_mode,
            vars: RefCell::new(BTreeMap::new()),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    /// The tape variable for a named parameter, created on first use.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let value = self.params.param(name).clone();
        let var = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    fn buffer(&self, name: &str) -> &ArrayD<f64> {
        self.params.buffer(name)
    }

    fn record_stat(&self, name: &str, value: ArrayD<f64>) {
        self.stats.borrow_mut().push((name.to_string(), value));
    }

    /// Batch statistics recorded during this pass, in forward order.
    /// Commit them with [`ParamSet::commit_stats`] after the step.
    pub fn take_stats(&self) -> Vec<(String, ArrayD<f64>)> {
        self.stats.replace(Vec::new())
    }

    /// Pull gradients out of a backward result, keyed by parameter name.
    pub fn grads(&self, store: &mut GradStore) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, &var) in self.vars.borrow().iter() {
            if let Some(g) = store.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// 2-d convolution layer; owns `<name>.weight [o,i,k,k]` and `<name>.bias [o]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-style initialization: weights ~ N(0, 2/(in·k²)), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * ksize * ksize) as f64).sqrt();
        let w = randn(rng, &[out_ch, in_ch, ksize, ksize]).mapv(|v| v * std);
        params.insert_param(&format!("{name}.weight"), w);
        params.insert_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            stride,
            pad,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        s.tape
            .conv2d(x, s.param(&self.weight), s.param(&self.bias), self.stride, self.pad)
    }

    /// All-zero initialization — for modulation heads that must start out
    /// inert (zero output) so the surrounding network begins at identity.
    pub fn init_zero(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        params: &mut ParamSet,
    ) -> Self {
        params.insert_param(
            &format!("{name}.weight"),
            ArrayD::zeros(IxDyn(&[out_ch, in_ch, ksize, ksize])),
        );
        params.insert_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])));
        Conv2d {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            stride,
            pad,
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: String,
    beta: String,
    rmean: String,
    rvar: String,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn init(name: &str, ch: usize, params: &mut ParamSet) -> Self {
        params.insert_param(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[ch])));
        params.insert_param(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[ch])));
        params.insert_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[ch])));
        params.insert_buffer(&format!("{name}.running_var"), ArrayD::ones(IxDyn(&[ch])));
        BatchNorm2d {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            rmean: format!("{name}.running_mean"),
            rvar: format!("{name}.running_var"),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let gamma = s.param(&self.gamma);
        let beta = s.param(&self.beta);
        if s.train_mode() {
            let (y, mean, var) = s.tape.batch_norm_train(x, gamma, beta, self.eps);
            s.record_stat(&self.rmean, mean);
            s.record_stat(&self.rvar, var);
            y
        } else {
            s.tape.batch_norm_eval(
                x,
                gamma,
                beta,
                s.buffer(&self.rmean),
                s.buffer(&self.rvar),
                self.eps,
            )
        }
    }
}

/// Fully connected layer; owns `<name>.weight [out,in]` and `<name>.bias [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn init(
        name: &str,
        in_f: usize,
        out_f: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        let w = randn(rng, &[out_f, in_f]).mapv(|v| v * std);
        params.insert_param(&format!("{name}.weight"), w);
        params.insert_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_f])));
        Linear {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    /// All-zero initialization — used for prediction heads that must start
    /// as the identity mapping (zero output = no warp).
    pub fn init_zero(name: &str, in_f: usize, out_f: usize, params: &mut ParamSet) -> Self {
        params.insert_param(&format!("{name}.weight"), ArrayD::zeros(IxDyn(&[out_f, in_f])));
        params.insert_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_f])));
        Linear {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        s.tape.linear(x, s.param(&self.weight), s.param(&self.bias))
    }
}

/// Adam with the slow-β₁ setting customary for adversarial training.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient entry are left
    /// untouched (their moments do not advance either).
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name:?}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Step counter and first/second moment maps, for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<String, ArrayD<f64>>, &BTreeMap<String, ArrayD<f64>>) {
        (self.t, &self.m, &self.v)
    }

    /// Restore a previously exported optimizer state.
    pub fn restore(
        &mut self,
        t: u64,
        m: BTreeMap<String, ArrayD<f64>>,
        v: BTreeMap<String, ArrayD<f64>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Finite-difference check of *parameter* gradients for a whole network.
///
/// The caller computes the loss and its analytic gradients once (however it
/// likes — tape, session, several networks chained); this helper then
/// perturbs sampled parameter scalars and compares central differences
/// against the supplied gradients. `loss_value` must be a deterministic
/// function of the parameter values. Parameters are selected by name filter;
/// up to `samples_per_param` scalars per parameter are drawn from `seed`.
/// `GradCheck::worst_at.0` indexes the selected names in sorted order.
pub fn param_gradcheck(
    params: &ParamSet,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    select: &dyn Fn(&str) -> bool,
    samples_per_param: usize,
    eps: f64,
    seed: u64,
    loss_value: &mut dyn FnMut(&ParamSet) -> f64,
) -> crate::autodiff::check::GradCheck {
    use crate::autodiff::check::{rel_err, GradCheck};
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst_at: (0, 0),
        worst_pair: (0.0, 0.0),
    };
    let names: Vec<String> = params
        .params
        .keys()
        .filter(|n| select(n))
        .cloned()
        .collect();
    assert!(!names.is_empty(), "parameter filter selected nothing");
    let mut work = params.clone();
    for (ni, name) in names.iter().enumerate() {
        let g = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no gradient reached parameter {name:?}"));
        let len = g.len();
        let elems: Vec<usize> = if len <= samples_per_param {
            (0..len).collect()
        } else {
            let mut rng = crate::rng::rng_stream(seed, ni as u64);
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_param {
                seen.insert(rand::Rng::random_range(&mut rng, 0..len));
            }
            seen.into_iter().collect()
        };
        for e in elems {
            let orig = work.params.get_mut(name).unwrap().as_slice_mut().unwrap()[e];
            work.params.get_mut(name).unwrap().as_slice_mut().unwrap()[e] = orig + eps;
            let f_plus = loss_value(&work);
            work.params.get_mut(name).unwrap().as_slice_mut().unwrap()[e] = orig - eps;
            let f_minus = loss_value(&work);
            work.params.get_mut(name).unwrap().as_slice_mut().unwrap()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = g.as_slice().unwrap()[e];
            let rel = rel_err(a, numeric);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst_at = (ni, e);
                out.worst_pair = (a, numeric);
            }
        }
    }
    out
}

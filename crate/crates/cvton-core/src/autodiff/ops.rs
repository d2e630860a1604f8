//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Conventions:
//! * Image tensors are `[batch, channels, height, width]`, row-major.
//! * Sampling grids are `[batch, out_h, out_w, 2]` with the last axis holding
//!   `(x, y)` in *pixel* coordinates: `(0, 0)` is the center of the top-left
//!   pixel, `x` counts columns. Pixel coordinates keep the identity warp
//!   bit-exact — integer positions are representable, whereas normalized
//!   [−1, 1] coordinates provably cannot round-trip every integer pixel of
//!   odd-length axes through `f64` (e.g. no double maps back to pixel 1 of an
//!   11-wide axis under `x·5 + 5`).
//! * Convolution uses im2col + GEMM; the column matrix is rebuilt during the
//!   backward pass instead of being captured, trading a little compute for a
//!   much smaller live tape.
//!
//! Each op captures only what its backward pass needs, and only when some
//! parent can actually receive a gradient.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Slice};

use super::{Tape, Var};

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected 4-d tensor, got shape {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

fn dims2(a: &ArrayD<f64>) -> (usize, usize) {
    assert_eq!(a.ndim(), 2, "expected 2-d tensor, got shape {:?}", a.shape());
    (a.shape()[0], a.shape()[1])
}

fn std_slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice()
        .expect("tensor must be in standard (row-major contiguous) layout")
}

fn scalar0(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Column matrix `[cin*kh*kw, b*ho*wo]` for im2col convolution.
fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (b, cin, h, w) = dims4(x);
    let xs = std_slice(x);
    let kk = cin * kh * kw;
    let n = b * ho * wo;
    let mut cols = Array2::<f64>::zeros((kk, n));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = (c * kh + ki) * kw + kj;
                for bi in 0..b {
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue; // zero padding: cols already zeroed
                        }
                        let dst = krow * n + (bi * ho + oh) * wo;
                        let src = ((bi * cin + c) * h + ih as usize) * w;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[dst + ow] = xs[src + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
fn col2im_add(
    dcols: &Array2<f64>,
    xshape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let (b, cin, h, w) = xshape;
    let n = b * ho * wo;
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, cin, h, w]));
    let dxs = dx.as_slice_mut().unwrap();
    let ds = dcols.as_slice().unwrap();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let krow = (c * kh + ki) * kw + kj;
                for bi in 0..b {
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = krow * n + (bi * ho + oh) * wo;
                        let dst = ((bi * cin + c) * h + ih as usize) * w;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dxs[dst + iw as usize] += ds[src + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    fn binary_prelude(&self, a: Var, b: Var) -> (bool, bool) {
        self.assert_owns(a);
        self.assert_owns(b);
        let nodes = self.nodes.borrow();
        (nodes[a.idx()].needs_grad, nodes[b.idx()].needs_grad)
    }

    // ----- elementwise arithmetic -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.binary_prelude(a, b);
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.idx()].value, &nodes[b.idx()].value);
            assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
            av + bv
        };
        self.push_op(out, na || nb, move |g| {
            let mut r = Vec::new();
            if na {
                r.push((a, g.clone()));
            }
            if nb {
                r.push((b, g.clone()));
            }
            r
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.binary_prelude(a, b);
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.idx()].value, &nodes[b.idx()].value);
            assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
            av - bv
        };
        self.push_op(out, na || nb, move |g| {
            let mut r = Vec::new();
            if na {
                r.push((a, g.clone()));
            }
            if nb {
                r.push((b, g.mapv(|v| -v)));
            }
            r
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.binary_prelude(a, b);
        let (out, a_for_b, b_for_a) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.idx()].value, &nodes[b.idx()].value);
            assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
            (
                av * bv,
                if nb { Some(av.clone()) } else { None },
                if na { Some(bv.clone()) } else { None },
            )
        };
        self.push_op(out, na || nb, move |g| {
            let mut r = Vec::new();
            if na {
                r.push((a, g * b_for_a.as_ref().unwrap()));
            }
            if nb {
                r.push((b, g * a_for_b.as_ref().unwrap()));
            }
            r
        })
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let na = self.needs_grad(a);
        let out = self.value(a).mapv(|v| v + s);
        self.push_op(out, na, move |g| vec![(a, g.clone())])
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let na = self.needs_grad(a);
        let out = self.value(a).mapv(|v| v * s);
        self.push_op(out, na, move |g| vec![(a, g.mapv(|v| v * s))])
    }

    // ----- unary nonlinearities ---------------------------------------------------

    pub fn relu(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, xv) = {
            let v = self.value(a);
            (v.mapv(|x| x.max(0.0)), if na { Some(v.clone()) } else { None })
        };
        self.push_op(out, na, move |g| {
            let x = xv.as_ref().unwrap();
            let mut dx = g.clone();
            dx.zip_mut_with(x, |gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![(a, dx)]
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let out = self.value(a).mapv(f64::tanh);
        let yv = if na { Some(out.clone()) } else { None };
        self.push_op(out, na, move |g| {
            let y = yv.as_ref().unwrap();
            let mut dx = g.clone();
            dx.zip_mut_with(y, |gv, &y| *gv *= 1.0 - y * y);
            vec![(a, dx)]
        })
    }

    /// `ln(1 + e^x)`, numerically stable at both tails.
    pub fn softplus(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, xv) = {
            let v = self.value(a);
            let out = v.mapv(|x| {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            });
            (out, if na { Some(v.clone()) } else { None })
        };
        self.push_op(out, na, move |g| {
            let x = xv.as_ref().unwrap();
            let mut dx = g.clone();
            dx.zip_mut_with(x, |gv, &x| {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                *gv *= s;
            });
            vec![(a, dx)]
        })
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, xv) = {
            let v = self.value(a);
            (v.mapv(f64::abs), if na { Some(v.clone()) } else { None })
        };
        self.push_op(out, na, move |g| {
            let x = xv.as_ref().unwrap();
            let mut dx = g.clone();
            dx.zip_mut_with(x, |gv, &x| {
                *gv *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![(a, dx)]
        })
    }

    /// `ln(max(x, floor))` — the standard guard for log-likelihood terms.
    /// Gradient is `1/x` above the floor and 0 in the clamped region.
    pub fn log_clamped(&self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "log floor must be positive");
        let na = self.needs_grad(a);
        let (out, xv) = {
            let v = self.value(a);
            (v.mapv(|x| x.max(floor).ln()), if na { Some(v.clone()) } else { None })
        };
        self.push_op(out, na, move |g| {
            let x = xv.as_ref().unwrap();
            let mut dx = g.clone();
            dx.zip_mut_with(x, |gv, &x| {
                *gv = if x > floor { *gv / x } else { 0.0 };
            });
            vec![(a, dx)]
        })
    }

    // ----- reductions ---------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, dim) = {
            let v = self.value(a);
            (scalar0(v.sum()), v.raw_dim())
        };
        self.push_op(out, na, move |g| vec![(a, ArrayD::from_elem(dim, g[[]]))])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, dim, len) = {
            let v = self.value(a);
            let len = v.len();
            assert!(len > 0, "mean_all of empty tensor");
            (scalar0(v.sum() / len as f64), v.raw_dim(), len)
        };
        self.push_op(out, na, move |g| {
            vec![(a, ArrayD::from_elem(dim, g[[]] / len as f64))]
        })
    }

    // ----- shape manipulation ---------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let na = self.needs_grad(a);
        let (out, old_shape) = {
            let v = self.value(a);
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>(),
                "reshape: cannot view {:?} as {:?}",
                v.shape(),
                shape
            );
            let flat = v.as_standard_layout().iter().copied().collect::<Vec<f64>>();
            (
                ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap(),
                v.shape().to_vec(),
            )
        };
        self.push_op(out, na, move |g| {
            let flat = std_slice(g).to_vec();
            vec![(a, ArrayD::from_shape_vec(IxDyn(&old_shape), flat).unwrap())]
        })
    }

    /// Concatenate along axis 1 (channels for images, features for matrices).
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let mut needs = false;
        let mut widths = Vec::with_capacity(parts.len());
        let mut flags = Vec::with_capacity(parts.len());
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts
                .iter()
                .map(|p| {
                    self.assert_owns(*p);
                    let node = &nodes[p.idx()];
                    needs |= node.needs_grad;
                    flags.push(node.needs_grad);
                    widths.push(node.value.shape()[1]);
                    node.value.view()
                })
                .collect();
            // `concatenate` may return a non-contiguous layout; every op
            // output in this module is kept standard so kernels can use flat
            // slices.
            ndarray::concatenate(Axis(1), &views)
                .expect("concat: incompatible shapes")
                .as_standard_layout()
                .into_owned()
        };
        let parts = parts.to_vec();
        self.push_op(out, needs, move |g| {
            let mut r = Vec::new();
            let mut start = 0;
            for (i, part) in parts.iter().enumerate() {
                let end = start + widths[i];
                if flags[i] {
                    let piece = g
                        .slice_axis(Axis(1), Slice::from(start..end))
                        .to_owned()
                        .as_standard_layout()
                        .into_owned();
                    r.push((*part, piece));
                }
                start = end;
            }
            r
        })
    }

    /// `[b, c, h, w] → [b, c]`, spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let (out, shape) = {
            let v = self.value(a);
            let (b, c, h, w) = dims4(&v);
            let xs = std_slice(&v);
            let mut out = Array2::<f64>::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    out[[bi, ci]] = xs[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
                }
            }
            (out.into_dyn(), (b, c, h, w))
        };
        self.push_op(out, na, move |g| {
            let (b, c, h, w) = shape;
            let gs = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let gv = gs[bi * c + ci] / (h * w) as f64;
                    let base = (bi * c + ci) * h * w;
                    for k in 0..h * w {
                        dxs[base + k] = gv;
                    }
                }
            }
            vec![(a, dx)]
        })
    }

    // ----- linear algebra ---------------------------------------------------------

    /// `x [b, f] · wᵀ [f, o] + bias [o] → [b, o]`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Var {
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = self.needs_grad(bias);
        let (out, xv, wv) = {
            let nodes = self.nodes.borrow();
            let xa = &nodes[x.idx()].value;
            let wa = &nodes[w.idx()].value;
            let ba = &nodes[bias.idx()].value;
            let (b, f) = dims2(xa);
            let (o, f2) = dims2(wa);
            assert_eq!(f, f2, "linear: feature dims disagree");
            assert_eq!(ba.shape(), [o], "linear: bias shape");
            let x2 = Array2::from_shape_vec((b, f), std_slice(xa).to_vec()).unwrap();
            let w2 = Array2::from_shape_vec((o, f), std_slice(wa).to_vec()).unwrap();
            let mut y = x2.dot(&w2.t());
            let bs = std_slice(ba);
            for mut row in y.rows_mut() {
                for (yy, bb) in row.iter_mut().zip(bs) {
                    *yy += bb;
                }
            }
            (
                y.into_dyn(),
                if nw { Some(x2) } else { None },
                if nx { Some(w2) } else { None },
            )
        };
        self.push_op(out, nx || nw || nb, move |g| {
            let (b, o) = dims2(g);
            let g2 = Array2::from_shape_vec((b, o), std_slice(g).to_vec()).unwrap();
            let mut r = Vec::new();
            if nx {
                r.push((x, g2.dot(wv.as_ref().unwrap()).into_dyn()));
            }
            if nw {
                r.push((w, g2.t().dot(xv.as_ref().unwrap()).into_dyn()));
            }
            if nb {
                r.push((bias, g2.sum_axis(Axis(0)).into_dyn()));
            }
            r
        })
    }

    /// Batched matrix product `[b, m, k] × [b, k, n] → [b, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.binary_prelude(a, b);
        let (out, av_cap, bv_cap) = {
            let nodes = self.nodes.borrow();
            let aa = &nodes[a.idx()].value;
            let bb = &nodes[b.idx()].value;
            assert_eq!(aa.ndim(), 3, "bmm lhs must be 3-d");
            assert_eq!(bb.ndim(), 3, "bmm rhs must be 3-d");
            let (nbatch, m, k) = (aa.shape()[0], aa.shape()[1], aa.shape()[2]);
            let (nbatch2, k2, n) = (bb.shape()[0], bb.shape()[1], bb.shape()[2]);
            assert_eq!(nbatch, nbatch2, "bmm: batch dims disagree");
            assert_eq!(k, k2, "bmm: inner dims disagree");
            let asl = std_slice(aa);
            let bsl = std_slice(bb);
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[nbatch, m, n]));
            for bi in 0..nbatch {
                let a2 = Array2::from_shape_vec((m, k), asl[bi * m * k..(bi + 1) * m * k].to_vec())
                    .unwrap();
                let b2 = Array2::from_shape_vec((k, n), bsl[bi * k * n..(bi + 1) * k * n].to_vec())
                    .unwrap();
                let y = a2.dot(&b2);
                out.as_slice_mut().unwrap()[bi * m * n..(bi + 1) * m * n]
                    .copy_from_slice(y.as_slice().unwrap());
            }
            (
                out,
                if nb { Some(aa.clone()) } else { None },
                if na { Some(bb.clone()) } else { None },
            )
        };
        self.push_op(out, na || nb, move |g| {
            let (nbatch, m, n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
            let gsl = std_slice(g);
            let mut r = Vec::new();
            if na {
                let bv = bv_cap.as_ref().unwrap();
                let k = bv.shape()[1];
                let bsl = std_slice(bv);
                let mut da = ArrayD::<f64>::zeros(IxDyn(&[nbatch, m, k]));
                for bi in 0..nbatch {
                    let g2 =
                        Array2::from_shape_vec((m, n), gsl[bi * m * n..(bi + 1) * m * n].to_vec())
                            .unwrap();
                    let b2 =
                        Array2::from_shape_vec((k, n), bsl[bi * k * n..(bi + 1) * k * n].to_vec())
                            .unwrap();
                    let d = g2.dot(&b2.t());
                    da.as_slice_mut().unwrap()[bi * m * k..(bi + 1) * m * k]
                        .copy_from_slice(d.as_slice().unwrap());
                }
                r.push((a, da));
            }
            if nb {
                let av = av_cap.as_ref().unwrap();
                let k = av.shape()[2];
                let asl = std_slice(av);
                let mut db = ArrayD::<f64>::zeros(IxDyn(&[nbatch, k, n]));
                for bi in 0..nbatch {
                    let g2 =
                        Array2::from_shape_vec((m, n), gsl[bi * m * n..(bi + 1) * m * n].to_vec())
                            .unwrap();
                    let a2 =
                        Array2::from_shape_vec((m, k), asl[bi * m * k..(bi + 1) * m * k].to_vec())
                            .unwrap();
                    let d = a2.t().dot(&g2);
                    db.as_slice_mut().unwrap()[bi * k * n..(bi + 1) * k * n]
                        .copy_from_slice(d.as_slice().unwrap());
                }
                r.push((b, db));
            }
            r
        })
    }

    /// Swap the last two axes of a 3-d tensor: `[b, m, n] → [b, n, m]`.
    pub fn transpose_last2(&self, a: Var) -> Var {
        let na = self.needs_grad(a);
        let out = {
            let v = self.value(a);
            assert_eq!(v.ndim(), 3, "transpose_last2 expects [b, m, n]");
            let (nb, m, n) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let vs = std_slice(&v);
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[nb, n, m]));
            let os = out.as_slice_mut().unwrap();
            for bi in 0..nb {
                for i in 0..m {
                    for j in 0..n {
                        os[bi * m * n + j * m + i] = vs[bi * m * n + i * n + j];
                    }
                }
            }
            out
        };
        self.push_op(out, na, move |g| {
            let (nb, n, m) = (g.shape()[0], g.shape()[1], g.shape()[2]);
            let gs = std_slice(g);
            let mut da = ArrayD::<f64>::zeros(IxDyn(&[nb, m, n]));
            let ds = da.as_slice_mut().unwrap();
            for bi in 0..nb {
                for j in 0..n {
                    for i in 0..m {
                        ds[bi * m * n + i * n + j] = gs[bi * m * n + j * m + i];
                    }
                }
            }
            vec![(a, da)]
        })
    }

    /// 2-d convolution, `x [b, cin, h, w]`, `w [cout, cin, kh, kw]`, `bias [cout]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let nx = self.needs_grad(x);
        let nw = self.needs_grad(w);
        let nb = self.needs_grad(bias);
        let needs = nx || nw || nb;
        let (out, xv_cap, wv_cap, xshape, wshape, ho, wo) = {
            let nodes = self.nodes.borrow();
            let xa = &nodes[x.idx()].value;
            let wa = &nodes[w.idx()].value;
            let ba = &nodes[bias.idx()].value;
            let (b, cin, h, wd) = dims4(xa);
            let (cout, cin2, kh, kw) = dims4(wa);
            assert_eq!(cin, cin2, "conv2d: channel mismatch");
            assert_eq!(ba.shape(), [cout], "conv2d: bias shape");
            let ho = conv_out_dim(h, kh, stride, pad);
            let wo = conv_out_dim(wd, kw, stride, pad);
            let kk = cin * kh * kw;
            let n = b * ho * wo;
            let cols = im2col(xa, kh, kw, stride, pad, ho, wo);
            let wmat = Array2::from_shape_vec((cout, kk), std_slice(wa).to_vec()).unwrap();
            let y2 = wmat.dot(&cols); // [cout, n]
            let ys = y2.as_slice().unwrap();
            let bs = std_slice(ba);
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
            let os = out.as_slice_mut().unwrap();
            let spatial = ho * wo;
            for co in 0..cout {
                for bi in 0..b {
                    let src = co * n + bi * spatial;
                    let dst = (bi * cout + co) * spatial;
                    for s in 0..spatial {
                        os[dst + s] = ys[src + s] + bs[co];
                    }
                }
            }
            (
                out,
                if nx || nw { Some(xa.clone()) } else { None },
                if nx { Some(wmat) } else { None },
                (b, cin, h, wd),
                (cout, cin, kh, kw),
                ho,
                wo,
            )
        };
        self.push_op(out, needs, move |g| {
            let (b, _cin, _h, _w) = xshape;
            let (cout, cin, kh, kw) = wshape;
            let n = b * ho * wo;
            let spatial = ho * wo;
            let gs = std_slice(g);
            // Regroup g into [cout, n] to match the forward GEMM layout.
            let mut gmat = Array2::<f64>::zeros((cout, n));
            {
                let gm = gmat.as_slice_mut().unwrap();
                for bi in 0..b {
                    for co in 0..cout {
                        let src = (bi * cout + co) * spatial;
                        let dst = co * n + bi * spatial;
                        gm[dst..dst + spatial].copy_from_slice(&gs[src..src + spatial]);
                    }
                }
            }
            let mut r = Vec::new();
            if nb {
                let db = gmat.sum_axis(Axis(1));
                r.push((bias, db.into_dyn()));
            }
            if nw {
                let cols = im2col(xv_cap.as_ref().unwrap(), kh, kw, stride, pad, ho, wo);
                let dw = gmat.dot(&cols.t()); // [cout, kk]
                r.push((
                    w,
                    ArrayD::from_shape_vec(
                        IxDyn(&[cout, cin, kh, kw]),
                        dw.as_slice().unwrap().to_vec(),
                    )
                    .unwrap(),
                ));
            }
            if nx {
                let dcols = wv_cap.as_ref().unwrap().t().dot(&gmat); // [kk, n]
                r.push((x, col2im_add(&dcols, xshape, kh, kw, stride, pad, ho, wo)));
            }
            r
        })
    }

    // ----- normalization ---------------------------------------------------------

    /// Batch normalization in training mode: normalizes with the *batch*
    /// statistics and returns them so the caller can update running buffers.
    /// Variance is the biased (population) estimate.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, ArrayD<f64>, ArrayD<f64>) {
        let nx = self.needs_grad(x);
        let ng = self.needs_grad(gamma);
        let nb = self.needs_grad(beta);
        let needs = nx || ng || nb;
        let (out, xhat_cap, inv_std, gamma_v, mean_arr, var_arr, shape) = {
            let nodes = self.nodes.borrow();
            let xa = &nodes[x.idx()].value;
            let ga = &nodes[gamma.idx()].value;
            let ba = &nodes[beta.idx()].value;
            let (b, c, h, w) = dims4(xa);
            assert_eq!(ga.shape(), [c], "batch_norm: gamma shape");
            assert_eq!(ba.shape(), [c], "batch_norm: beta shape");
            let n = (b * h * w) as f64;
            assert!(b * h * w > 1, "batch_norm needs more than one sample site");
            let xs = std_slice(xa);
            let gs = std_slice(ga);
            let bs = std_slice(ba);
            let spatial = h * w;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * spatial;
                    acc += xs[base..base + spatial].iter().sum::<f64>();
                }
                mean[ci] = acc / n;
                let mut vacc = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * spatial;
                    for s in 0..spatial {
                        let d = xs[base + s] - mean[ci];
                        vacc += d * d;
                    }
                }
                var[ci] = vacc / n;
            }
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            {
                let xh = xhat.as_slice_mut().unwrap();
                let ys = y.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            let v = (xs[base + s] - mean[ci]) * istd[ci];
                            xh[base + s] = v;
                            ys[base + s] = gs[ci] * v + bs[ci];
                        }
                    }
                }
            }
            (
                y,
                if needs { Some(xhat) } else { None },
                istd,
                gs.to_vec(),
                Array1::from_vec(mean.clone()).into_dyn(),
                Array1::from_vec(var.clone()).into_dyn(),
                (b, c, h, w),
            )
        };
        let var_out = self.push_op(out, needs, move |g| {
            let (b, c, h, w) = shape;
            let n = (b * h * w) as f64;
            let spatial = h * w;
            let xhat = xhat_cap.as_ref().unwrap();
            let xh = std_slice(xhat);
            let gsl = std_slice(g);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    for s in 0..spatial {
                        dgamma[ci] += gsl[base + s] * xh[base + s];
                        dbeta[ci] += gsl[base + s];
                    }
                }
            }
            let mut r = Vec::new();
            if nx {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let k = gamma_v[ci] * inv_std[ci];
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            dxs[base + s] = k
                                * (gsl[base + s]
                                    - (dbeta[ci] + xh[base + s] * dgamma[ci]) / n);
                        }
                    }
                }
                r.push((x, dx));
            }
            if ng {
                r.push((gamma, Array1::from_vec(dgamma).into_dyn()));
            }
            if nb {
                r.push((beta, Array1::from_vec(dbeta).into_dyn()));
            }
            r
        });
        (var_out, mean_arr, var_arr)
    }

    /// Batch normalization in inference mode, using fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &ArrayD<f64>,
        running_var: &ArrayD<f64>,
        eps: f64,
    ) -> Var {
        let nx = self.needs_grad(x);
        let ng = self.needs_grad(gamma);
        let nb = self.needs_grad(beta);
        let needs = nx || ng || nb;
        let (out, xhat_cap, scale, shape) = {
            let nodes = self.nodes.borrow();
            let xa = &nodes[x.idx()].value;
            let ga = &nodes[gamma.idx()].value;
            let ba = &nodes[beta.idx()].value;
            let (b, c, h, w) = dims4(xa);
            assert_eq!(running_mean.shape(), [c], "batch_norm_eval: mean shape");
            assert_eq!(running_var.shape(), [c], "batch_norm_eval: var shape");
            let xs = std_slice(xa);
            let gs = std_slice(ga);
            let bs = std_slice(ba);
            let ms = std_slice(running_mean);
            let vs = std_slice(running_var);
            let istd: Vec<f64> = vs.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let spatial = h * w;
            let mut xhat = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            {
                let xh = xhat.as_slice_mut().unwrap();
                let ys = y.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            let v = (xs[base + s] - ms[ci]) * istd[ci];
                            xh[base + s] = v;
                            ys[base + s] = gs[ci] * v + bs[ci];
                        }
                    }
                }
            }
            let scale: Vec<f64> = gs.iter().zip(&istd).map(|(g, i)| g * i).collect();
            (
                y,
                if ng { Some(xhat) } else { None },
                scale,
                (b, c, h, w),
            )
        };
        self.push_op(out, needs, move |g| {
            let (b, c, h, w) = shape;
            let spatial = h * w;
            let gsl = std_slice(g);
            let mut r = Vec::new();
            if nx {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            dxs[base + s] = gsl[base + s] * scale[ci];
                        }
                    }
                }
                r.push((x, dx));
            }
            if ng || nb {
                let xh_opt = xhat_cap.as_ref();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            dbeta[ci] += gsl[base + s];
                            if let Some(xh) = xh_opt {
                                dgamma[ci] += gsl[base + s] * std_slice(xh)[base + s];
                            }
                        }
                    }
                }
                if ng {
                    r.push((gamma, Array1::from_vec(dgamma).into_dyn()));
                }
                if nb {
                    r.push((beta, Array1::from_vec(dbeta).into_dyn()));
                }
            }
            r
        })
    }

    /// L2-normalize along the channel axis at every spatial site:
    /// `y[b,:,i,j] = x[b,:,i,j] / sqrt(Σ_c x² + eps)`.
    pub fn channel_l2_normalize(&self, x: Var, eps: f64) -> Var {
        let nx = self.needs_grad(x);
        let (out, xv_cap, norms_cap, shape) = {
            let v = self.value(x);
            let (b, c, h, w) = dims4(&v);
            let xs = std_slice(&v);
            let spatial = h * w;
            let mut norms = vec![0.0; b * spatial];
            for bi in 0..b {
                for s in 0..spatial {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let val = xs[(bi * c + ci) * spatial + s];
                        acc += val * val;
                    }
                    norms[bi * spatial + s] = (acc + eps).sqrt();
                }
            }
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            {
                let ys = y.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            ys[base + s] = xs[base + s] / norms[bi * spatial + s];
                        }
                    }
                }
            }
            (
                y,
                if nx { Some(v.clone()) } else { None },
                if nx { Some(norms) } else { None },
                (b, c, h, w),
            )
        };
        self.push_op(out, nx, move |g| {
            let (b, c, h, w) = shape;
            let spatial = h * w;
            let xv = xv_cap.as_ref().unwrap();
            let xs = std_slice(xv);
            let norms = norms_cap.as_ref().unwrap();
            let gsl = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for s in 0..spatial {
                    let n1 = norms[bi * spatial + s];
                    let mut dot = 0.0;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * spatial + s;
                        dot += gsl[idx] * xs[idx];
                    }
                    let n3 = n1 * n1 * n1;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * spatial + s;
                        dxs[idx] = gsl[idx] / n1 - xs[idx] * dot / n3;
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Softmax over the channel axis at every spatial site.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let nx = self.needs_grad(x);
        let (out, shape) = {
            let v = self.value(x);
            let (b, c, h, w) = dims4(&v);
            let xs = std_slice(&v);
            let spatial = h * w;
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            {
                let ys = y.as_slice_mut().unwrap();
                for bi in 0..b {
                    for s in 0..spatial {
                        let mut mx = f64::NEG_INFINITY;
                        for ci in 0..c {
                            mx = mx.max(xs[(bi * c + ci) * spatial + s]);
                        }
                        let mut z = 0.0;
                        for ci in 0..c {
                            let e = (xs[(bi * c + ci) * spatial + s] - mx).exp();
                            ys[(bi * c + ci) * spatial + s] = e;
                            z += e;
                        }
                        for ci in 0..c {
                            ys[(bi * c + ci) * spatial + s] /= z;
                        }
                    }
                }
            }
            (y, (b, c, h, w))
        };
        let y_cap = if nx { Some(out.clone()) } else { None };
        self.push_op(out, nx, move |g| {
            let (b, c, h, w) = shape;
            let spatial = h * w;
            let y = y_cap.as_ref().unwrap();
            let ys = std_slice(y);
            let gsl = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for s in 0..spatial {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * spatial + s;
                        dot += gsl[idx] * ys[idx];
                    }
                    for ci in 0..c {
                        let idx = (bi * c + ci) * spatial + s;
                        dxs[idx] = ys[idx] * (gsl[idx] - dot);
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    // ----- resampling ---------------------------------------------------------

    /// Non-overlapping k×k average pooling; both spatial dims must divide by k.
    pub fn avg_pool2(&self, x: Var, k: usize) -> Var {
        assert!(k >= 1, "avg_pool2: window must be >= 1");
        let nx = self.needs_grad(x);
        let (out, shape) = {
            let v = self.value(x);
            let (b, c, h, w) = dims4(&v);
            assert!(
                h % k == 0 && w % k == 0,
                "avg_pool2: {h}x{w} not divisible by window {k}"
            );
            let (ho, wo) = (h / k, w / k);
            let xs = std_slice(&v);
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, ho, wo]));
            {
                let ys = y.as_slice_mut().unwrap();
                let inv = 1.0 / (k * k) as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let ibase = (bi * c + ci) * h * w;
                        let obase = (bi * c + ci) * ho * wo;
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let mut acc = 0.0;
                                for i in 0..k {
                                    let row = ibase + (oh * k + i) * w + ow * k;
                                    for j in 0..k {
                                        acc += xs[row + j];
                                    }
                                }
                                ys[obase + oh * wo + ow] = acc * inv;
                            }
                        }
                    }
                }
            }
            (y, (b, c, h, w))
        };
        self.push_op(out, nx, move |g| {
            let (b, c, h, w) = shape;
            let (ho, wo) = (h / k, w / k);
            let gsl = std_slice(g);
            let inv = 1.0 / (k * k) as f64;
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let ibase = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * ho * wo;
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = gsl[obase + oh * wo + ow] * inv;
                            for i in 0..k {
                                let row = ibase + (oh * k + i) * w + ow * k;
                                for j in 0..k {
                                    dxs[row + j] = gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn nearest_up2(&self, x: Var) -> Var {
        let nx = self.needs_grad(x);
        let (out, shape) = {
            let v = self.value(x);
            let (b, c, h, w) = dims4(&v);
            let xs = std_slice(&v);
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
            {
                let ys = y.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let ibase = (bi * c + ci) * h * w;
                        let obase = (bi * c + ci) * 4 * h * w;
                        for i in 0..2 * h {
                            let irow = ibase + (i / 2) * w;
                            let orow = obase + i * 2 * w;
                            for j in 0..2 * w {
                                ys[orow + j] = xs[irow + j / 2];
                            }
                        }
                    }
                }
            }
            (y, (b, c, h, w))
        };
        self.push_op(out, nx, move |g| {
            let (b, c, h, w) = shape;
            let gsl = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let ibase = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * 4 * h * w;
                    for i in 0..2 * h {
                        let irow = ibase + (i / 2) * w;
                        let orow = obase + i * 2 * w;
                        for j in 0..2 * w {
                            dxs[irow + j / 2] += gsl[orow + j];
                        }
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Bilinear sampling with border padding (coordinates clamped to the
    /// image rectangle). `grid` is `[b, ho, wo, 2]` in pixel coordinates,
    /// `(x, y) = (column, row)`.
    ///
    /// Exactness note: at exactly integer coordinates the interpolation
    /// weights are 0/1 and the sampled value is the stored pixel value with
    /// no arithmetic applied, so an identity grid is a bitwise no-op.
    /// Positions outside the rectangle clamp to the border and receive zero
    /// gradient along the clamped axis.
    pub fn grid_sample_border(&self, x: Var, grid: Var) -> Var {
        let nx = self.needs_grad(x);
        let ng = self.needs_grad(grid);
        let needs = nx || ng;
        let (out, xv_cap, gv_cap, xshape, gshape) = {
            let nodes = self.nodes.borrow();
            let xa = &nodes[x.idx()].value;
            let ga = &nodes[grid.idx()].value;
            let (b, c, h, w) = dims4(xa);
            assert_eq!(ga.ndim(), 4, "grid must be [b, ho, wo, 2]");
            assert_eq!(ga.shape()[0], b, "grid batch mismatch");
            assert_eq!(ga.shape()[3], 2, "grid last axis must be (x, y)");
            let (ho, wo) = (ga.shape()[1], ga.shape()[2]);
            let out = sample_bilinear_border(xa, ga, b, c, h, w, ho, wo);
            (
                out,
                if needs { Some(xa.clone()) } else { None },
                if needs { Some(ga.clone()) } else { None },
                (b, c, h, w),
                (ho, wo),
            )
        };
        self.push_op(out, needs, move |g| {
            let (b, c, h, w) = xshape;
            let (ho, wo) = gshape;
            let xv = xv_cap.as_ref().unwrap();
            let gv = gv_cap.as_ref().unwrap();
            let xs = std_slice(xv);
            let gs = std_slice(gv);
            let gout = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let mut dgrid = ArrayD::<f64>::zeros(IxDyn(&[b, ho, wo, 2]));
            {
                let dxs = dx.as_slice_mut().unwrap();
                let dgs = dgrid.as_slice_mut().unwrap();
                for bi in 0..b {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gidx = ((bi * ho + oh) * wo + ow) * 2;
                            let px_raw = gs[gidx];
                            let py_raw = gs[gidx + 1];
                            let px = px_raw.clamp(0.0, w as f64 - 1.0);
                            let py = py_raw.clamp(0.0, h as f64 - 1.0);
                            let x0 = px.floor() as usize;
                            let y0 = py.floor() as usize;
                            let fx = px - x0 as f64;
                            let fy = py - y0 as f64;
                            let x1 = (x0 + 1).min(w - 1);
                            let y1 = (y0 + 1).min(h - 1);
                            let x_clamped = px_raw < 0.0 || px_raw > w as f64 - 1.0;
                            let y_clamped = py_raw < 0.0 || py_raw > h as f64 - 1.0;
                            let mut ddx_acc = 0.0;
                            let mut ddy_acc = 0.0;
                            for ci in 0..c {
                                let base = (bi * c + ci) * h * w;
                                let oidx = ((bi * c + ci) * ho + oh) * wo + ow;
                                let go = gout[oidx];
                                let v00 = xs[base + y0 * w + x0];
                                let v01 = xs[base + y0 * w + x1];
                                let v10 = xs[base + y1 * w + x0];
                                let v11 = xs[base + y1 * w + x1];
                                if nx {
                                    dxs[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                    dxs[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                                    dxs[base + y1 * w + x0] += go * fy * (1.0 - fx);
                                    dxs[base + y1 * w + x1] += go * fy * fx;
                                }
                                ddx_acc += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                ddy_acc += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            if ng {
                                dgs[gidx] = if x_clamped { 0.0 } else { ddx_acc };
                                dgs[gidx + 1] = if y_clamped { 0.0 } else { ddy_acc };
                            }
                        }
                    }
                }
            }
            let mut r = Vec::new();
            if nx {
                r.push((x, dx));
            }
            if ng {
                r.push((grid, dgrid));
            }
            r
        })
    }

    /// Gather square patches: `boxes[p] = (sample, row0, col0)` selects
    /// `x[sample, :, row0..row0+size, col0..col0+size]` into output patch `p`.
    /// Boxes must lie fully inside the image; overlapping boxes are fine
    /// (the backward pass accumulates).
    pub fn extract_patches(&self, x: Var, boxes: &[(usize, usize, usize)], size: usize) -> Var {
        assert!(!boxes.is_empty(), "extract_patches: no boxes");
        let nx = self.needs_grad(x);
        let (out, xshape) = {
            let v = self.value(x);
            let (b, c, h, w) = dims4(&v);
            let xs = std_slice(&v);
            let p = boxes.len();
            let mut y = ArrayD::<f64>::zeros(IxDyn(&[p, c, size, size]));
            {
                let ys = y.as_slice_mut().unwrap();
                for (pi, &(bi, r0, c0)) in boxes.iter().enumerate() {
                    assert!(bi < b, "patch box sample {bi} out of range");
                    assert!(
                        r0 + size <= h && c0 + size <= w,
                        "patch box ({r0},{c0})+{size} exceeds {h}x{w}"
                    );
                    for ci in 0..c {
                        let ibase = (bi * c + ci) * h * w;
                        let obase = (pi * c + ci) * size * size;
                        for i in 0..size {
                            let irow = ibase + (r0 + i) * w + c0;
                            let orow = obase + i * size;
                            ys[orow..orow + size].copy_from_slice(&xs[irow..irow + size]);
                        }
                    }
                }
            }
            (y, (b, c, h, w))
        };
        let boxes = boxes.to_vec();
        self.push_op(out, nx, move |g| {
            let (b, c, h, w) = xshape;
            let gsl = std_slice(g);
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, c, h, w]));
            let dxs = dx.as_slice_mut().unwrap();
            for (pi, &(bi, r0, c0)) in boxes.iter().enumerate() {
                for ci in 0..c {
                    let ibase = (bi * c + ci) * h * w;
                    let obase = (pi * c + ci) * size * size;
                    for i in 0..size {
                        let irow = ibase + (r0 + i) * w + c0;
                        let orow = obase + i * size;
                        for j in 0..size {
                            dxs[irow + j] += gsl[orow + j];
                        }
                    }
                }
            }
            vec![(x, dx)]
        })
    }
}

/// Forward bilinear sampling used by [`Tape::grid_sample_border`].
fn sample_bilinear_border(
    x: &ArrayD<f64>,
    grid: &ArrayD<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<f64> {
    let xs = std_slice(x);
    let gs = std_slice(grid);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, c, ho, wo]));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let gidx = ((bi * ho + oh) * wo + ow) * 2;
                let px = gs[gidx].clamp(0.0, w as f64 - 1.0);
                let py = gs[gidx + 1].clamp(0.0, h as f64 - 1.0);
                let x0 = px.floor() as usize;
                let y0 = py.floor() as usize;
                let fx = px - x0 as f64;
                let fy = py - y0 as f64;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let v00 = xs[base + y0 * w + x0];
                    let v01 = xs[base + y0 * w + x1];
                    let v10 = xs[base + y1 * w + x0];
                    let v11 = xs[base + y1 * w + x1];
                    let top = (1.0 - fx) * v00 + fx * v01;
                    let bot = (1.0 - fx) * v10 + fx * v11;
                    os[((bi * c + ci) * ho + oh) * wo + ow] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use crate::autodiff::check::{full_gradcheck, sampled_gradcheck};
    use crate::rng::{rand_uniform, randn, rng_from};

    /// Reference convolution: direct nested loops, no im2col. Slow but
    /// obviously correct; freezes the semantics the GEMM path must match.
    fn conv_direct(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        bias: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (b, cin, h, wd) = dims4(x);
        let (cout, _, kh, kw) = dims4(w);
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
        for bi in 0..b {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias[[co]];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wd
                                    {
                                        acc += x[[bi, ci, ih as usize, iw as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Pixel-coordinate identity grid for an h×w target.
    fn identity_grid(b: usize, h: usize, w: usize) -> ArrayD<f64> {
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[b, h, w, 2]));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    g[[bi, i, j, 0]] = j as f64;
                    g[[bi, i, j, 1]] = i as f64;
                }
            }
        }
        g
    }

    #[test]
    fn elementwise_values() {
        let t = Tape::new();
        let a = t.constant(ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let b = t.constant(ndarray::arr1(&[0.5, 4.0, -1.0]).into_dyn());
        assert_eq!(
            t.value_owned(t.add(a, b)),
            ndarray::arr1(&[1.5, 2.0, 2.0]).into_dyn()
        );
        assert_eq!(
            t.value_owned(t.sub(a, b)),
            ndarray::arr1(&[0.5, -6.0, 4.0]).into_dyn()
        );
        assert_eq!(
            t.value_owned(t.mul(a, b)),
            ndarray::arr1(&[0.5, -8.0, -3.0]).into_dyn()
        );
        assert_eq!(
            t.value_owned(t.relu(a)),
            ndarray::arr1(&[1.0, 0.0, 3.0]).into_dyn()
        );
        assert_eq!(
            t.value_owned(t.abs(a)),
            ndarray::arr1(&[1.0, 2.0, 3.0]).into_dyn()
        );
        assert_eq!(t.scalar_value(t.sum_all(a)), 2.0);
        assert!((t.scalar_value(t.mean_all(a)) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_gradients_agree_with_finite_differences() {
        let mut rng = rng_from(10);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]);
        let check = full_gradcheck(&[a, b], 1e-6, &|t, vs| {
            let s = t.add(vs[0], vs[1]);
            let d = t.sub(s, vs[1]);
            let m = t.mul(d, vs[1]);
            let r = t.relu(m);
            let th = t.tanh(r);
            let sp = t.softplus(th);
            let ab = t.abs(sp);
            let sc = t.mul_scalar(t.add_scalar(ab, 0.3), 1.7);
            t.mean_all(sc)
        });
        assert!(check.within(1e-4), "{check:?}");
    }

    #[test]
    fn log_clamped_gradient_is_zero_below_the_floor() {
        let t = Tape::new();
        let x = t.leaf(ndarray::arr1(&[0.5, 1e-12]).into_dyn());
        let y = t.sum_all(t.log_clamped(x, 1e-8));
        let g = t.backward(y);
        let gx = g.get(x).unwrap();
        assert!((gx[[0]] - 2.0).abs() < 1e-12, "1/0.5 expected");
        assert_eq!(gx[[1]], 0.0, "clamped region must be flat");
    }

    #[test]
    fn reshape_concat_pool_gradients() {
        let mut rng = rng_from(11);
        let a = randn(&mut rng, &[2, 3, 2, 2]);
        let b = randn(&mut rng, &[2, 2, 2, 2]);
        let check = full_gradcheck(&[a, b], 1e-6, &|t, vs| {
            let cat = t.concat_channels(&[vs[0], vs[1]]); // [2,5,2,2]
            let gap = t.global_avg_pool(cat); // [2,5]
            let rs = t.reshape(gap, &[10]);
            t.mean_all(t.mul(rs, rs))
        });
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn linear_matches_manual_matmul_and_gradchecks() {
        let t = Tape::new();
        let x = t.constant(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let w = t.constant(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]).into_dyn());
        let b = t.constant(ndarray::arr1(&[0.1, 0.2, 0.3]).into_dyn());
        let y = t.value_owned(t.linear(x, w, b));
        assert_eq!(
            y,
            ndarray::arr2(&[[1.1, 2.2, -0.7], [3.1, 4.2, -0.7]]).into_dyn()
        );

        let mut rng = rng_from(12);
        let inputs = [
            randn(&mut rng, &[3, 4]),
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[5]),
        ];
        let check = full_gradcheck(&inputs, 1e-6, &|t, vs| {
            t.mean_all(t.tanh(t.linear(vs[0], vs[1], vs[2])))
        });
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn bmm_matches_per_sample_matmul_and_gradchecks() {
        let mut rng = rng_from(13);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 5]);
        let t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let y = t.value_owned(t.bmm(va, vb));
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += a[[bi, i, k]] * b[[bi, k, j]];
                    }
                    assert!((y[[bi, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
        let check = full_gradcheck(&[a, b], 1e-6, &|t, vs| t.mean_all(t.bmm(vs[0], vs[1])));
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn transpose_last2_is_an_involution_and_gradchecks() {
        let mut rng = rng_from(27);
        let a = randn(&mut rng, &[2, 3, 4]);
        let t = Tape::new();
        let va = t.constant(a.clone());
        let once = t.transpose_last2(va);
        assert_eq!(t.shape(once), [2, 4, 3]);
        {
            let y = t.value(once);
            for bi in 0..2 {
                for i in 0..3 {
                    for j in 0..4 {
                        assert_eq!(y[[bi, j, i]], a[[bi, i, j]]);
                    }
                }
            }
        }
        let twice = t.value_owned(t.transpose_last2(once));
        assert_eq!(twice, a, "transposing twice must be the identity");
        let check = full_gradcheck(&[a], 1e-6, &|t, vs| {
            let y = t.transpose_last2(vs[0]);
            t.mean_all(t.mul(y, y))
        });
        assert!(check.within(1e-6), "{check:?}");
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = rng_from(14);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
            let x = randn(&mut rng, &[2, 3, 7, 6]);
            let w = randn(&mut rng, &[4, 3, kh, kh]);
            let b = randn(&mut rng, &[4]);
            let want = conv_direct(&x, &w, &b, stride, pad);
            let t = Tape::new();
            let y = t.value_owned(t.conv2d(
                t.constant(x.clone()),
                t.constant(w.clone()),
                t.constant(b.clone()),
                stride,
                pad,
            ));
            assert_eq!(y.shape(), want.shape(), "stride {stride} pad {pad} k {kh}");
            let max_diff = (&y - &want).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(
                max_diff < 1e-12,
                "conv mismatch {max_diff} at stride {stride} pad {pad} k {kh}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_agree_with_finite_differences() {
        let mut rng = rng_from(15);
        let inputs = [
            randn(&mut rng, &[2, 2, 5, 4]),
            randn(&mut rng, &[3, 2, 3, 3]),
            randn(&mut rng, &[3]),
        ];
        let check = full_gradcheck(&inputs, 1e-5, &|t, vs| {
            t.mean_all(t.tanh(t.conv2d(vs[0], vs[1], vs[2], 2, 1)))
        });
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn batch_norm_train_normalizes_and_returns_batch_stats() {
        let mut rng = rng_from(16);
        let x = randn(&mut rng, &[4, 3, 5, 5]);
        let t = Tape::new();
        let vx = t.constant(x.clone());
        let gamma = t.constant(ArrayD::ones(IxDyn(&[3])));
        let beta = t.constant(ArrayD::zeros(IxDyn(&[3])));
        let (y, mean, var) = t.batch_norm_train(vx, gamma, beta, 1e-5);
        let yv = t.value_owned(y);
        // output is standardized per channel
        for ci in 0..3 {
            let mut acc = 0.0;
            let mut count = 0.0;
            for bi in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        acc += yv[[bi, ci, i, j]];
                        count += 1.0;
                    }
                }
            }
            let m = acc / count;
            assert!(m.abs() < 1e-12, "channel {ci} mean {m}");
        }
        // returned stats match a manual computation
        for ci in 0..3 {
            let mut acc = 0.0;
            for bi in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        acc += x[[bi, ci, i, j]];
                    }
                }
            }
            let m = acc / 100.0;
            assert!((mean[[ci]] - m).abs() < 1e-12);
            let mut v = 0.0;
            for bi in 0..4 {
                for i in 0..5 {
                    for j in 0..5 {
                        let d = x[[bi, ci, i, j]] - m;
                        v += d * d;
                    }
                }
            }
            assert!((var[[ci]] - v / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_gradients_agree_with_finite_differences() {
        let mut rng = rng_from(17);
        let inputs = [
            randn(&mut rng, &[3, 2, 4, 3]),
            rand_uniform(&mut rng, &[2], 0.5, 1.5),
            randn(&mut rng, &[2]),
        ];
        let check = full_gradcheck(&inputs, 1e-5, &|t, vs| {
            let (y, _, _) = t.batch_norm_train(vs[0], vs[1], vs[2], 1e-5);
            t.mean_all(t.mul(y, y))
        });
        assert!(check.within(1e-4), "{check:?}");
    }

    #[test]
    fn batch_norm_eval_uses_the_given_stats_and_gradchecks() {
        let mut rng = rng_from(18);
        let x = randn(&mut rng, &[2, 2, 3, 3]);
        let mean = ndarray::arr1(&[0.3, -0.2]).into_dyn();
        let var = ndarray::arr1(&[1.5, 0.7]).into_dyn();
        let t = Tape::new();
        let y = t.batch_norm_eval(
            t.constant(x.clone()),
            t.constant(ndarray::arr1(&[2.0, 0.5]).into_dyn()),
            t.constant(ndarray::arr1(&[0.1, -0.1]).into_dyn()),
            &mean,
            &var,
            1e-5,
        );
        let yv = t.value_owned(y);
        let expect = 2.0 * (x[[0, 0, 1, 1]] - 0.3) / (1.5f64 + 1e-5).sqrt() + 0.1;
        assert!((yv[[0, 0, 1, 1]] - expect).abs() < 1e-12);

        let inputs = [x, ndarray::arr1(&[2.0, 0.5]).into_dyn(), ndarray::arr1(&[0.1, -0.1]).into_dyn()];
        let (m2, v2) = (mean.clone(), var.clone());
        let check = full_gradcheck(&inputs, 1e-6, &move |t, vs| {
            t.mean_all(t.tanh(t.batch_norm_eval(vs[0], vs[1], vs[2], &m2, &v2, 1e-5)))
        });
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn channel_l2_normalize_produces_unit_vectors_and_gradchecks() {
        let mut rng = rng_from(19);
        let x = randn(&mut rng, &[2, 4, 3, 2]);
        let t = Tape::new();
        let y = t.value_owned(t.channel_l2_normalize(t.constant(x.clone()), 1e-12));
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let n: f64 = (0..4).map(|c| y[[bi, c, i, j]].powi(2)).sum();
                    assert!((n - 1.0).abs() < 1e-9, "norm {n}");
                }
            }
        }
        let check = full_gradcheck(&[x], 1e-6, &|t, vs| {
            let y = t.channel_l2_normalize(vs[0], 1e-12);
            let w = t.tanh(y);
            t.mean_all(t.mul(w, y))
        });
        assert!(check.within(1e-4), "{check:?}");
    }

    #[test]
    fn softmax_channels_sums_to_one_and_gradchecks() {
        let mut rng = rng_from(20);
        let x = randn(&mut rng, &[2, 5, 2, 2]);
        let t = Tape::new();
        let y = t.value_owned(t.softmax_channels(t.constant(x.clone())));
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let s: f64 = (0..5).map(|c| y[[bi, c, i, j]]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    for c in 0..5 {
                        assert!(y[[bi, c, i, j]] > 0.0);
                    }
                }
            }
        }
        let check = full_gradcheck(&[x], 1e-6, &|t, vs| {
            let y = t.softmax_channels(vs[0]);
            t.mean_all(t.log_clamped(y, 1e-8))
        });
        assert!(check.within(1e-4), "{check:?}");
    }

    #[test]
    fn pooling_and_upsampling_shapes_values_grads() {
        let t = Tape::new();
        let x = t.constant(
            ndarray::Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let pooled = t.avg_pool2(x, 2);
        assert_eq!(t.value_owned(pooled)[[0, 0, 0, 0]], 2.5);
        let up = t.nearest_up2(x);
        let uv = t.value_owned(up);
        assert_eq!(uv.shape(), [1, 1, 4, 4]);
        assert_eq!(uv[[0, 0, 0, 1]], 1.0);
        assert_eq!(uv[[0, 0, 3, 3]], 4.0);

        let mut rng = rng_from(21);
        let a = randn(&mut rng, &[2, 3, 4, 4]);
        let check = full_gradcheck(&[a], 1e-6, &|t, vs| {
            let down = t.avg_pool2(vs[0], 2);
            let up = t.nearest_up2(down);
            t.mean_all(t.mul(up, up))
        });
        assert!(check.within(1e-5), "{check:?}");
    }

    #[test]
    fn grid_sample_identity_grid_reproduces_the_input_bitwise() {
        let mut rng = rng_from(22);
        let x = randn(&mut rng, &[2, 3, 6, 5]);
        let t = Tape::new();
        let y = t.value_owned(
            t.grid_sample_border(t.constant(x.clone()), t.constant(identity_grid(2, 6, 5))),
        );
        assert_eq!(y, x, "identity grid must reproduce the input exactly");
    }

    #[test]
    fn grid_sample_interpolates_midpoints() {
        // Single row [0, 2]: sampling halfway between the two pixels gives 1.
        let t = Tape::new();
        let x = t.constant(
            ndarray::Array::from_shape_vec((1, 1, 1, 2), vec![0.0, 2.0])
                .unwrap()
                .into_dyn(),
        );
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 1, 2]));
        g[[0, 0, 0, 0]] = 0.5;
        g[[0, 0, 0, 1]] = 0.0;
        let y = t.value_owned(t.grid_sample_border(x, t.constant(g)));
        assert!((y[[0, 0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_sample_clamps_at_the_border() {
        let t = Tape::new();
        let x = t.constant(
            ndarray::Array::from_shape_vec((1, 1, 1, 3), vec![5.0, 6.0, 7.0])
                .unwrap()
                .into_dyn(),
        );
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        g[[0, 0, 0, 0]] = -3.0; // far left of the image
        g[[0, 0, 1, 0]] = 7.5; // far right
        let y = t.value_owned(t.grid_sample_border(x, t.constant(g)));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 0, 1]], 7.0);
    }

    #[test]
    fn grid_sample_gradients_agree_with_finite_differences() {
        let mut rng = rng_from(23);
        let x = randn(&mut rng, &[1, 2, 5, 4]);
        // keep sample points strictly interior and away from integer pixel
        // coordinates so the finite-difference window stays on one linear piece
        let mut grid = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 3, 2]));
        for i in 0..3 {
            for j in 0..3 {
                grid[[0, i, j, 0]] = 0.3 + 0.9 * j as f64 + 0.13 * i as f64;
                grid[[0, i, j, 1]] = 0.4 + 1.1 * i as f64 + 0.21 * j as f64;
            }
        }
        let check = full_gradcheck(&[x, grid], 1e-6, &|t, vs| {
            let y = t.grid_sample_border(vs[0], vs[1]);
            t.mean_all(t.mul(y, y))
        });
        assert!(check.within(1e-4), "{check:?}");
    }

    #[test]
    fn extract_patches_gathers_and_scatters_with_overlap() {
        let mut rng = rng_from(24);
        let x = randn(&mut rng, &[2, 2, 6, 6]);
        let boxes = vec![(0usize, 1usize, 2usize), (1, 0, 0), (0, 2, 3)]; // last two overlap box 0
        let t = Tape::new();
        let vx = t.leaf(x.clone());
        let p = t.extract_patches(vx, &boxes, 3);
        let pv = t.value_owned(p);
        assert_eq!(pv.shape(), [3, 2, 3, 3]);
        assert_eq!(pv[[0, 1, 0, 0]], x[[0, 1, 1, 2]]);
        assert_eq!(pv[[1, 0, 2, 2]], x[[1, 0, 2, 2]]);

        let g = t.backward(t.sum_all(p));
        let dx = g.get(vx).unwrap();
        // x[0, :, 2, 3] is covered by box 0 (rows 1..4, cols 2..5) and box 2
        // (rows 2..5, cols 3..6), so its gradient under sum() is 2.
        assert_eq!(dx[[0, 0, 2, 3]], 2.0);
        assert_eq!(dx[[1, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 5, 5]], 0.0);
    }

    #[test]
    fn gradcheck_sampling_handles_large_tensors() {
        let mut rng = rng_from(25);
        let x = randn(&mut rng, &[4, 8, 8, 8]);
        let check = sampled_gradcheck(&[x], 16, 1e-6, 7, &|t, vs| {
            t.mean_all(t.tanh(vs[0]))
        });
        assert_eq!(check.checked, 16);
        assert!(check.within(1e-5), "{check:?}");
    }
}

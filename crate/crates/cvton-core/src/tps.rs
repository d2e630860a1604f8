//! Thin-plate-spline warping on a fixed control grid.
//!
//! A garment image is warped by moving the points of an `n×n` control grid
//! and interpolating the displacement everywhere else with the thin-plate
//! radial basis `U(r²) = r²·ln(r²)`. The interpolant for one axis is
//!
//! ```text
//! f(p) = Σ_k w_k · U(|p − c_k|²) + a₀ + a₁·x + a₂·y
//! ```
//!
//! with the weights obtained from the regularized system
//!
//! ```text
//! ⎡ K + λI   P ⎤ ⎡w⎤   ⎡δ⎤        K_ij = U(|c_i − c_j|²),  P_i = (1, x_i, y_i)
//! ⎣   Pᵀ     0 ⎦ ⎣a⎦ = ⎣0⎦
//! ```
//!
//! where `δ` are the per-control-point offsets and λ is a small ridge on the
//! radial block only. The *interpolation math* lives in normalized
//! coordinates — control points span [−1, 1]² with −1/+1 at the centers of
//! the outermost pixels — while the produced [`SamplingGrid`] stores *pixel*
//! coordinates.
//!
//! Two properties this module guarantees, both load-bearing for the tests:
//!
//! * **Zero offsets give the identity grid bit-exactly.** The solve is linear
//!   in `δ`, so the sampling grid is materialized as
//!   `identity + scale·(B·δ)` with a precomputed basis matrix
//!   `B = Φ·L⁻¹[:, :K]`. With `δ = 0` no floating-point solve output is
//!   involved at all.
//! * **The identity grid is exact.** Pixel coordinates make identity entries
//!   plain integers. (Normalized storage cannot do this: no `f64` maps back
//!   to pixel 1 of an 11-wide axis under `x·5 + 5`, so a normalized identity
//!   grid would warp some images non-trivially.)

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Ridge added to the radial block of the interpolation system.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Condition numbers above this indicate a degenerate control grid.
const CONDITION_LIMIT: f64 = 1e12;

/// Thin-plate kernel on a *squared* distance: `U = s·ln(s)`, `U(0) = 0`.
fn tps_kernel_sq(s: f64) -> f64 {
    if s > 0.0 {
        s * s.ln()
    } else {
        0.0
    }
}

/// Per-axis offsets of the control points, laid out `[batch, 2·n²]` with the
/// first `n²` entries holding x-offsets and the rest y-offsets, both in
/// normalized units (an offset of `2/(len−1)` moves one pixel).
#[derive(Debug, Clone)]
pub struct WarpParams(pub ArrayD<f64>);

impl WarpParams {
    pub fn zeros(batch: usize, n: usize) -> Self {
        WarpParams(ArrayD::zeros(IxDyn(&[batch, 2 * n * n])))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

/// A dense sampling grid `[batch, h, w, 2]`, last axis `(x, y)` in pixel
/// coordinates of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid(pub ArrayD<f64>);

/// Precomputed interpolation machinery for one `(n, h, w)` combination.
#[derive(Debug)]
pub struct TpsSolver {
    n: usize,
    h: usize,
    w: usize,
    /// `[h·w, n²]`: maps control-point offsets of one axis to dense
    /// normalized offsets (scaled to pixels when the grid is materialized).
    basis: Array2<f64>,
    /// `[h, w, 2]` identity coordinates in pixels — exact integers.
    identity: ArrayD<f64>,
    /// Condition number of the interpolation system (after the ridge).
    pub condition: f64,
}

/// Normalized coordinate of index `j` along an axis of length `len`.
pub fn normalized_coord(j: usize, len: usize) -> f64 {
    let half = (len as f64 - 1.0) / 2.0;
    (j as f64 - half) / half
}

impl TpsSolver {
    pub fn new(n: usize, h: usize, w: usize, ridge: f64) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "warp target {h}x{w} too small: need at least 2x2"
            )));
        }
        if n < 2 {
            // The affine part of the system needs ≥3 non-collinear control
            // points; n=1 leaves it rank-deficient. Catch it by the same
            // condition-number gate that guards numerically bad grids.
            return Err(Error::Numeric(format!(
                "TPS control grid {n}x{n} is degenerate (condition number exceeds {CONDITION_LIMIT:.0e})"
            )));
        }
        let k = n * n;
        // Control points on a uniform n×n lattice over [-1,1]², row-major
        // (iy outer, ix inner).
        let mut cx = vec![0.0; k];
        let mut cy = vec![0.0; k];
        for iy in 0..n {
            for ix in 0..n {
                cx[iy * n + ix] = -1.0 + 2.0 * ix as f64 / (n as f64 - 1.0);
                cy[iy * n + ix] = -1.0 + 2.0 * iy as f64 / (n as f64 - 1.0);
            }
        }

        // Interpolation system L = [[K + λI, P], [Pᵀ, 0]].
        let m = k + 3;
        let mut l = nalgebra::DMatrix::<f64>::zeros(m, m);
        for i in 0..k {
            for j in 0..k {
                let dx = cx[i] - cx[j];
                let dy = cy[i] - cy[j];
                l[(i, j)] = tps_kernel_sq(dx * dx + dy * dy);
            }
            l[(i, i)] += ridge;
            l[(i, k)] = 1.0;
            l[(i, k + 1)] = cx[i];
            l[(i, k + 2)] = cy[i];
            l[(k, i)] = 1.0;
            l[(k + 1, i)] = cx[i];
            l[(k + 2, i)] = cy[i];
        }

        let svd = l.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::Numeric(format!(
                "TPS control grid {n}x{n} is degenerate (condition number {condition:.3e} exceeds {CONDITION_LIMIT:.0e})"
            )));
        }
        let l_inv = l
            .try_inverse()
            .ok_or_else(|| Error::Numeric("TPS system not invertible".into()))?;

        // Basis rows: φ(p)ᵀ·L⁻¹ restricted to the first k columns — the rest
        // multiply the zero block of the right-hand side.
        let mut basis = Array2::<f64>::zeros((h * w, k));
        let mut identity = ArrayD::<f64>::zeros(IxDyn(&[h, w, 2]));
        let mut phi = vec![0.0; m];
        for row in 0..h {
            let py = normalized_coord(row, h);
            for col in 0..w {
                let px = normalized_coord(col, w);
                identity[[row, col, 0]] = col as f64;
                identity[[row, col, 1]] = row as f64;
                for j in 0..k {
                    let dx = px - cx[j];
                    let dy = py - cy[j];
                    phi[j] = tps_kernel_sq(dx * dx + dy * dy);
                }
                phi[k] = 1.0;
                phi[k + 1] = px;
                phi[k + 2] = py;
                for j in 0..k {
                    let mut acc = 0.0;
                    for (i, &phi_i) in phi.iter().enumerate() {
                        acc += phi_i * l_inv[(i, j)];
                    }
                    basis[(row * w + col, j)] = acc;
                }
            }
        }

        Ok(TpsSolver {
            n,
            h,
            w,
            basis,
            identity,
            condition,
        })
    }

    pub fn control_grid_side(&self) -> usize {
        self.n
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Number of scalar warp parameters: 2·n².
    pub fn param_len(&self) -> usize {
        2 * self.n * self.n
    }

    /// `[batch, h, w, 2]` identity grid.
    pub fn identity_grid(&self, batch: usize) -> SamplingGrid {
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[batch, self.h, self.w, 2]));
        for bi in 0..batch {
            for row in 0..self.h {
                for col in 0..self.w {
                    g[[bi, row, col, 0]] = self.identity[[row, col, 0]];
                    g[[bi, row, col, 1]] = self.identity[[row, col, 1]];
                }
            }
        }
        SamplingGrid(g)
    }

    /// Dense sampling grid for the given control offsets (no gradients).
    pub fn solve(&self, params: &WarpParams) -> SamplingGrid {
        let tape = Tape::new();
        let theta = tape.constant(params.0.clone());
        let grid = self.grid_op(&tape, theta);
        SamplingGrid(tape.value_owned(grid))
    }

    /// Tape op: `theta [batch, 2n²] → grid [batch, h, w, 2]` in pixels.
    ///
    /// The grid is affine in the offsets (`identity + scale·(B·δ)` with
    /// `scale = (len−1)/2` per axis), so the backward pass is a plain
    /// transposed product — and zero offsets reproduce the integer identity
    /// grid without any floating-point residue.
    pub fn grid_op(&self, tape: &Tape, theta: Var) -> Var {
        let k = self.n * self.n;
        let (h, w) = (self.h, self.w);
        let half_w = (w as f64 - 1.0) / 2.0;
        let half_h = (h as f64 - 1.0) / 2.0;
        let needs = tape.needs_grad(theta);
        let basis = &self.basis;
        let out = {
            let tv = tape.value(theta);
            assert_eq!(tv.ndim(), 2, "warp params must be [batch, 2n²]");
            assert_eq!(
                tv.shape()[1],
                2 * k,
                "warp params for a {0}x{0} control grid need {1} entries, got {2}",
                self.n,
                2 * k,
                tv.shape()[1]
            );
            let batch = tv.shape()[0];
            let mut g = ArrayD::<f64>::zeros(IxDyn(&[batch, h, w, 2]));
            for bi in 0..batch {
                for row in 0..h {
                    for col in 0..w {
                        let mut ox = 0.0;
                        let mut oy = 0.0;
                        for j in 0..k {
                            let b = basis[(row * w + col, j)];
                            ox += b * tv[[bi, j]];
                            oy += b * tv[[bi, k + j]];
                        }
                        g[[bi, row, col, 0]] = self.identity[[row, col, 0]] + ox * half_w;
                        g[[bi, row, col, 1]] = self.identity[[row, col, 1]] + oy * half_h;
                    }
                }
            }
            g
        };
        // Backward needs only the basis matrix; clone it into the closure.
        let basis = self.basis.clone();
        tape.push_op(out, needs, move |g| {
            let batch = g.shape()[0];
            let mut dtheta = ArrayD::<f64>::zeros(IxDyn(&[batch, 2 * k]));
            for bi in 0..batch {
                for row in 0..h {
                    for col in 0..w {
                        let gx = g[[bi, row, col, 0]] * half_w;
                        let gy = g[[bi, row, col, 1]] * half_h;
                        for j in 0..k {
                            let b = basis[(row * w + col, j)];
                            dtheta[[bi, j]] += b * gx;
                            dtheta[[bi, k + j]] += b * gy;
                        }
                    }
                }
            }
            vec![(theta, dtheta)]
        })
    }
}

/// Solve for the dense grid (off-tape convenience mirroring [`TpsSolver::solve`]).
pub fn solve_tps(solver: &TpsSolver, params: &WarpParams) -> SamplingGrid {
    solver.solve(params)
}

/// Warp an image `[batch, c, h, w]` by a sampling grid (no gradients).
pub fn warp_image(image: &ArrayD<f64>, grid: &SamplingGrid) -> ArrayD<f64> {
    let tape = Tape::new();
    let x = tape.constant(image.clone());
    let g = tape.constant(grid.0.clone());
    tape.value_owned(tape.grid_sample_border(x, g))
}

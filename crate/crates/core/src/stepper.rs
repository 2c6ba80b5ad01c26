//! Allocation-free RK4 stepping of the covariance flow on flat buffers.
//!
//! The public API in [`crate::riccati`] works with `DMatrix`; this module
//! carries the hot loops. Matrices are column-major `Vec<f64>`. The right-hand
//! side is built symmetric by construction; after each step the smallest
//! eigenvalue is inspected and round-off negatives are clipped, so stored
//! states stay valid covariances.

use nalgebra::DMatrix;

use crate::gaussian::SystemMatrices;

/// Relative floor for eigenvalue clipping: eigenvalues below
/// `-TOL_PSD * trace/dim` mean the flow left the PSD cone for real.
pub const TOL_PSD: f64 = 1e-10;

/// Model matrices flattened for stepping, with transposes precomputed.
#[derive(Debug, Clone)]
pub(crate) struct FlatModel {
    pub dim: usize,
    pub channels: usize,
    a: Vec<f64>,   // dim×dim
    ct: Vec<f64>,  // dim×channels, C transposed
    nt: Vec<f64>,  // dim×channels, N transposed
    q: Vec<f64>,   // dim×dim
    eta: Vec<f64>, // channels
}

impl FlatModel {
    pub(crate) fn new(m: &SystemMatrices) -> Self {
        Self {
            dim: m.dim(),
            channels: m.channels(),
            a: m.a.as_slice().to_vec(),
            ct: m.c.transpose().as_slice().to_vec(),
            nt: m.n.transpose().as_slice().to_vec(),
            q: m.q.as_slice().to_vec(),
            eta: m.eta.as_slice().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StepOutcome {
    Ok,
    /// A round-off negative eigenvalue was clipped to zero.
    Clipped,
    /// Non-finite entries: the integration diverged.
    NonFinite,
    /// An eigenvalue fell below the clipping floor: not a covariance any more.
    Indefinite,
}

/// Reusable buffers for one integration thread.
pub(crate) struct Stepper {
    dim: usize,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
    gain: Vec<f64>,
    prod: Vec<f64>,
}

impl Stepper {
    pub(crate) fn new(dim: usize, channels: usize) -> Self {
        Self {
            dim,
            k1: vec![0.0; dim * dim],
            k2: vec![0.0; dim * dim],
            k3: vec![0.0; dim * dim],
            k4: vec![0.0; dim * dim],
            stage: vec![0.0; dim * dim],
            gain: vec![0.0; dim * channels],
            prod: vec![0.0; dim * dim],
        }
    }

    /// Covariance derivative. `backward` selects the retrodiction flow, which
    /// flips the drift sign and the sign in front of the cross-correlation.
    pub(crate) fn rhs(&mut self, out: &mut [f64], s: &[f64], mdl: &FlatModel, backward: bool) {
        let d = self.dim;
        debug_assert_eq!(d, mdl.dim);
        if d == 2 && mdl.channels == 1 {
            rhs_2x2_single(out, s, mdl, backward);
            return;
        }
        let m = mdl.channels;
        let nt_sign = if backward { 1.0 } else { -1.0 };
        // gain = S Cᵀ ∓ Nᵀ
        for k in 0..m {
            for i in 0..d {
                let mut acc = nt_sign * mdl.nt[i + k * d];
                for j in 0..d {
                    acc += s[i + j * d] * mdl.ct[j + k * d];
                }
                self.gain[i + k * d] = acc;
            }
        }
        // prod = A S
        for j in 0..d {
            for i in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += mdl.a[i + l * d] * s[l + j * d];
                }
                self.prod[i + j * d] = acc;
            }
        }
        let drift_sign = if backward { -1.0 } else { 1.0 };
        for j in 0..d {
            for i in 0..=j {
                let mut v = drift_sign * (self.prod[i + j * d] + self.prod[j + i * d])
                    + mdl.q[i + j * d];
                for k in 0..m {
                    v -= mdl.eta[k] * self.gain[i + k * d] * self.gain[j + k * d];
                }
                out[i + j * d] = v;
                out[j + i * d] = v;
            }
        }
    }

    /// One RK4 step with the model held fixed, then eigenvalue hygiene.
    pub(crate) fn step(
        &mut self,
        s: &mut [f64],
        mdl: &FlatModel,
        dt: f64,
        backward: bool,
    ) -> StepOutcome {
        let n = s.len();
        let mut k1 = std::mem::take(&mut self.k1);
        let mut k2 = std::mem::take(&mut self.k2);
        let mut k3 = std::mem::take(&mut self.k3);
        let mut k4 = std::mem::take(&mut self.k4);
        let mut stage = std::mem::take(&mut self.stage);

        self.rhs(&mut k1, s, mdl, backward);
        for i in 0..n {
            stage[i] = s[i] + 0.5 * dt * k1[i];
        }
        self.rhs(&mut k2, &stage, mdl, backward);
        for i in 0..n {
            stage[i] = s[i] + 0.5 * dt * k2[i];
        }
        self.rhs(&mut k3, &stage, mdl, backward);
        for i in 0..n {
            stage[i] = s[i] + dt * k3[i];
        }
        self.rhs(&mut k4, &stage, mdl, backward);
        let w = dt / 6.0;
        for i in 0..n {
            s[i] += w * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }

        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self.k4 = k4;
        self.stage = stage;

        fix_psd(s, self.dim)
    }

    /// Frobenius norm of the derivative at `s`; used as steady-state residual.
    pub(crate) fn rhs_norm(&mut self, s: &[f64], mdl: &FlatModel, backward: bool) -> f64 {
        let mut k1 = std::mem::take(&mut self.k1);
        self.rhs(&mut k1, s, mdl, backward);
        let norm = k1.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.k1 = k1;
        norm
    }
}

/// Unrolled right-hand side for one mode and one measurement channel.
fn rhs_2x2_single(out: &mut [f64], s: &[f64], mdl: &FlatModel, backward: bool) {
    let (s11, s12, s22) = (s[0], s[1], s[3]);
    let (a11, a21, a12, a22) = (mdl.a[0], mdl.a[1], mdl.a[2], mdl.a[3]);
    let (c1, c2) = (mdl.ct[0], mdl.ct[1]);
    let nt_sign = if backward { 1.0 } else { -1.0 };
    let g1 = s11 * c1 + s12 * c2 + nt_sign * mdl.nt[0];
    let g2 = s12 * c1 + s22 * c2 + nt_sign * mdl.nt[1];
    let eta = mdl.eta[0];
    let drift = if backward { -1.0 } else { 1.0 };
    let o11 = drift * 2.0 * (a11 * s11 + a12 * s12) + mdl.q[0] - eta * g1 * g1;
    let o12 = drift * (a11 * s12 + a12 * s22 + a21 * s11 + a22 * s12) + mdl.q[2] - eta * g1 * g2;
    let o22 = drift * 2.0 * (a21 * s12 + a22 * s22) + mdl.q[3] - eta * g2 * g2;
    out[0] = o11;
    out[1] = o12;
    out[2] = o12;
    out[3] = o22;
}

/// Detects non-finite states, clips round-off negative eigenvalues in
/// (-TOL_PSD·scale, 0) to zero and rejects anything below that floor.
fn fix_psd(s: &mut [f64], dim: usize) -> StepOutcome {
    match dim {
        1 => {
            let v = s[0];
            if !v.is_finite() {
                return StepOutcome::NonFinite;
            }
            if v >= 0.0 {
                StepOutcome::Ok
            } else if v >= -TOL_PSD {
                // No meaningful relative scale is left once a 1x1 covariance
                // goes negative; the absolute floor assumes O(1) units.
                s[0] = 0.0;
                StepOutcome::Clipped
            } else {
                StepOutcome::Indefinite
            }
        }
        2 => {
            let (s11, s12, s22) = (s[0], s[1], s[3]);
            let tr = s11 + s22;
            let half_gap = 0.5 * (s11 - s22);
            let disc = (half_gap * half_gap + s12 * s12).sqrt();
            let min_eig = 0.5 * tr - disc;
            if !min_eig.is_finite() {
                return StepOutcome::NonFinite;
            }
            if min_eig >= 0.0 {
                return StepOutcome::Ok;
            }
            let floor = -TOL_PSD * (0.5 * tr).max(f64::MIN_POSITIVE);
            if min_eig < floor {
                return StepOutcome::Indefinite;
            }
            // Rank-one correction S -= λ v vᵀ along the offending eigenvector.
            let (mut v1, mut v2) = if s12.abs() > 1e-300 {
                (s12, min_eig - s11)
            } else if s11 <= s22 {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            let norm = (v1 * v1 + v2 * v2).sqrt();
            v1 /= norm;
            v2 /= norm;
            s[0] -= min_eig * v1 * v1;
            s[1] -= min_eig * v1 * v2;
            s[2] = s[1];
            s[3] -= min_eig * v2 * v2;
            StepOutcome::Clipped
        }
        _ => {
            if s.iter().any(|v| !v.is_finite()) {
                return StepOutcome::NonFinite;
            }
            let mut mat = DMatrix::from_column_slice(dim, dim, s);
            let scale = (mat.trace() / dim as f64).max(f64::MIN_POSITIVE);
            match crate::linalg::clip_negative_eigs(&mut mat, -TOL_PSD * scale) {
                Ok(()) => {
                    s.copy_from_slice(mat.as_slice());
                    StepOutcome::Ok
                }
                Err(_) => StepOutcome::Indefinite,
            }
        }
    }
}

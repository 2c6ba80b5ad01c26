//! Phase-space description of continuously monitored linear Gaussian systems.
//!
//! Conventions: n bosonic modes with dimensionless quadratures ordered
//! (q_1, p_1, ..., q_n, p_n), commutation [q, p] = i encoded by the symplectic
//! form J, vacuum covariance I/2. A model is specified either directly through
//! [`SystemMatrices`] or through a quadratic Hamiltonian plus linear collapse
//! operators ([`CollapseSet`]), from which the drift, measurement, diffusion
//! and cross-correlation matrices follow.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

// ─── Symplectic structure ───────────────────────────────────────────────────

/// The symplectic form J for n modes: block-diagonal copies of [[0, 1], [-1, 0]].
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticForm {
    n_modes: usize,
    j: DMatrix<f64>,
}

impl SymplecticForm {
    pub fn new(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let dim = 2 * n_modes;
        let mut j = DMatrix::zeros(dim, dim);
        for k in 0..n_modes {
            j[(2 * k, 2 * k + 1)] = 1.0;
            j[(2 * k + 1, 2 * k)] = -1.0;
        }
        Ok(Self { n_modes, j })
    }

    /// Builds the form matching a 2n-dimensional covariance.
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidDimension(dim));
        }
        Self::new(dim / 2)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        2 * self.n_modes
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.j
    }
}

// ─── Moments and model matrices ─────────────────────────────────────────────

/// First and second moments of a Gaussian phase-space state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub t: f64,
}

impl GaussianMoments {
    /// Validates shapes, symmetry and positive semidefiniteness.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, t: f64) -> Result<Self> {
        let dim = linalg::check_square(&cov, "covariance")?;
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidDimension(dim));
        }
        if mean.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "mean has length {}, covariance is {dim}x{dim}",
                mean.len()
            )));
        }
        let scale = cov.trace() / dim as f64;
        linalg::check_symmetric(&cov, scale, "covariance")?;
        let floor = -1e-10 * scale.max(1.0);
        let min_eig = linalg::sym_min_eig(&cov);
        if min_eig < floor {
            return Err(Error::NotPsd { min_eig, floor });
        }
        Ok(Self { mean, cov, t })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Matrices of the moment equations for one drive value.
///
/// Mean drift `a` (2n×2n), measurement map `c` (m×2n), process diffusion `q`
/// (2n×2n, symmetric PSD), measurement/process cross-correlation `n` (m×2n)
/// and per-channel detection efficiencies `eta` (length m, entries in [0, 1],
/// stored as the diagonal they represent).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub eta: DVector<f64>,
}

impl SystemMatrices {
    pub fn validate(&self) -> Result<()> {
        let dim = linalg::check_square(&self.a, "drift")?;
        let m = self.c.nrows();
        if self.c.ncols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "measurement map is {}x{}, expected {m}x{dim}",
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        if self.q.nrows() != dim || self.q.ncols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "diffusion is {}x{}, expected {dim}x{dim}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.n.nrows() != m || self.n.ncols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "cross-correlation is {}x{}, expected {m}x{dim}",
                self.n.nrows(),
                self.n.ncols()
            )));
        }
        if self.eta.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "efficiencies have length {}, expected {m}",
                self.eta.len()
            )));
        }
        for &e in self.eta.iter() {
            if !(0.0..=1.0).contains(&e) || !e.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "detection efficiency {e} outside [0, 1]"
                )));
            }
        }
        let scale = self.q.trace().abs() / dim as f64;
        linalg::check_symmetric(&self.q, scale, "diffusion")?;
        Ok(())
    }

    /// Phase-space dimension 2n.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Number of measurement channels.
    pub fn channels(&self) -> usize {
        self.c.nrows()
    }
}

// ─── Collapse-operator construction ─────────────────────────────────────────

/// Quadratic Hamiltonian plus linear collapse operators.
///
/// `hamiltonian` is the symmetric 2n×2n quadratic form H in ½ xᵀH x. Column k
/// of `ops` holds the phase-space coefficients of the k-th collapse operator
/// c_k = ops[:, k]ᵀ x; `efficiencies` are the matching detector efficiencies.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseSet {
    pub hamiltonian: DMatrix<f64>,
    pub ops: DMatrix<Complex<f64>>,
    pub efficiencies: DVector<f64>,
}

/// Builds the moment-equation matrices generated by a [`CollapseSet`].
///
/// A = J(H + Im cc†), C = 2 Re(c)ᵀ, Q = J Re(cc†) Jᵀ, N = (J Im c)ᵀ, with c the
/// 2n×m matrix of operator coefficients. Q is PSD by construction (congruence
/// of the PSD matrix Re(cc†)).
pub fn matrices_from_collapse(set: &CollapseSet) -> Result<SystemMatrices> {
    let dim = linalg::check_square(&set.hamiltonian, "hamiltonian")?;
    let form = SymplecticForm::for_dim(dim)?;
    let scale = set.hamiltonian.trace().abs() / dim as f64;
    linalg::check_symmetric(&set.hamiltonian, scale, "hamiltonian")?;
    if set.ops.nrows() != dim {
        return Err(Error::ShapeMismatch(format!(
            "collapse coefficients are {}x{}, expected {dim} rows",
            set.ops.nrows(),
            set.ops.ncols()
        )));
    }
    let m = set.ops.ncols();
    if set.efficiencies.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "efficiencies have length {}, expected {m}",
            set.efficiencies.len()
        )));
    }

    let cc = &set.ops * set.ops.adjoint();
    let re_cc = cc.map(|z| z.re);
    let im_cc = cc.map(|z| z.im);
    let re_c = set.ops.map(|z| z.re);
    let im_c = set.ops.map(|z| z.im);
    let j = form.matrix();

    let a = j * (&set.hamiltonian + im_cc);
    let c = 2.0 * re_c.transpose();
    let mut q = j * re_cc * j.transpose();
    linalg::symmetrize(&mut q);
    let n = (j * im_c).transpose();

    let out = SystemMatrices {
        a,
        c,
        q,
        n,
        eta: set.efficiencies.clone(),
    };
    out.validate()?;
    Ok(out)
}

// ─── Uncertainty relation ───────────────────────────────────────────────────

/// Smallest eigenvalue of S + (i/2)J, the margin of the Robertson-Schrödinger
/// uncertainty relation. Non-negative for every physical covariance; zero for
/// pure Gaussian states.
///
/// Computed from the real symmetric embedding [[S, -J/2], [J/2, S]], whose
/// spectrum is the (doubled) spectrum of the Hermitian matrix S + (i/2)J.
pub fn uncertainty_margin(cov: &DMatrix<f64>) -> Result<f64> {
    let dim = linalg::check_square(cov, "covariance")?;
    let form = SymplecticForm::for_dim(dim)?;
    let scale = cov.trace() / dim as f64;
    linalg::check_symmetric(cov, scale, "covariance")?;
    let j = form.matrix();
    let mut emb = DMatrix::zeros(2 * dim, 2 * dim);
    emb.view_mut((0, 0), (dim, dim)).copy_from(cov);
    emb.view_mut((dim, dim), (dim, dim)).copy_from(cov);
    emb.view_mut((0, dim), (dim, dim)).copy_from(&(-0.5 * j));
    emb.view_mut((dim, 0), (dim, dim)).copy_from(&(0.5 * j));
    Ok(linalg::sym_min_eig(&emb))
}

/// Whether a covariance satisfies the uncertainty relation within `tol`.
pub fn check_uncertainty(cov: &DMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(uncertainty_margin(cov)? >= -tol)
}

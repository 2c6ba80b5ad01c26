//! Stochastic validation of the covariance pipeline: simulated measurement
//! records with an injected kick, conditional-mean filters running toward the
//! kick from both sides, and ensemble statistics of the per-trial estimates.
//!
//! The covariances never depend on the data, so a [`Simulator`] precomputes
//! both covariance legs and their innovation gains once and replays them for
//! every trial. Records are generated by Euler–Maruyama with independent
//! process and measurement noise, which is why models with cross-correlation
//! N ≠ 0 are rejected at construction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMoments, SystemMatrices};
use crate::impulse::{projected_variance, ImpulseProblem};
use crate::linalg::psd_sqrt;
use crate::ocp::{boundary_steady_state, ControlProtocol, PiecewiseSchedule};
use crate::riccati::{integrate, Direction, TimeGrid};
use crate::systems::ParametricModel;

// ─── Data types ─────────────────────────────────────────────────────────────

/// Measurement increments dY over one fine grid, reproducible from the seed
/// that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    grid: TimeGrid,
    dy: Vec<DVector<f64>>,
    seed: u64,
}

impl MeasurementRecord {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// One m-vector of measurement increments per grid step.
    pub fn increments(&self) -> &[DVector<f64>] {
        &self.dy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Conditional-mean trajectory on a contiguous block of fine-grid nodes,
/// stored in physical time order regardless of integration direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    times: Vec<f64>,
    means: Vec<DVector<f64>>,
}

impl MeanTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Mean at the earliest node of the block.
    pub fn first(&self) -> &DVector<f64> {
        &self.means[0]
    }

    /// Mean at the latest node of the block.
    pub fn last(&self) -> &DVector<f64> {
        self.means.last().expect("trajectory holds at least one node")
    }
}

/// One trial's kick estimate and the filter means it came from.
#[derive(Debug, Clone)]
pub struct TrialResult {
    /// nᵀ(r̂_back(t_p) − r̂_fwd(t_p)).
    pub alpha_hat: f64,
    pub delta_r_hat: DVector<f64>,
    pub r_fwd_tp: DVector<f64>,
    pub r_back_tp: DVector<f64>,
}

/// Ensemble summary of the kick-estimate errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleStats {
    pub trials: usize,
    /// Sample mean of α̂ − α.
    pub mean_error: f64,
    /// Sample variance of α̂ − α.
    pub var_error: f64,
    /// Projected variance nᵀ(Σ(t_p)+Π(t_p))n the ensemble is tested against.
    pub theoretical_var: f64,
    /// (var_error − theoretical_var) / (theoretical_var · √(2/trials)),
    /// the chi-square-normalized deviation of the sample variance.
    pub z_score: f64,
}

impl EnsembleStats {
    /// Aggregates trial results against a reference variance. Two-pass and
    /// order-independent.
    pub fn from_trials(
        results: &[TrialResult],
        alpha: f64,
        theoretical_var: f64,
    ) -> Result<Self> {
        if results.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "variance needs at least 2 trials, got {}",
                results.len()
            )));
        }
        if !(theoretical_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "reference variance must be positive, got {theoretical_var}"
            )));
        }
        let n = results.len() as f64;
        let mean_error = results.iter().map(|r| r.alpha_hat - alpha).sum::<f64>() / n;
        let var_error = results
            .iter()
            .map(|r| {
                let d = r.alpha_hat - alpha - mean_error;
                d * d
            })
            .sum::<f64>()
            / (n - 1.0);
        let z_score = (var_error - theoretical_var) / (theoretical_var * (2.0 / n).sqrt());
        Ok(Self {
            trials: results.len(),
            mean_error,
            var_error,
            theoretical_var,
            z_score,
        })
    }
}

// ─── Simulator ──────────────────────────────────────────────────────────────

/// Record generator and filter pair for one (model, protocol, problem)
/// triple. All covariance work happens in [`Simulator::new`]; the per-trial
/// methods only push means and noise through precomputed gains.
#[derive(Debug)]
pub struct Simulator {
    fine: TimeGrid,
    dt: f64,
    stride: usize,
    /// Fine-grid node index of the kick.
    j_p: usize,
    dim: usize,
    channels: usize,
    mats: Vec<SystemMatrices>,
    /// Process-noise factor per control interval, BBᵀ = Q.
    noise_factor: Vec<DMatrix<f64>>,
    sqrt_eta: DVector<f64>,
    sigma0: DMatrix<f64>,
    pi_end: DMatrix<f64>,
    sqrt_sigma0: DMatrix<f64>,
    /// Innovation gain Σ(t_j)Cᵀ√η per fine step j < j_p.
    gain_fwd: Vec<DMatrix<f64>>,
    /// Innovation gain Π(t_{j+1})Cᵀ√η per fine step j ≥ j_p, indexed j − j_p.
    gain_bwd: Vec<DMatrix<f64>>,
    kick: DVector<f64>,
    direction: DVector<f64>,
    alpha: f64,
    theoretical_var: f64,
}

fn scaled_gain(cov: &DMatrix<f64>, c: &DMatrix<f64>, sqrt_eta: &DVector<f64>) -> DMatrix<f64> {
    let mut g = cov * c.transpose();
    for (i, col) in g.column_iter_mut().enumerate() {
        let mut col = col;
        col *= sqrt_eta[i];
    }
    g
}

impl Simulator {
    /// Validates the triple, computes both covariance legs and freezes the
    /// per-step gains. `stride` is the number of fine steps per control
    /// interval, shared by records and covariances so they stay aligned.
    pub fn new(
        model: &ParametricModel,
        protocol: &ControlProtocol,
        problem: &ImpulseProblem,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidParameter("stride must be at least 1".into()));
        }
        let grid = protocol.grid();
        if grid.t0() != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "control grid must start at t = 0, got {}",
                grid.t0()
            )));
        }
        if (grid.t1() - problem.t_end()).abs() > 1e-9 * problem.t_end() {
            return Err(Error::InvalidGrid(format!(
                "control grid ends at {} but the horizon is {}",
                grid.t1(),
                problem.t_end()
            )));
        }
        let jc = grid.nearest_node(problem.t_p());
        if (grid.node(jc) - problem.t_p()).abs() > 1e-6 * grid.dt() {
            return Err(Error::InvalidGrid(format!(
                "kick time {} does not coincide with a control-grid node",
                problem.t_p()
            )));
        }
        if jc == 0 || jc == grid.steps() {
            return Err(Error::InvalidGrid(
                "kick time must be an interior control-grid node".into(),
            ));
        }

        let mats: Vec<SystemMatrices> = protocol
            .values()
            .iter()
            .map(|&p| model.matrices(p))
            .collect::<Result<_>>()?;
        let dim = mats[0].dim();
        let channels = mats[0].channels();
        if problem.direction().len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "kick direction has length {}, model dimension is {dim}",
                problem.direction().len()
            )));
        }
        for m in &mats {
            if m.n.iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidParameter(
                    "records draw independent process and measurement noise; \
                     cross-correlated models (N ≠ 0) are not supported"
                        .into(),
                ));
            }
        }

        let n_fine = grid.steps() * stride;
        let fine = TimeGrid::new(0.0, grid.t1(), n_fine)?;
        let dt = fine.dt();
        let j_p = jc * stride;

        let a_norm = mats
            .iter()
            .map(|m| m.a.norm())
            .fold(0.0f64, f64::max);
        if a_norm * dt >= 0.1 {
            log::warn!(
                "coarse Euler–Maruyama step: max ‖A‖·dt = {:.3} (want < 0.1); \
                 increase the stride or refine the control grid",
                a_norm * dt
            );
        }

        let noise_factor = mats
            .iter()
            .map(|m| {
                let floor = -1e-12 * (1.0 + m.q.norm());
                psd_sqrt(&m.q, floor)
            })
            .collect::<Result<Vec<_>>>()?;

        let sigma0_flat = boundary_steady_state(Direction::Forward, model, protocol.values()[0], dt)?;
        let sigma0 = DMatrix::from_column_slice(dim, dim, &sigma0_flat);
        let pi_flat = boundary_steady_state(
            Direction::Backward,
            model,
            protocol.values()[grid.steps() - 1],
            dt,
        )?;
        let pi_end = DMatrix::from_column_slice(dim, dim, &pi_flat);
        let sqrt_sigma0 = psd_sqrt(&sigma0, -1e-9 * (1.0 + sigma0.norm()))?;

        let sigma_leg = integrate(
            Direction::Forward,
            &sigma0,
            &PiecewiseSchedule {
                mats: &mats,
                stride,
                offset: 0,
            },
            &TimeGrid::new(0.0, fine.node(j_p), j_p)?,
        )?;
        let pi_leg = integrate(
            Direction::Backward,
            &pi_end,
            &PiecewiseSchedule {
                mats: &mats,
                stride,
                offset: j_p,
            },
            &TimeGrid::new(fine.node(j_p), fine.t1(), n_fine - j_p)?,
        )?;

        let sqrt_eta = mats[0].eta.map(f64::sqrt);
        let gain_fwd: Vec<DMatrix<f64>> = (0..j_p)
            .map(|j| scaled_gain(sigma_leg.at_node(j), &mats[j / stride].c, &sqrt_eta))
            .collect();
        let gain_bwd: Vec<DMatrix<f64>> = (j_p..n_fine)
            .map(|j| {
                scaled_gain(
                    pi_leg.at_node(j + 1 - j_p),
                    &mats[j / stride].c,
                    &sqrt_eta,
                )
            })
            .collect();

        let combined = sigma_leg.last() + pi_leg.at_node(0);
        let theoretical_var = projected_variance(&combined, problem.direction())?;

        Ok(Self {
            fine,
            dt,
            stride,
            j_p,
            dim,
            channels,
            mats,
            noise_factor,
            sqrt_eta,
            sigma0,
            pi_end,
            sqrt_sigma0,
            gain_fwd,
            gain_bwd,
            kick: problem.alpha() * problem.direction(),
            direction: problem.direction().clone(),
            alpha: problem.alpha(),
            theoretical_var,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.fine
    }

    /// Fine-grid node index where the kick is injected.
    pub fn kick_node(&self) -> usize {
        self.j_p
    }

    /// nᵀ(Σ(t_p)+Π(t_p))n, the variance the ensemble is tested against.
    pub fn theoretical_var(&self) -> f64 {
        self.theoretical_var
    }

    /// Zero-mean boundary state of the forward filter. Fails for models of
    /// odd dimension, which cannot form phase-space moments.
    pub fn initial_moments(&self) -> Result<GaussianMoments> {
        GaussianMoments::new(DVector::zeros(self.dim), self.sigma0.clone(), self.fine.t0())
    }

    /// Zero-mean boundary state of the backward filter.
    pub fn terminal_moments(&self) -> Result<GaussianMoments> {
        GaussianMoments::new(DVector::zeros(self.dim), self.pi_end.clone(), self.fine.t1())
    }

    /// Simulates one measurement record. Deterministic in the seed.
    pub fn simulate_record(&self, seed: u64) -> MeasurementRecord {
        self.simulate_with_truth(seed).0
    }

    /// Record plus the true trajectory that generated it, one state per node.
    /// The entry at the kick node already includes the kick.
    ///
    /// Draw order (fixed for reproducibility): `dim` normals for the initial
    /// state, then per step `channels` measurement normals followed by `dim`
    /// process normals.
    pub fn simulate_with_truth(&self, seed: u64) -> (MeasurementRecord, Vec<DVector<f64>>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sqrt_dt = self.dt.sqrt();
        let n_fine = self.fine.steps();

        let z0 = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &self.sqrt_sigma0 * z0;

        let mut dy = Vec::with_capacity(n_fine);
        let mut truth = Vec::with_capacity(n_fine + 1);
        for j in 0..n_fine {
            let k = j / self.stride;
            if j == self.j_p {
                x += &self.kick;
            }
            truth.push(x.clone());

            let mut incr = &self.mats[k].c * &x;
            for i in 0..self.channels {
                incr[i] = self.sqrt_eta[i] * incr[i] * self.dt
                    + sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            }
            dy.push(incr);

            let zw = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let drift = &self.mats[k].a * &x;
            x.axpy(self.dt, &drift, 1.0);
            x.gemv(sqrt_dt, &self.noise_factor[k], &zw, 1.0);
        }
        truth.push(x);

        (
            MeasurementRecord {
                grid: self.fine,
                dy,
                seed,
            },
            truth,
        )
    }

    fn check_record(&self, record: &MeasurementRecord) -> Result<()> {
        if record.grid != self.fine {
            return Err(Error::InvalidGrid(
                "record grid does not match the simulator's fine grid".into(),
            ));
        }
        if record.dy.len() != self.fine.steps()
            || record.dy.iter().any(|v| v.len() != self.channels)
        {
            return Err(Error::ShapeMismatch(format!(
                "record holds {} increments, expected {} of {} channel(s)",
                record.dy.len(),
                self.fine.steps(),
                self.channels
            )));
        }
        Ok(())
    }

    fn check_boundary(
        &self,
        moments: &GaussianMoments,
        want_cov: &DMatrix<f64>,
        want_t: f64,
        what: &str,
    ) -> Result<()> {
        if moments.mean.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{what} mean has length {}, model dimension is {}",
                moments.mean.len(),
                self.dim
            )));
        }
        let span = self.fine.t1() - self.fine.t0();
        if (moments.t - want_t).abs() > 1e-9 * span {
            return Err(Error::InvalidParameter(format!(
                "{what} is stamped t = {}, boundary is at {want_t}",
                moments.t
            )));
        }
        if (&moments.cov - want_cov).norm() > 1e-6 * (1.0 + want_cov.norm()) {
            return Err(Error::InvalidParameter(format!(
                "{what} covariance does not match the precomputed boundary covariance"
            )));
        }
        Ok(())
    }

    /// Conditional mean on [0, t_p] driven by the record:
    /// dr̂ = A r̂ dt + Σ(t)Cᵀ√η (dY − √η C r̂ dt).
    ///
    /// `init` must carry the forward boundary covariance; its mean seeds r̂.
    pub fn filter_forward(
        &self,
        record: &MeasurementRecord,
        init: &GaussianMoments,
    ) -> Result<MeanTrajectory> {
        self.check_record(record)?;
        self.check_boundary(init, &self.sigma0, self.fine.t0(), "forward initial state")?;
        self.forward_core(record, init.mean.clone())
    }

    /// Conditional mean on [t_p, T] driven by the record in reverse step
    /// order, integrating dr̂/dτ = −A r̂ + Π(t)Cᵀ√η (dY/dτ − √η C r̂) in
    /// backward time τ. Returned in physical time order.
    pub fn filter_backward(
        &self,
        record: &MeasurementRecord,
        terminal: &GaussianMoments,
    ) -> Result<MeanTrajectory> {
        self.check_record(record)?;
        self.check_boundary(terminal, &self.pi_end, self.fine.t1(), "backward terminal state")?;
        self.backward_core(record, terminal.mean.clone())
    }

    fn innovation(&self, dy: &DVector<f64>, r: &DVector<f64>, k: usize) -> DVector<f64> {
        let mut innov = &self.mats[k].c * r;
        for i in 0..self.channels {
            innov[i] = dy[i] - self.sqrt_eta[i] * innov[i] * self.dt;
        }
        innov
    }

    fn forward_core(&self, record: &MeasurementRecord, r0: DVector<f64>) -> Result<MeanTrajectory> {
        let mut r = r0;
        let mut means = Vec::with_capacity(self.j_p + 1);
        means.push(r.clone());
        for j in 0..self.j_p {
            let k = j / self.stride;
            let innov = self.innovation(&record.dy[j], &r, k);
            let drift = &self.mats[k].a * &r;
            r.axpy(self.dt, &drift, 1.0);
            r.gemv(1.0, &self.gain_fwd[j], &innov, 1.0);
            means.push(r.clone());
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: self.j_p,
                t: self.fine.node(self.j_p),
            });
        }
        let times = (0..=self.j_p).map(|j| self.fine.node(j)).collect();
        Ok(MeanTrajectory { times, means })
    }

    fn backward_core(
        &self,
        record: &MeasurementRecord,
        r_end: DVector<f64>,
    ) -> Result<MeanTrajectory> {
        let n_fine = self.fine.steps();
        let mut r = r_end;
        let mut means = Vec::with_capacity(n_fine - self.j_p + 1);
        means.push(r.clone());
        for j in (self.j_p..n_fine).rev() {
            let k = j / self.stride;
            let innov = self.innovation(&record.dy[j], &r, k);
            let drift = &self.mats[k].a * &r;
            r.axpy(-self.dt, &drift, 1.0);
            r.gemv(1.0, &self.gain_bwd[j - self.j_p], &innov, 1.0);
            means.push(r.clone());
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: self.j_p,
                t: self.fine.node(self.j_p),
            });
        }
        means.reverse();
        let times = (self.j_p..=n_fine).map(|j| self.fine.node(j)).collect();
        Ok(MeanTrajectory { times, means })
    }

    /// Runs both filters from zero-mean boundary states on their own data
    /// halves and differences the means at the kick node.
    pub fn estimate_impulse(&self, record: &MeasurementRecord) -> Result<TrialResult> {
        self.check_record(record)?;
        let fwd = self.forward_core(record, DVector::zeros(self.dim))?;
        let bwd = self.backward_core(record, DVector::zeros(self.dim))?;
        let r_fwd_tp = fwd.last().clone();
        let r_back_tp = bwd.first().clone();
        let delta_r_hat = &r_back_tp - &r_fwd_tp;
        let alpha_hat = self.direction.dot(&delta_r_hat);
        Ok(TrialResult {
            alpha_hat,
            delta_r_hat,
            r_fwd_tp,
            r_back_tp,
        })
    }

    /// One estimate per seed `base_seed + k`, in trial order. Trials run
    /// concurrently; a failing trial aborts with its index.
    pub fn run_trials(&self, trials: usize, base_seed: u64) -> Result<Vec<TrialResult>> {
        if trials == 0 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        (0..trials)
            .into_par_iter()
            .map(|k| {
                let record = self.simulate_record(base_seed.wrapping_add(k as u64));
                self.estimate_impulse(&record).map_err(|e| Error::TrialFailed {
                    trial: k,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Ensemble statistics of α̂ − α against the precomputed projected
    /// variance. Requires enough trials for the variance test to carry
    /// statistical weight.
    pub fn run_ensemble(&self, trials: usize, base_seed: u64) -> Result<EnsembleStats> {
        if trials < 100 {
            return Err(Error::InvalidParameter(format!(
                "ensemble statistics need at least 100 trials, got {trials}"
            )));
        }
        let results = self.run_trials(trials, base_seed)?;
        EnsembleStats::from_trials(&results, self.alpha, self.theoretical_var)
    }
}

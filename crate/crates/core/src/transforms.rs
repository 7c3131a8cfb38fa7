//! Sampling every `2n` stages: the sensors observe for `n` stages with zero
//! input, the controller acts during the next `n`, and the state at the period
//! boundary evolves as `x' = A_bar (x - x_hat) + w_bar` in real Jordan
//! coordinates, observed through `y = x + v_bar`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jordan::{JordanBlock, RealJordan};
use crate::linalg::{self, Matrix, Vector, RANK_TOL};
use crate::system::{observability_matrix, LinearSystem};

/// How the initial state of a period is recovered from its observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Invert a greedily chosen set of independent rows, earliest stages first.
    #[default]
    Subset,
    /// Minimum-norm least squares over every stacked row.
    Lsq,
}

/// One transmitting party: a set of sensors responsible for a range of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub sensors: Vec<usize>,
    pub coords: std::ops::Range<usize>,
    /// Maps the full observation window to the estimate of `coords`.
    pub estimator: Matrix,
    /// Rows of the channel's stacked observability matrix the estimator uses.
    pub rows_used: Vec<usize>,
}

/// The period-level system in transformed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSystem {
    pub n: usize,
    pub period: usize,
    pub a_bar: Matrix,
    /// `A^{2n}` in original coordinates.
    pub a_pow: Matrix,
    /// `x_bar = P x`.
    pub p: Matrix,
    pub p_inv: Matrix,
    pub blocks: Vec<JordanBlock>,
    pub channels: Vec<Channel>,
    pub estimator_kind: EstimatorKind,
    pub sigma_w_bar: Matrix,
    pub sigma_v_bar: Matrix,
    /// `Cov(w_bar, v_bar)` within one period.
    pub sigma_wv_bar: Matrix,
    /// `[w_bar; v_bar] = noise_map * z` for a standard normal `z` of length `raw_dim`.
    pub noise_map: Matrix,
    pub raw_dim: usize,
    /// Length of the full window: `n` stages of every sensor's outputs.
    pub window_len: usize,
    pub(crate) w_factor: Matrix,
    pub(crate) v_factor: Matrix,
}

/// Where a channel's coordinates live and which sensors feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub sensors: Vec<usize>,
    pub coords: std::ops::Range<usize>,
}

/// Greedy choice of independent rows, scanning in order.
pub fn select_rows(o: &Matrix, target_rank: usize) -> Vec<usize> {
    let scale = (0..o.nrows()).map(|i| o.row(i).norm()).fold(0.0, f64::max);
    let mut basis: Vec<Vector> = Vec::new();
    let mut picked = Vec::new();
    for i in 0..o.nrows() {
        if picked.len() == target_rank {
            break;
        }
        let mut r: Vector = o.row(i).transpose();
        for q in &basis {
            let d = q.dot(&r);
            r -= q * d;
        }
        let norm = r.norm();
        if norm > 1e-9 * scale.max(1e-300) {
            basis.push(r / norm);
            picked.push(i);
        }
    }
    picked
}

impl SampledSystem {
    /// Assemble from a transform of `A^{2n}` and a set of channels covering all coordinates.
    pub fn assemble(
        sys: &LinearSystem,
        transform: &RealJordan,
        a_bar: Matrix,
        specs: &[ChannelSpec],
        estimator_kind: EstimatorKind,
    ) -> Result<SampledSystem> {
        let n = sys.n();
        let period = 2 * n;
        let a_pow = linalg::mat_pow(&sys.a, period);
        let p = transform.p.clone();
        let p_inv = transform.p_inv.clone();
        let ptot = sys.total_outputs();
        let window_len = n * ptot;

        let mut covered = vec![false; n];
        let mut channels = Vec::with_capacity(specs.len());
        for spec in specs {
            for k in spec.coords.clone() {
                if covered[k] {
                    return Err(Error::Input(format!("coordinate {k} assigned to two channels")));
                }
                covered[k] = true;
            }
            channels.push(build_channel(sys, &p, spec, estimator_kind)?);
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Input("channels do not cover every coordinate".into()));
        }

        // raw noise: w_0..w_{2n-1} then v_0..v_{n-1}, each standardised
        let w_factor = linalg::psd_factor(&sys.sigma_w);
        let v_factor = linalg::psd_factor(&sys.sigma_v_all());
        let raw_dim = period * n + n * ptot;
        let mut w_tilde = Matrix::zeros(n, raw_dim);
        for i in 0..period {
            let gain = linalg::mat_pow(&sys.a, period - 1 - i) * &w_factor;
            w_tilde.view_mut((0, i * n), (n, n)).copy_from(&gain);
        }
        let all: Vec<usize> = (0..sys.num_sensors()).collect();
        let c_all = sys.stacked_c(&all);
        let mut window_noise = Matrix::zeros(window_len, raw_dim);
        for t in 0..n {
            for i in 0..t {
                let gain = &c_all * linalg::mat_pow(&sys.a, t - 1 - i) * &w_factor;
                window_noise.view_mut((t * ptot, i * n), (ptot, n)).copy_from(&gain);
            }
            window_noise
                .view_mut((t * ptot, period * n + t * ptot), (ptot, ptot))
                .copy_from(&v_factor);
        }
        let mut noise_map = Matrix::zeros(2 * n, raw_dim);
        noise_map.view_mut((0, 0), (n, raw_dim)).copy_from(&(&p * &w_tilde));
        for ch in &channels {
            let rows = &ch.estimator * &window_noise;
            noise_map
                .view_mut((n + ch.coords.start, 0), (ch.coords.len(), raw_dim))
                .copy_from(&rows);
        }
        let joint = &noise_map * noise_map.transpose();
        let sigma_w_bar = joint.view((0, 0), (n, n)).into_owned();
        let sigma_v_bar = joint.view((n, n), (n, n)).into_owned();
        let sigma_wv_bar = joint.view((0, n), (n, n)).into_owned();

        Ok(SampledSystem {
            n,
            period,
            a_bar,
            a_pow,
            p,
            p_inv,
            blocks: transform.blocks.clone(),
            channels,
            estimator_kind,
            sigma_w_bar,
            sigma_v_bar,
            sigma_wv_bar,
            noise_map,
            raw_dim,
            window_len,
            w_factor,
            v_factor,
        })
    }

    /// Draw `(w_bar, v_bar)` from a standard normal raw vector.
    pub fn noise_from_raw(&self, z: &Vector) -> (Vector, Vector) {
        let joint = &self.noise_map * z;
        (joint.rows(0, self.n).into_owned(), joint.rows(self.n, self.n).into_owned())
    }

    /// Estimate of the period's initial state in transformed coordinates.
    pub fn estimate_transformed(&self, window: &Vector) -> Result<Vector> {
        if window.len() != self.window_len {
            return Err(Error::Input(format!(
                "observation window has length {}, expected {}",
                window.len(),
                self.window_len
            )));
        }
        let mut out = Vector::zeros(self.n);
        for ch in &self.channels {
            out.rows_mut(ch.coords.start, ch.coords.len()).copy_from(&(&ch.estimator * window));
        }
        Ok(out)
    }

    /// Sampled eigenvalues of `A_bar` with multiplicity.
    pub fn eigenvalues(&self) -> Vec<num_complex::Complex64> {
        linalg::eigenvalues(&self.a_bar)
    }
}

fn build_channel(sys: &LinearSystem, p: &Matrix, spec: &ChannelSpec, kind: EstimatorKind) -> Result<Channel> {
    let n = sys.n();
    let o = observability_matrix(&sys.stacked_c(&spec.sensors), &sys.a);
    let target = p.rows(spec.coords.start, spec.coords.len()).into_owned();
    let r = linalg::rank(&o, RANK_TOL);
    let rows_used: Vec<usize> = match kind {
        EstimatorKind::Subset => select_rows(&o, r),
        EstimatorKind::Lsq => (0..o.nrows()).collect(),
    };
    let o_sel = Matrix::from_fn(rows_used.len(), n, |i, k| o[(rows_used[i], k)]);
    let coeff = &target * linalg::pinv(&o_sel, 1e-12);
    let residual = (&coeff * &o_sel - &target).norm() / target.norm().max(1e-300);
    if target.nrows() > 0 && residual > 1e-9 {
        return Err(Error::Structural(format!(
            "coordinates {:?} are not observable from sensors {:?} (residual {residual:.2e})",
            spec.coords, spec.sensors
        )));
    }
    // stacked-row index (stage t, k-th row among the channel's sensors) -> full-window column
    let ptot = sys.total_outputs();
    let mut column_of = Vec::with_capacity(o.nrows());
    for t in 0..n {
        for &j in &spec.sensors {
            let off = sys.output_offset(j);
            for r in 0..sys.sensors[j].outputs() {
                column_of.push(t * ptot + off + r);
            }
        }
    }
    let mut estimator = Matrix::zeros(spec.coords.len(), n * ptot);
    for (k, &row) in rows_used.iter().enumerate() {
        for i in 0..spec.coords.len() {
            estimator[(i, column_of[row])] += coeff[(i, k)];
        }
    }
    Ok(Channel { sensors: spec.sensors.clone(), coords: spec.coords.clone(), estimator, rows_used })
}

/// Single-channel sampled system: the listed sensors jointly estimate every coordinate.
pub fn build_sampled_system(
    sys: &LinearSystem,
    sensors: &[usize],
    estimator: EstimatorKind,
    transform: Option<&Matrix>,
) -> Result<SampledSystem> {
    if sensors.is_empty() || sensors.iter().any(|&j| j >= sys.num_sensors()) {
        return Err(Error::Input("sensor stack must list valid sensor indices".into()));
    }
    let o = observability_matrix(&sys.stacked_c(sensors), &sys.a);
    if linalg::rank(&o, RANK_TOL) < sys.n() {
        return Err(Error::Structural(format!("sensors {sensors:?} do not observe the full state")));
    }
    let rj = match transform {
        Some(p) => crate::jordan::to_real_jordan_with(&sys.a, p)?,
        None => crate::jordan::to_real_jordan(&sys.a)?,
    };
    let sampled = rj.power(2 * sys.n() as u32)?;
    let a_bar = sampled.j.clone();
    let spec = ChannelSpec { sensors: sensors.to_vec(), coords: 0..sys.n() };
    SampledSystem::assemble(sys, &sampled, a_bar, &[spec], estimator)
}

/// Estimate of `x_0` in original coordinates from the full window
/// `[y_0; ...; y_{n-1}]`, each stage stacking every sensor's outputs.
pub fn estimate_initial_state(samp: &SampledSystem, window: &Vector) -> Result<Vector> {
    Ok(&samp.p_inv * samp.estimate_transformed(window)?)
}

/// Minimum-norm split of an aggregate input over the `n` control stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRealization {
    /// `(n m) x n`; column `k` of `gains` splits the k-th unit aggregate.
    pub gains: Matrix,
    /// `[A^{n-1} B, ..., A B, B]`.
    pub reach: Matrix,
    m: usize,
}

impl ControlRealization {
    pub fn new(sys: &LinearSystem) -> Result<Self> {
        let n = sys.n();
        let m = sys.m();
        let mut reach = Matrix::zeros(n, n * m);
        for j in 0..n {
            let blk = linalg::mat_pow(&sys.a, n - 1 - j) * &sys.b;
            reach.view_mut((0, j * m), (n, m)).copy_from(&blk);
        }
        if linalg::rank(&reach, RANK_TOL) < n {
            return Err(Error::Structural("(A, B) is not controllable".into()));
        }
        Ok(ControlRealization { gains: linalg::pinv(&reach, 1e-12), reach, m })
    }

    /// Inputs `u_n, ..., u_{2n-1}` whose aggregate effect at the period end is `u_tilde`.
    pub fn split(&self, u_tilde: &Vector) -> Vec<Vector> {
        let stacked = &self.gains * u_tilde;
        (0..stacked.len() / self.m).map(|j| stacked.rows(j * self.m, self.m).into_owned()).collect()
    }
}

/// Inputs for the control stages realizing `-A_bar x_hat` (transformed coordinates).
pub fn realize_control(sys: &LinearSystem, samp: &SampledSystem, x_hat: &Vector) -> Result<Vec<Vector>> {
    if x_hat.len() != samp.n {
        return Err(Error::Input("estimate has the wrong dimension".into()));
    }
    let ctrl = ControlRealization::new(sys)?;
    Ok(ctrl.split(&(&samp.p_inv * (-(&samp.a_bar * x_hat)))))
}

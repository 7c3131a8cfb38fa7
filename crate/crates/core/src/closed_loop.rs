//! The coding and control loop on the sampled system, single- and multi-sensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::decomposition::{self, BlockDecomposition, EigenspaceCheck};
use crate::error::{Error, Result};
use crate::jordan::{self, JordanBlock, RealJordan};
use crate::linalg::{self, Matrix, Vector};
use crate::quantizer::{self, BinMode, BinState, ScalarQuantizerConfig, Symbol, ZoomParams};
use crate::system::{check_assumptions, GaussianSource, LinearSystem};
use crate::transforms::{self, ChannelSpec, ControlRealization, EstimatorKind, SampledSystem};

/// How several sensors share the work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum MultiSensorPolicy {
    /// Each Jordan block is coded by the first sensor whose observable subspace contains it.
    Eigenspace,
    /// Block upper-triangular decomposition; `None` searches for a decreasing order.
    BlockTriangular { order: Option<Vec<usize>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// One encoder with access to the listed sensors (empty means all).
    SingleSensor { sensors: Vec<usize> },
    MultiSensor(MultiSensorPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub zoom: ZoomParams<f64>,
    pub horizon: usize,
    pub mode: LoopMode,
    /// Sampled steps between feedback bits; only 1 is supported.
    pub feedback_period: usize,
    /// Small-set radius `F`; defaults to twice the largest floor `L^i`.
    pub f_radius: Option<f64>,
    /// Leading bin size of every block; sized from the initial distribution when absent.
    pub delta0: Option<f64>,
    /// Per-component bin counts overriding the eigenvalue rule.
    pub bins: Option<Vec<u32>>,
    /// Lattice step `ell` for bin sizes.
    pub lattice: Option<f64>,
    pub estimator: EstimatorKind,
    /// Caller-supplied real Jordan transform of `A`.
    pub transform: Option<Matrix>,
    /// Skip the control input (baseline runs).
    pub open_loop: bool,
    /// Probability that the first observation is perfectly zoomed.
    pub coverage: f64,
    /// When set, the leading bin size is also made large enough that, at the
    /// floor, one step of noise fits in the spare range with this many
    /// standard deviations.
    pub noise_margin: Option<f64>,
    /// State norm treated as divergence.
    pub divergence_limit: f64,
}

impl LoopConfig {
    pub fn new(horizon: usize) -> Self {
        LoopConfig {
            zoom: ZoomParams::standard(),
            horizon,
            mode: LoopMode::SingleSensor { sensors: Vec::new() },
            feedback_period: 1,
            f_radius: None,
            delta0: None,
            bins: None,
            lattice: None,
            estimator: EstimatorKind::Subset,
            transform: None,
            open_loop: false,
            coverage: 0.999,
            noise_margin: None,
            divergence_limit: 1e150,
        }
    }
}

/// Quantizer settings of one Jordan block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockQuantizer {
    pub start: usize,
    pub dim: usize,
    pub mode: BinMode,
    /// Modulus driving the zoom factors (sampled eigenvalue, or its coupled bound).
    pub lam: f64,
    pub ks: Vec<u32>,
    pub zoom: ZoomParams<f64>,
}

/// Everything a trial needs, resolved once.
#[derive(Debug, Clone)]
pub struct LoopPlan {
    pub sampled: SampledSystem,
    pub quantizers: Vec<BlockQuantizer>,
    pub ks: Vec<u32>,
    pub lam: Vec<f64>,
    pub initial_bins: BinState<f64>,
    pub floor: Vec<f64>,
    pub floor_bar: Vec<f64>,
    pub f_radius: f64,
    pub horizon: usize,
    pub open_loop: bool,
    pub multi_sensor: bool,
    pub num_sensors: usize,
    /// First component of each block, the coordinates the drift analysis tracks.
    pub leaders: Vec<usize>,
    pub divergence_limit: f64,
    pub initial_mean: Vector,
    pub initial_factor: Matrix,
    pub decomposition: Option<BlockDecomposition>,
    system: LinearSystem,
    control: Option<ControlRealization>,
}

fn coverage_quantile(coverage: f64, n: usize) -> Result<f64> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Config("coverage must lie in (0, 1)".into()));
    }
    let tail = (1.0 - coverage) / (2.0 * n as f64);
    Ok(Normal::standard().inverse_cdf(1.0 - tail))
}

fn transform_of(sys: &LinearSystem, cfg: &LoopConfig) -> Result<RealJordan> {
    match &cfg.transform {
        Some(p) => jordan::to_real_jordan_with(&sys.a, p),
        None => jordan::to_real_jordan(&sys.a),
    }
}

impl LoopPlan {
    pub fn new(sys: &LinearSystem, cfg: &LoopConfig) -> Result<LoopPlan> {
        cfg.zoom.validate()?;
        if cfg.feedback_period != 1 {
            return Err(Error::Config("feedback must be sent every sampled step (feedback_period = 1)".into()));
        }
        if !(cfg.divergence_limit > 0.0) {
            return Err(Error::Config("divergence limit must be positive".into()));
        }
        check_assumptions(sys).require_policy_conditions()?;
        let n = sys.n();
        let period = (2 * n) as u32;

        // sampled system, its blocks, and the modulus each block is coded against
        let (sampled, block_lam, multi_sensor, decomposition) = match &cfg.mode {
            LoopMode::SingleSensor { sensors } => {
                let stack: Vec<usize> = if sensors.is_empty() { (0..sys.num_sensors()).collect() } else { sensors.clone() };
                let s = transforms::build_sampled_system(sys, &stack, cfg.estimator, cfg.transform.as_ref())?;
                let lam = s.blocks.iter().map(JordanBlock::modulus).collect::<Vec<_>>();
                (s, lam, false, None)
            }
            LoopMode::MultiSensor(MultiSensorPolicy::Eigenspace) => {
                let rj = transform_of(sys, cfg)?;
                let asg = match decomposition::assign_eigenspaces(sys, &rj) {
                    EigenspaceCheck::Assigned(a) => a,
                    EigenspaceCheck::Violated { unassigned } => {
                        return Err(Error::Structural(format!(
                            "Jordan blocks {unassigned:?} are not contained in any single sensor's observable subspace"
                        )))
                    }
                };
                let powered = asg.jordan.power(period)?;
                let mut specs: Vec<ChannelSpec> = Vec::new();
                for (blk, &j) in powered.blocks.iter().zip(&asg.block_sensor) {
                    match specs.last_mut() {
                        Some(spec) if spec.sensors == [j] => spec.coords.end = blk.start + blk.dim,
                        _ => specs.push(ChannelSpec { sensors: vec![j], coords: blk.range() }),
                    }
                }
                let a_bar = powered.j.clone();
                let s = SampledSystem::assemble(sys, &powered, a_bar, &specs, cfg.estimator)?;
                let lam = s.blocks.iter().map(JordanBlock::modulus).collect::<Vec<_>>();
                (s, lam, true, None)
            }
            LoopMode::MultiSensor(MultiSensorPolicy::BlockTriangular { order }) => {
                let d = match order {
                    Some(o) => decomposition::build_block_decomposition(sys, o)?,
                    None => match decomposition::search_decreasing_order(sys)? {
                        Some(d) => d,
                        None => {
                            let o: Vec<usize> = (0..sys.num_sensors()).collect();
                            decomposition::build_block_decomposition(sys, &o)?
                        }
                    },
                };
                let (s, lam) = block_triangular_system(sys, &d, period, cfg.estimator)?;
                (s, lam, true, Some(d))
            }
        };

        // per-block quantizers
        let z = coverage_quantile(cfg.coverage, n)?;
        let y0_mean = &sampled.p * &sys.mu_x0;
        let y0_cov = &sampled.p * &sys.sigma_x0 * sampled.p.transpose() + &sampled.sigma_v_bar;
        let mut quantizers = Vec::with_capacity(sampled.blocks.len());
        let mut ks = vec![0u32; n];
        let mut lam = vec![0.0; n];
        let mut delta = vec![0.0; n];
        let mut floor = vec![0.0; n];
        let mut exponents = vec![0i64; n];
        // bottom-up, so that the error a lower block feeds upward is known when sizing
        for (blk, &l) in sampled.blocks.iter().zip(&block_lam).rev() {
            if l <= 1.0 {
                return Err(Error::Unsupported("sampled eigenvalue modulus must exceed 1".into()));
            }
            let mode = if blk.complex { BinMode::Complex } else { BinMode::Real };
            let block_ks: Vec<u32> = match &cfg.bins {
                Some(k) => {
                    if k.len() != n {
                        return Err(Error::Config(format!("bin override lists {} counts, expected {n}", k.len())));
                    }
                    for &kk in &k[blk.range()] {
                        ScalarQuantizerConfig::new(kk).map_err(|e| Error::Config(e.to_string()))?;
                    }
                    k[blk.range()].to_vec()
                }
                None => vec![ScalarQuantizerConfig::for_eigenvalue(l, cfg.zoom.epsilon)?.k; blk.dim],
            };
            let zoom = match cfg.lattice {
                Some(ell) => quantizer::snap_to_lattice(&cfg.zoom, l, ell)?,
                None => cfg.zoom.clone(),
            };
            // ladder shape, then the leading size that covers the first observation
            let (shape, _) = quantizer::init_bins(1.0, blk.dim, mode, &ZoomParams { lattice: None, ..zoom.clone() })?;
            let lead = match cfg.delta0 {
                Some(d) => d,
                None => blk
                    .range()
                    .map(|i| {
                        let half = (block_ks[i - blk.start] / 2) as f64;
                        (y0_mean[i].abs() + z * y0_cov[(i, i)].max(0.0).sqrt()) / (half * shape.delta[i - blk.start])
                    })
                    .fold(0.0, f64::max),
            };
            let lead = lead.max(reach_lead(&sampled, blk, &block_ks, &shape.delta, &delta, cfg.noise_margin)?);
            if !(lead > 0.0 && lead.is_finite()) {
                return Err(Error::Config(
                    "initial bin size is zero; give delta0 when the initial observation is deterministic at 0".into(),
                ));
            }
            let (bins, zoom) = quantizer::init_bins(lead, blk.dim, mode, &zoom)?;
            for i in blk.range() {
                let k = i - blk.start;
                ks[i] = block_ks[k];
                lam[i] = l;
                delta[i] = bins.delta[k];
                floor[i] = zoom.floor[k];
                if let Some(e) = &bins.lattice_exponents {
                    exponents[i] = e[k];
                }
            }
            quantizers.push(BlockQuantizer { start: blk.start, dim: blk.dim, mode, lam: l, ks: block_ks, zoom });
        }
        quantizers.reverse();
        let floor_bar: Vec<f64> = quantizers.iter().flat_map(|q| q.zoom.floor_bar(q.lam)).collect();
        let f_radius = match cfg.f_radius {
            Some(f) => f,
            None => 2.0 * floor.iter().copied().fold(0.0, f64::max),
        };
        let max_floor = floor.iter().copied().fold(0.0, f64::max);
        if !(f_radius > max_floor) {
            return Err(Error::Config(format!("F = {f_radius} must exceed the largest floor {max_floor}")));
        }
        let leaders = quantizers.iter().map(|q| q.start).collect();
        let control = if cfg.open_loop { None } else { Some(ControlRealization::new(sys)?) };
        Ok(LoopPlan {
            initial_mean: y0_mean,
            initial_factor: &sampled.p * linalg::psd_factor(&sys.sigma_x0),
            initial_bins: BinState {
                delta,
                lattice_exponents: if cfg.lattice.is_some() { Some(exponents) } else { None },
            },
            sampled,
            quantizers,
            ks,
            lam,
            floor,
            floor_bar,
            f_radius,
            horizon: cfg.horizon,
            open_loop: cfg.open_loop,
            multi_sensor,
            num_sensors: sys.num_sensors(),
            leaders,
            divergence_limit: cfg.divergence_limit,
            decomposition,
            system: sys.clone(),
            control,
        })
    }

    pub fn n(&self) -> usize {
        self.sampled.n
    }

    /// Feedback bits per sampled step.
    pub fn feedback_bits(&self) -> usize {
        if self.multi_sensor {
            self.num_sensors
        } else {
            0
        }
    }

    /// Zoom update applied block by block.
    pub fn update_bins(&self, overflow: bool, bins: &BinState<f64>) -> BinState<f64> {
        let mut delta = Vec::with_capacity(bins.len());
        let mut exps = Vec::new();
        for q in &self.quantizers {
            let r = q.start..q.start + q.dim;
            let part = BinState {
                delta: bins.delta[r.clone()].to_vec(),
                lattice_exponents: bins.lattice_exponents.as_ref().map(|e| e[r.clone()].to_vec()),
            };
            let next = quantizer::zoom_update(overflow, &part, &q.zoom, &vec![q.lam; q.dim]);
            delta.extend(next.delta);
            if let Some(e) = next.lattice_exponents {
                exps.extend(e);
            }
        }
        BinState { delta, lattice_exponents: bins.lattice_exponents.as_ref().map(|_| exps) }
    }

    /// Initial sampled state from a standard normal draw.
    pub fn initial_state(&self, z: &Vector) -> Vector {
        &self.initial_mean + &self.initial_factor * z
    }

    pub fn fresh_state(&self, x0: Vector) -> ClosedLoopState {
        let locals = self
            .sampled
            .channels
            .iter()
            .map(|ch| slice_bins(&self.initial_bins, ch.coords.clone()))
            .collect();
        ClosedLoopState { x: x0, bins: self.initial_bins.clone(), sensor_bins: locals, x_hat: Vector::zeros(self.n()), step: 0 }
    }

    /// Encode, decode and update bins for one observation.
    pub fn decide(&self, state: &ClosedLoopState, y: &Vector) -> Result<Decision> {
        let n = self.n();
        let mut digits = vec![0u32; n];
        let mut sensor_symbols = Vec::with_capacity(self.sampled.channels.len());
        let mut sensor_side = Vector::zeros(n);
        for (c, ch) in self.sampled.channels.iter().enumerate() {
            let r = ch.coords.clone();
            let ys: Vec<f64> = y.rows(r.start, r.len()).iter().copied().collect();
            let d = quantizer::encode_components(&ys, &state.sensor_bins[c], &self.ks[r.clone()])?;
            let sym = quantizer::combine_symbols(&d, &self.ks[r.clone()])?;
            let own = quantizer::vector_decode(sym, &state.sensor_bins[c], &self.ks[r.clone()])?;
            for (k, i) in r.clone().enumerate() {
                digits[i] = d[k];
                sensor_side[i] = own[k];
            }
            sensor_symbols.push(sym);
        }
        let zoomed = sensor_symbols.iter().all(|&s| s != 0);
        let q = quantizer::combine_symbols(&digits, &self.ks)?;
        // controller side: decode each channel's symbol against its own copy of the bins
        let mut x_hat = Vector::zeros(n);
        if zoomed {
            for (ch, &sym) in self.sampled.channels.iter().zip(&sensor_symbols) {
                let r = ch.coords.clone();
                let local = slice_bins(&state.bins, r.clone());
                let dec = quantizer::vector_decode(sym, &local, &self.ks[r.clone()])?;
                x_hat.rows_mut(r.start, r.len()).copy_from_slice(&dec);
            }
            if x_hat != sensor_side {
                return Err(Error::Numeric("sensor and controller bin states diverged".into()));
            }
        }
        let bins = self.update_bins(!zoomed, &state.bins);
        let sensor_bins = self
            .sampled
            .channels
            .iter()
            .zip(&state.sensor_bins)
            .map(|(ch, local)| {
                // the broadcast bit alone drives every sensor's copy
                let sub = LoopPlan { quantizers: self.sub_quantizers(ch.coords.clone()), ..self.light_clone() };
                sub.update_bins(!zoomed, local)
            })
            .collect();
        Ok(Decision { x_hat, digits, sensor_symbols, q, zoomed, bins, sensor_bins })
    }

    fn sub_quantizers(&self, r: std::ops::Range<usize>) -> Vec<BlockQuantizer> {
        self.quantizers
            .iter()
            .filter(|q| q.start >= r.start && q.start + q.dim <= r.end)
            .map(|q| BlockQuantizer { start: q.start - r.start, ..q.clone() })
            .collect()
    }

    fn light_clone(&self) -> LoopPlan {
        LoopPlan { quantizers: Vec::new(), ..self.clone() }
    }

    /// One sampled step driven by a standard normal raw draw of length `sampled.raw_dim`.
    pub fn loop_step(&self, state: &ClosedLoopState, z: &Vector) -> Result<(ClosedLoopState, Decision, Vector)> {
        let (w_bar, v_bar) = self.sampled.noise_from_raw(z);
        self.step_with_noise(state, &w_bar, &v_bar)
    }

    /// One sampled step with explicit `(w_bar, v_bar)`. Returns the observation as well.
    pub fn step_with_noise(
        &self,
        state: &ClosedLoopState,
        w_bar: &Vector,
        v_bar: &Vector,
    ) -> Result<(ClosedLoopState, Decision, Vector)> {
        let y = &state.x + v_bar;
        let dec = self.decide(state, &y)?;
        let a = &self.sampled.a_bar;
        let x = if self.open_loop { a * &state.x + w_bar } else { a * (&state.x - &dec.x_hat) + w_bar };
        self.check_state(&x, state.step + 1)?;
        let next = ClosedLoopState {
            x,
            bins: dec.bins.clone(),
            sensor_bins: dec.sensor_bins.clone(),
            x_hat: dec.x_hat.clone(),
            step: state.step + 1,
        };
        Ok((next, dec, y))
    }

    fn check_state(&self, x: &Vector, step: usize) -> Result<()> {
        let norm = x.norm();
        if !norm.is_finite() || norm > self.divergence_limit {
            return Err(Error::Numeric(format!("state diverged at step {step} (norm {norm:.3e})")));
        }
        Ok(())
    }

    /// Closed-loop trial on the sampled system.
    pub fn run_trial(&self, seed: u64, trial: usize) -> RunReport {
        let mut src = GaussianSource::new(seed, trial as u64);
        let x0 = self.initial_state(&src.standard_vector(self.n()));
        let mut report = RunReport::new(self, seed, trial);
        let mut state = self.fresh_state(x0);
        report.push_state(&state);
        for _ in 0..self.horizon {
            let z = src.standard_vector(self.sampled.raw_dim);
            match self.loop_step(&state, &z) {
                Ok((next, dec, y)) => {
                    report.push_step(&dec, &y, self.multi_sensor);
                    state = next;
                    report.push_state(&state);
                }
                Err(e) => {
                    report.aborted = Some(e.to_string());
                    break;
                }
            }
        }
        report
    }

    /// Same trial simulated stage by stage on the original plant, with the
    /// sensors' windows, the estimator and the realized inputs. Draws the same
    /// random numbers as [`LoopPlan::run_trial`].
    pub fn run_plant_trial(&self, seed: u64, trial: usize) -> Result<RunReport> {
        let sys = &self.system;
        let n = self.n();
        let samp = &self.sampled;
        let ptot = sys.total_outputs();
        let all: Vec<usize> = (0..sys.num_sensors()).collect();
        let c_all = sys.stacked_c(&all);
        let mut src = GaussianSource::new(seed, trial as u64);
        let z0 = src.standard_vector(n);
        let x0 = &sys.mu_x0 + linalg::psd_factor(&sys.sigma_x0) * z0;
        let mut x = x0;
        let mut report = RunReport::new(self, seed, trial);
        let mut state = self.fresh_state(&samp.p * &x);
        report.push_state(&state);
        let zero_u = Vector::zeros(sys.m());
        for _ in 0..self.horizon {
            let z = src.standard_vector(samp.raw_dim);
            let w = |i: usize| &samp.w_factor * z.rows(i * n, n);
            let mut window = Vector::zeros(samp.window_len);
            let mut inputs: Vec<Vector> = Vec::new();
            let mut dec = None;
            let mut y = Vector::zeros(n);
            for t in 0..2 * n {
                if t < n {
                    let v = &samp.v_factor * z.rows(samp.period * n + t * ptot, ptot);
                    window.rows_mut(t * ptot, ptot).copy_from(&(&c_all * &x + v));
                }
                if t == n {
                    y = samp.estimate_transformed(&window)?;
                    let d = self.decide(&state, &y)?;
                    if let Some(ctrl) = &self.control {
                        inputs = ctrl.split(&(&samp.p_inv * -(&samp.a_bar * &d.x_hat)));
                    }
                    dec = Some(d);
                }
                let u = if t >= n && !inputs.is_empty() { inputs[t - n].clone() } else { zero_u.clone() };
                x = sys.step(&x, &u, &w(t))?;
            }
            let d = dec.expect("decision made at stage n");
            let xs = &samp.p * &x;
            if let Err(e) = self.check_state(&xs, state.step + 1) {
                report.aborted = Some(e.to_string());
                break;
            }
            report.push_step(&d, &y, self.multi_sensor);
            state = ClosedLoopState {
                x: xs,
                bins: d.bins.clone(),
                sensor_bins: d.sensor_bins.clone(),
                x_hat: d.x_hat.clone(),
                step: state.step + 1,
            };
            report.push_state(&state);
        }
        Ok(report)
    }

    /// Independent trials in parallel, returned in trial order.
    pub fn run_trials(&self, seed: u64, trials: usize) -> Vec<RunReport> {
        (0..trials).into_par_iter().map(|t| self.run_trial(seed, t)).collect()
    }

    /// Bits per sampled step under componentwise accounting.
    pub fn bits_per_period(&self) -> f64 {
        self.feedback_bits() as f64 + self.ks.iter().map(|&k| ((k + 1) as f64).log2()).sum::<f64>()
    }
}

/// Leading size at which every component keeps enough spare range at the floor
/// for the error pushed in from lower blocks plus, with a margin `z`, `z`
/// standard deviations of the one-step noise. The state error is the
/// quantization error minus `v_bar`, so that noise is `w_bar - A_bar v_bar + v_bar'`.
/// `lower` holds the sizes already chosen below this block.
fn reach_lead(samp: &SampledSystem, blk: &JordanBlock, ks: &[u32], shape: &[f64], lower: &[f64], z: Option<f64>) -> Result<f64> {
    if let Some(z) = z {
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Config("noise margin must be positive".into()));
        }
    }
    let a = &samp.a_bar;
    let cross = a * samp.sigma_wv_bar.transpose();
    let cov = &samp.sigma_w_bar + a * &samp.sigma_v_bar * a.transpose() - &cross - cross.transpose() + &samp.sigma_v_bar;
    let end = blk.start + blk.dim;
    let mut lead: f64 = 0.0;
    for i in blk.range() {
        let k = i - blk.start;
        let pushed: f64 = (end..samp.n).map(|j| a[(i, j)].abs() * lower[j]).sum::<f64>() / 2.0;
        let noise = z.map_or(0.0, |z| z * cov[(i, i)].max(0.0).sqrt());
        if pushed + noise == 0.0 {
            continue;
        }
        let reach: f64 = blk.range().map(|j| a[(i, j)].abs() * shape[j - blk.start]).sum::<f64>() / 2.0;
        let spare = (ks[k] / 2) as f64 * shape[k] - reach;
        if spare <= 0.0 {
            return Err(Error::Config(format!(
                "component {i} has no spare range at the floor; a smaller bin ratio delta or larger K is needed"
            )));
        }
        lead = lead.max((pushed + noise) / spare);
    }
    Ok(lead)
}

fn slice_bins(bins: &BinState<f64>, r: std::ops::Range<usize>) -> BinState<f64> {
    BinState {
        delta: bins.delta[r.clone()].to_vec(),
        lattice_exponents: bins.lattice_exponents.as_ref().map(|e| e[r].to_vec()),
    }
}

fn block_triangular_system(
    sys: &LinearSystem,
    d: &BlockDecomposition,
    period: u32,
    estimator: EstimatorKind,
) -> Result<(SampledSystem, Vec<f64>)> {
    let n = sys.n();
    let inherited = d.inherited_moduli();
    let mut t = Matrix::zeros(n, n);
    let mut blocks = Vec::new();
    let mut lam = Vec::new();
    let mut specs = Vec::new();
    for (k, blk) in d.blocks.iter().enumerate() {
        if blk.dim == 0 {
            continue;
        }
        let own = d.a_bar.view((blk.start, blk.start), (blk.dim, blk.dim)).into_owned();
        let rj = jordan::to_real_jordan(&own)?.power(period)?;
        t.view_mut((blk.start, 0), (blk.dim, n)).copy_from(&(&rj.p * d.q.rows(blk.start, blk.dim)));
        for b in &rj.blocks {
            // a lower block feeding this one sets a floor on the growth to code against
            let root = b.modulus().powf(1.0 / period as f64);
            lam.push(if inherited[k] > root { inherited[k].powi(period as i32) } else { b.modulus() });
            blocks.push(JordanBlock { start: blk.start + b.start, ..*b });
        }
        specs.push(ChannelSpec { sensors: vec![blk.sensor], coords: blk.start..blk.start + blk.dim });
    }
    let t_inv = linalg::inverse(&t)?;
    let a_bar = &t * linalg::mat_pow(&sys.a, period as usize) * &t_inv;
    let rj = RealJordan { p: t, p_inv: t_inv, j: a_bar.clone(), blocks };
    Ok((SampledSystem::assemble(sys, &rj, a_bar, &specs, estimator)?, lam))
}

/// Controller and sensor state between sampled steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub x: Vector,
    pub bins: BinState<f64>,
    /// Each channel's own copy of its bin sizes.
    pub sensor_bins: Vec<BinState<f64>>,
    pub x_hat: Vector,
    pub step: usize,
}

/// Outcome of quantizing one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub x_hat: Vector,
    pub digits: Vec<u32>,
    pub sensor_symbols: Vec<Symbol>,
    pub q: Symbol,
    pub zoomed: bool,
    pub bins: BinState<f64>,
    pub sensor_bins: Vec<BinState<f64>>,
}

/// Trajectory and channel log of one trial, stored as flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub channels: usize,
    /// `x_0, ..., x_S` (row-major, `n` per step).
    pub x: Vec<f64>,
    /// `Delta_0, ..., Delta_S`.
    pub delta: Vec<f64>,
    /// Observations `y_0, ..., y_{S-1}`.
    pub y: Vec<f64>,
    pub q: Vec<Symbol>,
    pub sensor_symbols: Vec<Symbol>,
    pub zoomed: Vec<bool>,
    /// Feedback bits, multi-sensor runs only.
    pub feedback: Vec<u8>,
    pub ks: Vec<u32>,
    pub feedback_bits: usize,
    pub aborted: Option<String>,
}

impl RunReport {
    fn new(plan: &LoopPlan, seed: u64, trial: usize) -> Self {
        RunReport {
            trial,
            seed,
            n: plan.n(),
            channels: plan.sampled.channels.len(),
            x: Vec::new(),
            delta: Vec::new(),
            y: Vec::new(),
            q: Vec::new(),
            sensor_symbols: Vec::new(),
            zoomed: Vec::new(),
            feedback: Vec::new(),
            ks: plan.ks.clone(),
            feedback_bits: plan.feedback_bits(),
            aborted: None,
        }
    }

    fn push_state(&mut self, s: &ClosedLoopState) {
        self.x.extend(s.x.iter());
        self.delta.extend(&s.bins.delta);
    }

    fn push_step(&mut self, d: &Decision, y: &Vector, multi: bool) {
        self.y.extend(y.iter());
        self.q.push(d.q);
        self.sensor_symbols.extend(&d.sensor_symbols);
        self.zoomed.push(d.zoomed);
        if multi {
            self.feedback.push(u8::from(d.zoomed));
        }
    }

    /// Number of completed sampled steps.
    pub fn steps(&self) -> usize {
        self.q.len()
    }

    pub fn state(&self, s: usize) -> &[f64] {
        &self.x[s * self.n..(s + 1) * self.n]
    }

    pub fn bins(&self, s: usize) -> &[f64] {
        &self.delta[s * self.n..(s + 1) * self.n]
    }

    pub fn observation(&self, s: usize) -> &[f64] {
        &self.y[s * self.n..(s + 1) * self.n]
    }

    pub fn diverged(&self) -> bool {
        self.aborted.as_deref().is_some_and(|m| m.contains("diverged"))
    }

    /// Whether the first observation was perfectly zoomed.
    pub fn initially_zoomed(&self) -> Option<bool> {
        self.zoomed.first().copied()
    }

    pub fn stopping_times(&self) -> StoppingTimes {
        stopping_times(&self.zoomed)
    }

    /// Bits spent over the run under componentwise accounting.
    pub fn audit(&self) -> RateAudit {
        let periods = self.steps();
        let symbol: f64 = self.ks.iter().map(|&k| ((k + 1) as f64).log2()).sum();
        let sent_feedback = self.feedback.len() * self.feedback_bits;
        // every period carries one symbol per component and one bit per sensor
        let per_period = self.feedback_bits as f64 + symbol;
        RateAudit {
            periods,
            symbol_bits: symbol * periods as f64,
            feedback_bits: sent_feedback as f64,
            total_bits: per_period * periods as f64,
            bits_per_period: if periods > 0 { per_period } else { 0.0 },
            stages_per_period: 2 * self.n,
        }
    }
}

/// Measured channel usage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateAudit {
    pub periods: usize,
    pub symbol_bits: f64,
    pub feedback_bits: f64,
    pub total_bits: f64,
    pub bits_per_period: f64,
    pub stages_per_period: usize,
}

/// `tau_0 = 0` followed by every later perfectly-zoomed step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppingTimes {
    pub times: Vec<usize>,
    /// Steps after the last stopping time that never re-zoomed.
    pub censored: usize,
}

impl StoppingTimes {
    pub fn gaps(&self) -> Vec<usize> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn stopping_times(zoomed: &[bool]) -> StoppingTimes {
    if zoomed.is_empty() {
        return StoppingTimes { times: Vec::new(), censored: 0 };
    }
    let mut times = vec![0];
    times.extend((1..zoomed.len()).filter(|&s| zoomed[s]));
    let last = *times.last().expect("nonempty");
    StoppingTimes { times, censored: zoomed.len() - 1 - last }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Sensor;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, v)
    }

    fn scalar(lam: f64) -> LinearSystem {
        LinearSystem::new(m(1, 1, &[lam]), m(1, 1, &[1.0]), vec![Sensor::new(m(1, 1, &[1.0]))]).unwrap()
    }

    fn noiseless(sys: LinearSystem) -> LinearSystem {
        let n = sys.n();
        let mut s = sys.with_process_noise(Matrix::zeros(n, n)).unwrap();
        for sensor in &mut s.sensors {
            let p = sensor.outputs();
            sensor.sigma_v = Matrix::zeros(p, p);
        }
        s
    }

    #[test]
    fn stopping_time_examples() {
        assert_eq!(stopping_times(&[true, false, true, false, false, true]).times, vec![0, 2, 5]);
        assert_eq!(stopping_times(&[true, true, true]).times, vec![0, 1, 2]);
        let st = stopping_times(&[true, false, false]);
        assert_eq!((st.times, st.censored), (vec![0], 2));
    }

    #[test]
    fn hand_step() {
        // A_bar = 4, Delta = 1, K = 4, x = 0.3: x_hat = 0.5, x' = 4 (0.3 - 0.5)
        let sys = noiseless(scalar(2.0));
        let mut cfg = LoopConfig::new(1);
        cfg.bins = Some(vec![4]);
        cfg.delta0 = Some(1.0);
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        let st = plan.fresh_state(Vector::from_element(1, 0.3));
        let z = Vector::zeros(plan.sampled.raw_dim);
        let (next, dec, _) = plan.loop_step(&st, &z).unwrap();
        assert_eq!(dec.x_hat[0], 0.5);
        assert!((next.x[0] + 0.8).abs() < 1e-12);

        // on a bin midpoint the state is cancelled exactly
        let st = plan.fresh_state(Vector::from_element(1, 1.5));
        assert_eq!(plan.loop_step(&st, &z).unwrap().0.x[0], 0.0);

        // overflow: no control, bins grow by rho |lambda|
        let st = plan.fresh_state(Vector::from_element(1, 9.0));
        let (next, dec, _) = plan.loop_step(&st, &z).unwrap();
        assert!(!dec.zoomed && dec.q == 0);
        assert_eq!(next.x[0], 36.0);
        assert!((next.bins.delta[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_run_contracts_to_the_floor() {
        let sys = noiseless(scalar(2.0)).with_initial_state(Vector::from_element(1, 5.0), Matrix::zeros(1, 1)).unwrap();
        let mut cfg = LoopConfig::new(400);
        cfg.zoom.c = 1e-6;
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        let r = plan.run_trial(1, 0);
        assert!(r.aborted.is_none());
        assert!(r.zoomed.iter().all(|&z| z));
        let last = r.state(r.steps())[0].abs();
        assert!(last <= 3.0 * plan.floor[0], "{last}");
        assert!(r.state(10)[0].abs() < r.state(0)[0].abs());
    }

    #[test]
    fn empty_horizon_and_reproducibility() {
        let sys = scalar(2.0);
        let plan = LoopPlan::new(&sys, &LoopConfig::new(0)).unwrap();
        let r = plan.run_trial(3, 0);
        assert_eq!((r.steps(), r.x.len()), (0, 1));
        let plan = LoopPlan::new(&sys, &LoopConfig::new(200)).unwrap();
        assert_eq!(plan.run_trial(9, 4), plan.run_trial(9, 4));
        assert_ne!(plan.run_trial(9, 4).q, plan.run_trial(9, 5).q);
        let st = plan.run_trial(9, 4).stopping_times();
        let gaps = st.gaps();
        assert!(gaps.iter().all(|&g| g >= 1));
    }

    #[test]
    fn floor_is_respected() {
        let plan = LoopPlan::new(&scalar(2.0), &LoopConfig::new(2000)).unwrap();
        let r = plan.run_trial(5, 0);
        for s in 0..=r.steps() {
            assert!(r.bins(s)[0] > plan.floor_bar[0]);
        }
    }

    #[test]
    fn plant_level_matches_sampled_level() {
        let a = m(2, 2, &[1.2, 0.5, -0.4, 1.3]);
        let sys = LinearSystem::new(a, m(2, 1, &[0.0, 1.0]), vec![Sensor::new(m(1, 2, &[1.0, 0.0]))]).unwrap();
        // rounding differences are amplified by A_bar, so compare a short run
        let plan = LoopPlan::new(&sys, &LoopConfig::new(15)).unwrap();
        let fast = plan.run_trial(21, 2);
        let slow = plan.run_plant_trial(21, 2).unwrap();
        assert_eq!(fast.q, slow.q);
        for (a, b) in fast.x.iter().zip(&slow.x) {
            assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn one_sensor_multi_mode_matches_single() {
        let sys = scalar(2.0);
        let single = LoopPlan::new(&sys, &LoopConfig::new(300)).unwrap().run_trial(4, 0);
        let mut cfg = LoopConfig::new(300);
        cfg.mode = LoopMode::MultiSensor(MultiSensorPolicy::Eigenspace);
        let multi = LoopPlan::new(&sys, &cfg).unwrap().run_trial(4, 0);
        assert_eq!(single.x, multi.x);
        assert_eq!(single.q, multi.q);
        assert_eq!(multi.feedback.len(), multi.steps());
    }

    #[test]
    fn two_sensors_noiseless_contract() {
        let sys = noiseless(
            LinearSystem::new(
                m(2, 2, &[2.0, 0.0, 0.0, 3.0]),
                Matrix::identity(2, 2),
                vec![Sensor::new(m(1, 2, &[0.0, 1.0])), Sensor::new(m(1, 2, &[1.0, 0.0]))],
            )
            .unwrap(),
        )
        .with_initial_state(Vector::from_row_slice(&[1.0, -2.0]), Matrix::zeros(2, 2))
        .unwrap();
        let mut cfg = LoopConfig::new(60);
        cfg.mode = LoopMode::MultiSensor(MultiSensorPolicy::Eigenspace);
        cfg.zoom.c = 1e-6;
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        assert_eq!(plan.sampled.channels.len(), 2);
        let r = plan.run_trial(0, 0);
        assert!(r.zoomed.iter().all(|&z| z));
        // after a zoomed step the state is A_bar times the quantization error
        for s in 1..=r.steps() {
            for i in 0..2 {
                let lam = plan.sampled.a_bar[(i, i)].abs();
                assert!(r.state(s)[i].abs() <= lam * r.bins(s - 1)[i] / 2.0 * (1.0 + 1e-9));
            }
            assert!(r.bins(s).iter().zip(r.bins(s - 1)).all(|(a, b)| a < b));
        }
        // each sensor's symbol decodes alone against its own alphabet
        for s in 0..r.steps() {
            for c in 0..2 {
                let sym = r.sensor_symbols[s * 2 + c];
                let k = plan.ks[plan.sampled.channels[c].coords.start];
                assert!(sym >= 1 && sym <= k as u128);
            }
        }
        let audit = r.audit();
        let want = 2.0 + plan.ks.iter().map(|&k| ((k + 1) as f64).log2()).sum::<f64>();
        assert_eq!(audit.bits_per_period, want);
    }

    #[test]
    fn block_triangular_runs() {
        let sys = LinearSystem::new(
            m(2, 2, &[3.0, 0.0, 1.0, 2.0]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[1.0, 0.0])), Sensor::new(m(1, 2, &[0.0, 1.0]))],
        )
        .unwrap();
        let mut cfg = LoopConfig::new(500);
        cfg.mode = LoopMode::MultiSensor(MultiSensorPolicy::BlockTriangular { order: None });
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        let d = plan.decomposition.as_ref().unwrap();
        assert!(decomposition::check_decreasing_order(d));
        let r = plan.run_trial(2, 0);
        assert!(r.aborted.is_none(), "{:?}", r.aborted);

        // lambda = 3 at the bottom drives the lambda = 2 block above it
        cfg.mode = LoopMode::MultiSensor(MultiSensorPolicy::BlockTriangular { order: Some(vec![0, 1]) });
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        let a = &plan.sampled.a_bar;
        let (top, low) = (&plan.initial_bins.delta[0], &plan.initial_bins.delta[1]);
        let spare = (plan.ks[0] / 2) as f64 * top - a[(0, 0)].abs() * top / 2.0;
        assert!(spare >= a[(0, 1)].abs() * low / 2.0 * (1.0 - 1e-12));
        for t in 0..4 {
            let r = plan.run_trial(2, t);
            assert!(r.aborted.is_none(), "{:?}", r.aborted);
        }
    }

    #[test]
    fn noise_margin_sizes_the_floor() {
        let sys = scalar(2.0);
        let mut cfg = LoopConfig::new(10);
        cfg.noise_margin = Some(4.0);
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        // K = 6 against 4: one bin of spare range must hold 4 sd of w_bar - 4 v_bar + v_bar' (5 + 16 + 1)
        assert!((plan.initial_bins.delta[0] - 4.0 * 22f64.sqrt()).abs() < 1e-9);
        // K = 4 leaves no spare range against |lambda_bar| = 4
        cfg.bins = Some(vec![4]);
        assert!(matches!(LoopPlan::new(&sys, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mixed_spectrum_is_rejected() {
        let sys = LinearSystem::new(
            m(2, 2, &[2.0, 0.0, 0.0, 0.5]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[1.0, 1.0]))],
        )
        .unwrap();
        assert!(matches!(LoopPlan::new(&sys, &LoopConfig::new(10)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn open_loop_diverges() {
        let mut cfg = LoopConfig::new(2000);
        cfg.open_loop = true;
        let plan = LoopPlan::new(&scalar(2.0), &cfg).unwrap();
        let r = plan.run_trial(1, 0);
        assert!(r.diverged());
    }

    #[test]
    fn lattice_mode_keeps_exponents() {
        let mut cfg = LoopConfig::new(500);
        cfg.lattice = Some(0.05);
        let plan = LoopPlan::new(&scalar(2.0), &cfg).unwrap();
        let r = plan.run_trial(8, 0);
        for &d in &r.delta {
            let e = d.log2() / 0.05;
            assert!((e - e.round()).abs() < 1e-9);
        }
    }
}

//! Plant, sensors and noise: `x' = A x + B u + w`, `y^j = C^j x + v^j`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector, RANK_TOL};

/// One sensor: its output matrix and observation-noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub c: Matrix,
    pub sigma_v: Matrix,
}

impl Sensor {
    /// Sensor with identity noise covariance.
    pub fn new(c: Matrix) -> Self {
        let p = c.nrows();
        Sensor { c, sigma_v: Matrix::identity(p, p) }
    }

    pub fn with_noise(c: Matrix, sigma_v: Matrix) -> Self {
        Sensor { c, sigma_v }
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }
}

/// The linear time-invariant plant with Gaussian noises.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub sensors: Vec<Sensor>,
    pub sigma_w: Matrix,
    pub sigma_x0: Matrix,
    pub mu_x0: Vector,
}

impl LinearSystem {
    /// System with identity covariances and a zero-mean, unit-covariance initial state.
    pub fn new(a: Matrix, b: Matrix, sensors: Vec<Sensor>) -> Result<Self> {
        let n = a.nrows();
        let sys = LinearSystem {
            a,
            b,
            sensors,
            sigma_w: Matrix::identity(n, n),
            sigma_x0: Matrix::identity(n, n),
            mu_x0: Vector::zeros(n),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_process_noise(mut self, sigma_w: Matrix) -> Result<Self> {
        self.sigma_w = sigma_w;
        self.validate()?;
        Ok(self)
    }

    pub fn with_initial_state(mut self, mu_x0: Vector, sigma_x0: Matrix) -> Result<Self> {
        self.mu_x0 = mu_x0;
        self.sigma_x0 = sigma_x0;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(Error::Input(format!(
                "A must be square and non-empty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(Error::Input(format!(
                "B must have {n} rows and at least one column, got {}x{}",
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        if self.sensors.is_empty() {
            return Err(Error::Input("at least one sensor is required".into()));
        }
        for (j, s) in self.sensors.iter().enumerate() {
            if s.c.ncols() != n || s.c.nrows() == 0 {
                return Err(Error::Input(format!(
                    "sensor {j}: C must be p x {n} with p >= 1, got {}x{}",
                    s.c.nrows(),
                    s.c.ncols()
                )));
            }
            if s.sigma_v.nrows() != s.c.nrows() {
                return Err(Error::Input(format!(
                    "sensor {j}: noise covariance must be {p}x{p}",
                    p = s.c.nrows()
                )));
            }
            linalg::check_psd(&s.sigma_v, &format!("sensor {j} noise covariance"))?;
        }
        for (m, name) in [(&self.a, "A"), (&self.b, "B")] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("{name} has non-finite entries")));
            }
        }
        if self.sensors.iter().any(|s| s.c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input("a sensor matrix has non-finite entries".into()));
        }
        if self.sigma_w.nrows() != n || self.sigma_x0.nrows() != n || self.mu_x0.len() != n {
            return Err(Error::Input(format!("noise and initial-state statistics must have dimension {n}")));
        }
        linalg::check_psd(&self.sigma_w, "process noise covariance")?;
        linalg::check_psd(&self.sigma_x0, "initial state covariance")?;
        if self.mu_x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("initial mean has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    /// Total number of outputs over all sensors.
    pub fn total_outputs(&self) -> usize {
        self.sensors.iter().map(Sensor::outputs).sum()
    }

    /// Row offset of sensor `j` inside the all-sensor output stack.
    pub fn output_offset(&self, j: usize) -> usize {
        self.sensors[..j].iter().map(Sensor::outputs).sum()
    }

    /// Output matrices of the listed sensors stacked in the given order.
    pub fn stacked_c(&self, sensors: &[usize]) -> Matrix {
        let blocks: Vec<Matrix> = sensors.iter().map(|&j| self.sensors[j].c.clone()).collect();
        linalg::vstack(&blocks, self.n())
    }

    /// Block-diagonal observation-noise covariance of all sensors.
    pub fn sigma_v_all(&self) -> Matrix {
        let blocks: Vec<Matrix> = self.sensors.iter().map(|s| s.sigma_v.clone()).collect();
        linalg::block_diag(&blocks)
    }

    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        let n = self.n();
        if x.len() != n || w.len() != n || u.len() != self.m() {
            return Err(Error::Input(format!(
                "step expects x, w of length {n} and u of length {}, got {}, {}, {}",
                self.m(),
                x.len(),
                w.len(),
                u.len()
            )));
        }
        Ok(&self.a * x + &self.b * u + w)
    }

    /// Output of sensor `j` (0-based).
    pub fn observe(&self, j: usize, x: &Vector, v: &Vector) -> Result<Vector> {
        let sensor = self
            .sensors
            .get(j)
            .ok_or_else(|| Error::Input(format!("sensor index {j} out of range (M = {})", self.num_sensors())))?;
        if x.len() != self.n() || v.len() != sensor.outputs() {
            return Err(Error::Input(format!(
                "observe expects x of length {} and v of length {}",
                self.n(),
                sensor.outputs()
            )));
        }
        Ok(&sensor.c * x + v)
    }
}

/// `[C; CA; ...; CA^{n-1}]`.
pub fn observability_matrix(c: &Matrix, a: &Matrix) -> Matrix {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(n * p, c.ncols());
    let mut row = c.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, c.ncols())).copy_from(&row);
        row = &row * a;
    }
    out
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut col = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&col);
        col = a * &col;
    }
    out
}

/// An eigenvalue in serializable form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
}

impl From<Complex64> for Eigenvalue {
    fn from(z: Complex64) -> Self {
        Eigenvalue { re: z.re, im: z.im, modulus: z.norm() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub controllable: bool,
    pub jointly_observable: bool,
    pub per_sensor_observable: Vec<bool>,
    pub unstable_eigenvalues: Vec<Eigenvalue>,
    /// Every eigenvalue lies strictly outside the unit circle.
    pub all_unstable: bool,
}

impl AssumptionReport {
    /// First failed condition needed by the closed-loop policy, if any.
    pub fn require_policy_conditions(&self) -> Result<()> {
        if !self.controllable {
            return Err(Error::Structural("(A, B) is not controllable".into()));
        }
        if !self.jointly_observable {
            return Err(Error::Structural("the sensors are not jointly observable".into()));
        }
        if !self.all_unstable {
            return Err(Error::Unsupported(
                "every eigenvalue of A must satisfy |lambda| > 1; mixed stable/unstable spectra are rejected".into(),
            ));
        }
        Ok(())
    }
}

pub fn check_assumptions(sys: &LinearSystem) -> AssumptionReport {
    let n = sys.n();
    let all: Vec<usize> = (0..sys.num_sensors()).collect();
    let joint = observability_matrix(&sys.stacked_c(&all), &sys.a);
    let per_sensor_observable = sys
        .sensors
        .iter()
        .map(|s| linalg::rank(&observability_matrix(&s.c, &sys.a), RANK_TOL) == n)
        .collect();
    let eigs = linalg::eigenvalues(&sys.a);
    AssumptionReport {
        controllable: linalg::rank(&controllability_matrix(&sys.a, &sys.b), RANK_TOL) == n,
        jointly_observable: linalg::rank(&joint, RANK_TOL) == n,
        per_sensor_observable,
        unstable_eigenvalues: eigs.iter().filter(|z| z.norm() > 1.0).map(|&z| z.into()).collect(),
        all_unstable: eigs.iter().all(|z| z.norm() > 1.0),
    }
}

/// Seeded standard-normal stream. Streams with the same seed and different ids
/// are independent ChaCha keystreams.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    rng: ChaCha8Rng,
}

impl GaussianSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianSource { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn standard_vector(&mut self, len: usize) -> Vector {
        Vector::from_fn(len, |_, _| self.standard_normal())
    }

    /// `mean + factor * z` with `z` standard normal.
    pub fn gaussian(&mut self, mean: &Vector, factor: &Matrix) -> Vector {
        let z = self.standard_vector(factor.ncols());
        mean + factor * z
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, v)
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    #[test]
    fn step_examples() {
        let sys = LinearSystem::new(m(1, 1, &[2.0]), m(1, 1, &[1.0]), vec![Sensor::new(m(1, 1, &[1.0]))]).unwrap();
        assert_eq!(sys.step(&v(&[1.0]), &v(&[-2.0]), &v(&[0.0])).unwrap(), v(&[0.0]));

        let sys = LinearSystem::new(
            m(2, 2, &[2.0, 1.0, 0.0, 2.0]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[1.0, 0.0]))],
        )
        .unwrap();
        let out = sys.step(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), &v(&[0.5, -0.5])).unwrap();
        // 2*1 + 1*1 + 0.5, 2*1 - 0.5
        assert_eq!(out, v(&[3.5, 1.5]));
        assert!(sys.step(&v(&[1.0]), &v(&[0.0, 0.0]), &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn observe_examples() {
        let sys = LinearSystem::new(
            Matrix::identity(2, 2) * 2.0,
            Matrix::identity(2, 2),
            vec![
                Sensor::new(m(1, 2, &[1.0, 0.0])),
                Sensor::new(m(1, 2, &[0.0, 1.0])),
                Sensor::new(Matrix::identity(2, 2)),
            ],
        )
        .unwrap();
        let x = v(&[3.0, 7.0]);
        assert_eq!(sys.observe(0, &x, &v(&[0.0])).unwrap(), v(&[3.0]));
        assert_eq!(sys.observe(1, &x, &v(&[0.25])).unwrap(), v(&[7.25]));
        assert_eq!(sys.observe(2, &x, &v(&[0.0, 0.0])).unwrap(), x);
        assert!(matches!(sys.observe(3, &x, &v(&[0.0])), Err(Error::Input(_))));
    }

    #[test]
    fn observability_examples() {
        let o = observability_matrix(&m(1, 2, &[1.0, 0.0]), &m(2, 2, &[2.0, 1.0, 0.0, 2.0]));
        assert_eq!(o, m(2, 2, &[1.0, 0.0, 2.0, 1.0]));
        let o = observability_matrix(&m(1, 1, &[3.0]), &m(1, 1, &[5.0]));
        assert_eq!(o, m(1, 1, &[3.0]));
        let o = observability_matrix(&m(1, 2, &[0.0, 1.0]), &m(2, 2, &[2.0, 1.0, 0.0, 3.0]));
        assert_eq!(o, m(2, 2, &[0.0, 1.0, 0.0, 3.0]));
        assert_eq!(linalg::rank(&o, RANK_TOL), 1);
    }

    #[test]
    fn assumption_examples() {
        let sys = LinearSystem::new(
            m(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[0.0, 1.0])), Sensor::new(m(1, 2, &[1.0, 0.0]))],
        )
        .unwrap();
        let r = check_assumptions(&sys);
        assert!(r.controllable && r.jointly_observable);
        assert_eq!(r.per_sensor_observable, vec![false, false]);
        assert_eq!(r, check_assumptions(&sys));

        let sys = LinearSystem::new(m(1, 1, &[2.0]), m(1, 1, &[0.0]), vec![Sensor::new(m(1, 1, &[1.0]))]).unwrap();
        assert!(!check_assumptions(&sys).controllable);

        let sys = LinearSystem::new(m(1, 1, &[0.5]), m(1, 1, &[1.0]), vec![Sensor::new(m(1, 1, &[1.0]))]).unwrap();
        let r = check_assumptions(&sys);
        assert!(r.unstable_eigenvalues.is_empty());
        assert!(matches!(r.require_policy_conditions(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn covariance_validation() {
        let sys = LinearSystem::new(m(1, 1, &[2.0]), m(1, 1, &[1.0]), vec![Sensor::new(m(1, 1, &[1.0]))]).unwrap();
        assert!(sys.clone().with_process_noise(m(1, 1, &[-1.0])).is_err());
        assert!(LinearSystem::new(m(1, 2, &[2.0, 1.0]), m(1, 1, &[1.0]), vec![]).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = GaussianSource::new(7, 3);
        let mut b = GaussianSource::new(7, 3);
        let mut c = GaussianSource::new(7, 4);
        let xa: Vec<f64> = (0..8).map(|_| a.standard_normal()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.standard_normal()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.standard_normal()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}

//! Rate formulas, the Gaussian tail bound, and Monte Carlo diagnostics of
//! the closed loop.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use serde::Serialize;

use crate::closed_loop::{RateAudit, RunReport};
use crate::decomposition::{self, BlockDecomposition};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::system::GaussianSource;

/// `sum of log2 |lambda|` over eigenvalues outside the unit circle.
pub fn min_rate(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|z| z.norm()).filter(|&m| m > 1.0).map(f64::log2).sum()
}

/// Above this many bits `|lambda|^p` is no longer an exact float and the
/// ceiling overhead is replaced by its upper bound.
const EXACT_BITS: f64 = 50.0;

/// `m^p` with a bound on its relative rounding error, zero when every
/// product along the way was exact.
fn power_with_error(m: f64, mut p: u32) -> (f64, f64) {
    fn mul((a, ra): (f64, f64), (b, rb): (f64, f64)) -> (f64, f64) {
        let prod = a * b;
        let rounded = if a.mul_add(b, -prod) == 0.0 { 0.0 } else { f64::EPSILON };
        (prod, ra + rb + ra * rb + rounded)
    }
    let (mut acc, mut base) = ((1.0, 0.0), (m, 0.0));
    while p > 0 {
        if p & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        p >>= 1;
    }
    acc
}

/// `log2(K + 1) - p log2|lambda|` for `K = ceil(|lambda|^p + eps)`, optionally forced even.
/// Never below the exact value: an inexact power is widened by its error bound.
fn overhead_bits(modulus: f64, p: u32, eps: f64, force_even: bool) -> f64 {
    let bits = p as f64 * modulus.log2();
    if bits < EXACT_BITS {
        let (x, rel) = power_with_error(modulus, p);
        if x == 0.0 {
            return f64::INFINITY;
        }
        let err = x * rel * 2.0;
        let mut k = (x + err + eps).ceil();
        if force_even && k % 2.0 != 0.0 {
            k += 1.0;
        }
        let low = x - err;
        ((k + 1.0 - low) / low).ln_1p() / LN_2
    } else {
        let slack = eps + if force_even { 3.0 } else { 2.0 };
        (slack * (-bits * LN_2).exp()).ln_1p() / LN_2
    }
}

/// Period-`T` average rate, in both accountings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AvgRate {
    pub t: u32,
    /// `K_i = ceil(|lambda_i|^{T 2n} + eps)` as written.
    pub paper_formula: f64,
    /// `K_i` forced even, as the quantizer uses.
    pub implemented_policy: f64,
    /// `implemented_policy - min_rate`, computed without cancellation.
    pub excess: f64,
    /// `paper_formula - min_rate`, computed the same way.
    pub formula_excess: f64,
}

fn rate_excess(eigs: &[Complex64], t: u32, n: usize, eps: f64, m: usize, even: bool) -> f64 {
    let p = t * 2 * n as u32;
    let mut total = m as f64;
    for z in eigs {
        let modulus = z.norm();
        if modulus > 1.0 {
            total += overhead_bits(modulus, p, eps, even);
        } else {
            // stable modes still need a symbol
            let mut k = (modulus.powi(p as i32) + eps).ceil();
            if even && k % 2.0 != 0.0 {
                k += 1.0;
            }
            total += (k + 1.0).log2();
        }
    }
    total / p as f64
}

/// Upper bound on the average rate of the period-`T` policy with `m` feedback bits per period.
/// Every listed eigenvalue, stable or not, is charged one symbol.
pub fn avg_rate(eigs: &[Complex64], t: u32, n: usize, eps: f64, m: usize) -> Result<AvgRate> {
    if t == 0 || n == 0 {
        return Err(Error::Config("period multiplier and state dimension must be positive".into()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config("epsilon must be nonnegative".into()));
    }
    let base = min_rate(eigs);
    let excess = rate_excess(eigs, t, n, eps, m, true);
    let formula_excess = rate_excess(eigs, t, n, eps, m, false);
    Ok(AvgRate {
        t,
        paper_formula: base + formula_excess,
        implemented_policy: base + excess,
        excess,
        formula_excess,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub min_rate: f64,
    pub avg_rate: Vec<AvgRate>,
    pub sufficient_rate: Option<f64>,
    pub sufficient_rate_worst_case: Option<f64>,
    pub audit: Option<RateAudit>,
    /// Audited bits per stage.
    pub audit_bits_per_stage: Option<f64>,
}

pub fn rate_report(
    eigs: &[Complex64],
    n: usize,
    eps: f64,
    m: usize,
    periods: &[u32],
    decomposition: Option<&BlockDecomposition>,
    audit: Option<RateAudit>,
) -> Result<RateReport> {
    let avg = periods.iter().map(|&t| avg_rate(eigs, t, n, eps, m)).collect::<Result<Vec<_>>>()?;
    Ok(RateReport {
        min_rate: min_rate(eigs),
        avg_rate: avg,
        sufficient_rate: decomposition.map(decomposition::sufficient_rate),
        sufficient_rate_worst_case: decomposition.map(decomposition::sufficient_rate_worst_case),
        audit_bits_per_stage: audit.as_ref().map(|a| a.bits_per_period / a.stages_per_period as f64),
        audit,
    })
}

/// Natural log of the Gaussian overflow bound
/// `2 sqrt(lmax^{n+1} / (2 pi det)) sum_i exp(-Delta_i^2 / (2 lmax))`.
pub fn gaussian_tail_log_bound(sigma: &Matrix, delta: &[f64]) -> Result<f64> {
    let n = sigma.nrows();
    if sigma.ncols() != n || delta.len() != n || n == 0 {
        return Err(Error::Input(format!(
            "covariance is {}x{} but {} bin sizes were given",
            sigma.nrows(),
            sigma.ncols(),
            delta.len()
        )));
    }
    linalg::check_psd(sigma, "covariance")?;
    if let Some(d) = delta.iter().find(|&&d| !(d >= 1.0 && d.is_finite())) {
        return Err(Error::Input(format!("bin sizes must be at least 1, got {d}")));
    }
    let eig = nalgebra::SymmetricEigen::new(sigma.clone()).eigenvalues;
    let lmax = eig.max();
    let lmin = eig.min();
    if !(lmin > 1e-12 * lmax.max(1e-300)) {
        return Err(Error::Input("covariance is singular".into()));
    }
    let log_det: f64 = eig.iter().map(|l| l.ln()).sum();
    let log_coef = LN_2 + 0.5 * ((n as f64 + 1.0) * lmax.ln() - (2.0 * PI).ln() - log_det);
    let terms: Vec<f64> = delta.iter().map(|d| -d * d / (2.0 * lmax)).collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
    Ok(log_coef + lse)
}

pub fn gaussian_tail_bound(sigma: &Matrix, delta: &[f64]) -> Result<f64> {
    gaussian_tail_log_bound(sigma, delta).map(f64::exp)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub p: f64,
    pub se: f64,
    pub samples: usize,
}

/// `P(|X_i| > Delta_i for some i)` for `X ~ N(0, Sigma)`.
pub fn gaussian_tail_mc(sigma: &Matrix, delta: &[f64], samples: usize, seed: u64) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    linalg::check_psd(sigma, "covariance")?;
    let g = linalg::psd_factor(sigma);
    let mut src = GaussianSource::new(seed, 0);
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = &g * src.standard_vector(sigma.nrows());
        if x.iter().zip(delta).any(|(v, d)| v.abs() > *d) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok(McEstimate { p, se: (p * (1.0 - p) / samples as f64).sqrt(), samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Bounded,
    Diverging,
    Inconclusive,
}

/// Settings shared by the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticConfig {
    /// First gap length of the tail fit.
    pub tail_start: usize,
    pub min_intervals: usize,
    /// Smallest risk set kept in the tail fit.
    pub min_at_risk: usize,
    pub min_trials: usize,
    /// Allowed ratio of the last-quarter to the mid-run second moment.
    pub moment_ratio: f64,
    /// Smallest excursion count of a drift group.
    pub min_group: usize,
    /// Drift groups per doubling of the bin size.
    pub groups_per_octave: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            tail_start: 3,
            min_intervals: 1000,
            min_at_risk: 10,
            min_trials: 100,
            moment_ratio: 1.5,
            min_group: 30,
            groups_per_octave: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalPoint {
    pub k: usize,
    /// Kaplan-Meier estimate of `P(gap > k)`.
    pub survival: f64,
    pub se: f64,
    pub at_risk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailDecay {
    pub intervals: usize,
    pub censored: usize,
    pub survival: Vec<SurvivalPoint>,
    /// Per-step slope of the log survival beyond `tail_start`.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Ordinary least-squares slope of the log survival on the same range.
    pub ols_slope: Option<f64>,
    pub negative: bool,
    pub conclusive: bool,
    pub note: String,
}

/// Fit the gap tail from complete gaps and right-censored lengths.
pub fn tail_decay_from_gaps(gaps: &[usize], censored: &[usize], cfg: &DiagnosticConfig) -> TailDecay {
    let kmax = gaps.iter().chain(censored).copied().max().unwrap_or(0);
    let mut events = vec![0usize; kmax + 2];
    let mut exits = vec![0usize; kmax + 2];
    for &g in gaps {
        events[g] += 1;
    }
    for &c in censored {
        exits[c] += 1;
    }
    // at_risk[k]: known to last at least k steps
    let mut at_risk = vec![0usize; kmax + 2];
    let mut running = 0;
    for k in (1..=kmax).rev() {
        running += events[k] + exits[k];
        at_risk[k] = running;
    }
    let mut survival = Vec::new();
    let (mut s, mut greenwood) = (1.0, 0.0);
    let mut increments = Vec::new();
    for k in 1..=kmax {
        let (nk, ek) = (at_risk[k], events[k]);
        if nk == 0 {
            break;
        }
        s *= 1.0 - ek as f64 / nk as f64;
        if nk > ek {
            greenwood += ek as f64 / (nk as f64 * (nk - ek) as f64);
        }
        survival.push(SurvivalPoint { k, survival: s, se: s * greenwood.sqrt(), at_risk: nk });
        if k > cfg.tail_start && nk > cfg.min_at_risk {
            let (nf, ef, sf) = (nk as f64 + 0.5, ek as f64 + 0.5, (nk - ek) as f64 + 0.5);
            increments.push((k, (sf / nf).ln(), ef / (sf * nf)));
        }
    }
    let mut out = TailDecay {
        intervals: gaps.len(),
        censored: censored.len(),
        survival,
        slope: None,
        slope_se: None,
        ci: None,
        ols_slope: None,
        negative: false,
        conclusive: false,
        note: String::new(),
    };
    if gaps.len() < cfg.min_intervals {
        out.note = format!("only {} intervals, need {}", gaps.len(), cfg.min_intervals);
        return out;
    }
    if increments.is_empty() {
        out.note = format!("no gap longer than {} with a usable risk set", cfg.tail_start);
        return out;
    }
    let wsum: f64 = increments.iter().map(|(_, _, v)| 1.0 / v).sum();
    let slope = increments.iter().map(|(_, d, v)| d / v).sum::<f64>() / wsum;
    let se = wsum.recip().sqrt();
    out.slope = Some(slope);
    out.slope_se = Some(se);
    out.ci = Some((slope - 1.96 * se, slope + 1.96 * se));
    out.negative = slope + 1.96 * se < 0.0;
    out.conclusive = true;

    let pts: Vec<(f64, f64)> = out
        .survival
        .iter()
        .filter(|p| p.k >= cfg.tail_start && p.at_risk > cfg.min_at_risk && p.survival > 0.0)
        .map(|p| (p.k as f64, p.survival.ln()))
        .collect();
    if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        out.ols_slope = Some(sxy / sxx);
    }
    out
}

/// Inter-stopping-time tail over a set of trials.
pub fn tail_decay_diagnostic(reports: &[RunReport], cfg: &DiagnosticConfig) -> TailDecay {
    let mut gaps = Vec::new();
    let mut censored = Vec::new();
    for r in reports {
        let st = r.stopping_times();
        gaps.extend(st.gaps());
        if st.censored > 0 {
            censored.push(st.censored);
        }
    }
    tail_decay_from_gaps(&gaps, &censored, cfg)
}

/// One excursion between consecutive stopping times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Excursion {
    /// `Delta^1` at the starting stopping time.
    pub start: f64,
    /// Largest `Delta^i / F` at the start.
    pub level: f64,
    /// Sum of `(Delta^1_s)^2` over the excursion.
    pub a: f64,
    /// `(Delta^1_start)^2 - (Delta^1_end)^2`.
    pub b: f64,
    /// Sum of `||x_s||^2` over the excursion.
    pub energy: f64,
    pub len: usize,
}

impl Excursion {
    pub fn inside(&self) -> bool {
        self.level <= 1.0
    }
}

pub fn excursions(r: &RunReport, f_radius: f64) -> Vec<Excursion> {
    let times = r.stopping_times().times;
    times
        .windows(2)
        .map(|w| {
            let (t0, t1) = (w[0], w[1]);
            let d0 = r.bins(t0)[0];
            let d1 = r.bins(t1)[0];
            let a = (t0..t1).map(|s| r.bins(s)[0].powi(2)).sum();
            let energy = (t0..t1).map(|s| r.state(s).iter().map(|v| v * v).sum::<f64>()).sum();
            let level = r.bins(t0).iter().copied().fold(0.0, f64::max) / f_radius;
            Excursion { start: d0, level, a, b: d0 * d0 - d1 * d1, energy, len: t1 - t0 }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftGroup {
    /// Range of `max_i Delta^i / F` at the start.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub ratio: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftVerdict {
    Positive,
    Failure,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftCheck {
    pub f_radius: f64,
    pub excursions: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Fraction of excursions starting in `S`.
    pub mean_indicator: f64,
    pub groups: Vec<DriftGroup>,
    /// Worst drift ratio over well-populated groups outside `S`.
    pub gamma: Option<f64>,
    pub b_hat: Option<f64>,
    pub verdict: DriftVerdict,
    /// Smallest group floor (in units of `F`) above which every populated group drifts down.
    pub positive_from: Option<f64>,
}

/// Empirical random-time drift check: outside `S` the squared leading bin
/// size must fall by at least `gamma` times the excursion's accumulated
/// squared bin size, on average, conditionally on the starting level.
pub fn drift_diagnostic(reports: &[RunReport], f_radius: f64, cfg: &DiagnosticConfig) -> Result<DriftCheck> {
    if !(f_radius > 0.0) {
        return Err(Error::Config("F must be positive".into()));
    }
    let all: Vec<Excursion> = reports.iter().flat_map(|r| excursions(r, f_radius)).collect();
    let per = cfg.groups_per_octave.max(1) as f64;
    let mut grouped: BTreeMap<i64, Vec<&Excursion>> = BTreeMap::new();
    for e in &all {
        let key = if e.inside() { i64::MIN } else { (e.level.log2() * per).floor() as i64 };
        grouped.entry(key).or_default().push(e);
    }
    let groups: Vec<DriftGroup> = grouped
        .iter()
        .map(|(&key, es)| {
            let count = es.len();
            let mean_a = es.iter().map(|e| e.a).sum::<f64>() / count as f64;
            let mean_b = es.iter().map(|e| e.b).sum::<f64>() / count as f64;
            let (lo, hi) = if key == i64::MIN {
                (0.0, 1.0)
            } else {
                ((key as f64 / per).exp2(), ((key + 1) as f64 / per).exp2())
            };
            DriftGroup { lo, hi, count, mean_a, mean_b, ratio: mean_b / mean_a, inside: key == i64::MIN }
        })
        .collect();
    let outside: Vec<&DriftGroup> = groups.iter().filter(|g| !g.inside && g.count >= cfg.min_group).collect();
    let gamma = outside.iter().map(|g| g.ratio).reduce(f64::min);
    let b_hat = gamma.map(|g| {
        groups
            .iter()
            .filter(|grp| grp.inside)
            .map(|grp| (g.max(0.0) * grp.mean_a - grp.mean_b).max(0.0))
            .fold(0.0, f64::max)
    });
    let verdict = match gamma {
        None => DriftVerdict::Inconclusive,
        Some(g) if g > 0.0 => DriftVerdict::Positive,
        Some(_) => DriftVerdict::Failure,
    };
    let positive_from = outside
        .iter()
        .enumerate()
        .find(|(i, _)| outside[*i..].iter().all(|g| g.ratio > 0.0))
        .map(|(_, g)| g.lo);
    let k = all.len().max(1) as f64;
    Ok(DriftCheck {
        f_radius,
        excursions: all.len(),
        mean_a: all.iter().map(|e| e.a).sum::<f64>() / k,
        mean_b: all.iter().map(|e| e.b).sum::<f64>() / k,
        mean_indicator: all.iter().filter(|e| e.inside()).count() as f64 / k,
        groups,
        gamma,
        b_hat,
        verdict,
        positive_from,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSeries {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentWindow {
    pub mid: f64,
    pub last: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentDiagnostic {
    pub trials: usize,
    pub used: usize,
    pub aborted: usize,
    pub diverged: usize,
    pub series: MomentSeries,
    pub overall: MomentWindow,
    pub per_coordinate: Vec<MomentWindow>,
    /// `E[sum ||x_s||^2] / E[(Delta^1_tau)^2]` over excursions.
    pub kappa: Option<f64>,
    pub verdict: Verdict,
}

fn series(values: impl Fn(&RunReport, usize) -> f64, reports: &[&RunReport], len: usize) -> MomentSeries {
    let k = reports.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut se = Vec::with_capacity(len);
    for s in 0..len {
        let v: Vec<f64> = reports.iter().map(|r| values(r, s)).collect();
        let m = v.iter().sum::<f64>() / k;
        let var = if reports.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
        mean.push(m);
        se.push((var / k).sqrt());
    }
    MomentSeries { mean, se }
}

fn window_verdict(mean: &[f64], ratio: f64, enough: bool, diverged: bool) -> MomentWindow {
    let s = mean.len();
    let avg = |r: std::ops::Range<usize>| {
        let len = r.len().max(1) as f64;
        mean[r].iter().sum::<f64>() / len
    };
    if s < 4 {
        let verdict = if diverged { Verdict::Diverging } else { Verdict::Inconclusive };
        return MomentWindow { mid: f64::NAN, last: f64::NAN, verdict };
    }
    let mid = avg(s / 2..3 * s / 4);
    let last = avg(3 * s / 4..s);
    let verdict = if diverged || !(last <= ratio * mid) {
        Verdict::Diverging
    } else if enough {
        Verdict::Bounded
    } else {
        Verdict::Inconclusive
    };
    MomentWindow { mid, last, verdict }
}

/// Second moment of the sampled state over trials and its boundedness verdict.
/// Trials that diverged make the verdict "diverging"; other aborted trials are excluded.
pub fn moment_diagnostic(reports: &[RunReport], cfg: &DiagnosticConfig) -> MomentDiagnostic {
    let diverged = reports.iter().filter(|r| r.diverged()).count();
    let aborted = reports.iter().filter(|r| r.aborted.is_some()).count();
    let done: Vec<&RunReport> = reports.iter().filter(|r| r.aborted.is_none()).collect();
    let len = done.iter().map(|r| r.steps() + 1).min().unwrap_or(0);
    let n = done.first().map(|r| r.n).unwrap_or(0);
    let enough = done.len() >= cfg.min_trials;
    let total = series(|r, s| r.state(s).iter().map(|v| v * v).sum(), &done, len);
    let overall = window_verdict(&total.mean, cfg.moment_ratio, enough, diverged > 0);
    let per_coordinate = (0..n)
        .map(|i| {
            let c = series(|r, s| r.state(s)[i].powi(2), &done, len);
            window_verdict(&c.mean, cfg.moment_ratio, enough, diverged > 0)
        })
        .collect();
    let (mut energy, mut start) = (0.0, 0.0);
    for r in &done {
        for e in excursions(r, 1.0) {
            energy += e.energy;
            start += e.start * e.start;
        }
    }
    MomentDiagnostic {
        trials: reports.len(),
        used: done.len(),
        aborted,
        diverged,
        series: total,
        verdict: overall.verdict,
        overall,
        per_coordinate,
        kappa: if start > 0.0 { Some(energy / start) } else { None },
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// 5% critical value of the two-sample statistic.
pub fn ks_critical(n1: usize, n2: usize) -> f64 {
    1.358 * ((n1 + n2) as f64 / (n1 * n2) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateDistance {
    pub coordinate: usize,
    /// Distance between the marginals at `s1` and `s2`.
    pub between_times: f64,
    /// Distance between even and odd trials at `s2`.
    pub between_groups: f64,
    pub critical: f64,
    pub within_null: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionDistance {
    pub s1: usize,
    pub s2: usize,
    pub samples: usize,
    pub per_coordinate: Vec<CoordinateDistance>,
    pub stationary: bool,
}

pub fn invariant_distribution_diagnostic(reports: &[RunReport], s1: usize, s2: usize) -> Result<DistributionDistance> {
    if s1 >= s2 {
        return Err(Error::Config(format!("need s1 < s2, got {s1} and {s2}")));
    }
    let usable: Vec<&RunReport> = reports.iter().filter(|r| r.steps() >= s2).collect();
    if usable.len() < 4 {
        return Err(Error::Config(format!("only {} trials reach step {s2}", usable.len())));
    }
    let n = usable[0].n;
    let per_coordinate: Vec<CoordinateDistance> = (0..n)
        .map(|i| {
            let at = |s: usize| usable.iter().map(|r| r.state(s)[i]).collect::<Vec<_>>();
            let (x1, x2) = (at(s1), at(s2));
            let even: Vec<f64> = x2.iter().step_by(2).copied().collect();
            let odd: Vec<f64> = x2.iter().skip(1).step_by(2).copied().collect();
            let between_times = ks_statistic(&x1, &x2);
            let critical = ks_critical(x1.len(), x2.len());
            CoordinateDistance {
                coordinate: i,
                between_times,
                between_groups: ks_statistic(&even, &odd),
                critical,
                within_null: between_times <= critical,
            }
        })
        .collect();
    Ok(DistributionDistance {
        s1,
        s2,
        samples: usable.len(),
        stationary: per_coordinate.iter().all(|c| c.within_null),
        per_coordinate,
    })
}

/// All diagnostics of one batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityDiagnostics {
    pub moments: MomentDiagnostic,
    pub tail: TailDecay,
    pub drift: DriftCheck,
    pub distribution: Option<DistributionDistance>,
}

pub fn stability_diagnostics(reports: &[RunReport], f_radius: f64, cfg: &DiagnosticConfig) -> Result<StabilityDiagnostics> {
    let steps = reports.iter().map(RunReport::steps).max().unwrap_or(0);
    Ok(StabilityDiagnostics {
        moments: moment_diagnostic(reports, cfg),
        tail: tail_decay_diagnostic(reports, cfg),
        drift: drift_diagnostic(reports, f_radius, cfg)?,
        distribution: if steps >= 4 { invariant_distribution_diagnostic(reports, steps / 2, steps).ok() } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_loop::{LoopConfig, LoopPlan};
    use crate::system::{LinearSystem, Sensor};
    use proptest::prelude::*;
    use statrs::function::erf::erfc;

    fn re(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    #[test]
    fn min_rate_examples() {
        assert!((min_rate(&re(&[2.0, 3.0])) - (1.0 + 3f64.log2())).abs() < 1e-15);
        assert_eq!(min_rate(&re(&[0.5])), 0.0);
        let pair = [Complex64::new(1.0, 1.0), Complex64::new(1.0, -1.0)];
        assert!((min_rate(&pair) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn power_error_is_zero_only_when_exact() {
        assert_eq!(power_with_error(2.0, 40), (2f64.powi(40), 0.0));
        assert_eq!(power_with_error(1.5, 20).1, 0.0);
        let (x, rel) = power_with_error(1.5, 46);
        assert!(rel > 0.0 && rel < 1e-14);
        // 1.5^46 = 3^46 / 2^46 exactly
        let exact = 3f64.powi(23) * 3f64.powi(23) / 2f64.powi(46);
        assert!(((x - exact) / exact).abs() <= 2.0 * rel);
    }

    #[test]
    fn avg_rate_examples() {
        let r = avg_rate(&re(&[2.0]), 1, 1, 0.5, 0).unwrap();
        assert!((r.paper_formula - 6f64.log2() / 2.0).abs() < 1e-12);
        assert!((r.implemented_policy - 7f64.log2() / 2.0).abs() < 1e-12);
        let r = avg_rate(&re(&[2.0]), 20, 1, 0.5, 0).unwrap();
        let oracle = ((2f64.powi(40) + 3.0).log2()) / 40.0;
        assert!((r.implemented_policy - oracle).abs() < 1e-12);
        assert!((r.implemented_policy - 1.0).abs() < 1e-6 && r.excess > 0.0);
        let a = avg_rate(&re(&[2.0, 3.0]), 3, 2, 0.5, 0).unwrap();
        let b = avg_rate(&re(&[2.0, 3.0]), 3, 2, 0.5, 1).unwrap();
        assert!((b.implemented_policy - a.implemented_policy - 1.0 / 12.0).abs() < 1e-12);
        assert!(avg_rate(&re(&[2.0]), 0, 1, 0.5, 0).is_err());
    }

    #[test]
    fn huge_powers_stay_finite() {
        let r = avg_rate(&re(&[3.0]), 50, 2, 0.5, 0).unwrap();
        assert!(r.excess > 0.0 && r.excess < 1e-90);
        // 3^4000 overflows a float; the overhead underflows to zero instead
        let r = avg_rate(&re(&[3.0]), 500, 4, 0.5, 0).unwrap();
        assert!(r.excess >= 0.0 && r.excess < 1e-300);
        assert!((r.implemented_policy - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn tail_bound_examples() {
        let one = Matrix::identity(1, 1);
        let b = gaussian_tail_bound(&one, &[2.0]).unwrap();
        assert!((b - 2.0 / (2.0 * PI).sqrt() * (-2.0f64).exp()).abs() < 1e-12);
        assert!((b - 0.10798).abs() < 1e-5);
        let truth = erfc(2.0 / 2f64.sqrt());
        assert!((truth - 0.04550).abs() < 1e-5 && b >= truth);
        let b2 = gaussian_tail_bound(&Matrix::identity(2, 2), &[2.0, 2.0]).unwrap();
        assert!((b2 - 0.21596).abs() < 1e-5);
        let far = gaussian_tail_bound(&one, &[10.0]).unwrap();
        assert!(far < 1e-20 && far > 0.0);
        assert!(gaussian_tail_bound(&one, &[11.0]).unwrap() < far);
        let sing = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(gaussian_tail_bound(&sing, &[2.0, 2.0]), Err(Error::Input(_))));
        assert!(gaussian_tail_bound(&one, &[0.5]).is_err());
    }

    #[test]
    fn mc_matches_erfc() {
        let est = gaussian_tail_mc(&Matrix::identity(1, 1), &[2.0], 100_000, 3).unwrap();
        let truth = erfc(2.0 / 2f64.sqrt());
        assert!((est.p - truth).abs() < 4.0 * est.se);
    }

    #[test]
    fn synthetic_geometric_tail_is_recovered() {
        let mut src = GaussianSource::new(11, 0);
        let gaps: Vec<usize> = (0..100_000)
            .map(|_| {
                let mut k = 1;
                while src.uniform() < 0.5 {
                    k += 1;
                }
                k
            })
            .collect();
        let fit = tail_decay_from_gaps(&gaps, &[], &DiagnosticConfig::default());
        let (lo, hi) = fit.ci.unwrap();
        assert!(lo <= 0.5f64.ln() && 0.5f64.ln() <= hi, "{lo} {hi}");
        assert!(fit.negative);
    }

    #[test]
    fn always_zoomed_has_empty_tail() {
        let fit = tail_decay_from_gaps(&vec![1; 5000], &[], &DiagnosticConfig::default());
        assert_eq!(fit.survival[0].survival, 0.0);
        assert!(!fit.conclusive);
    }

    #[test]
    fn censoring_enters_the_risk_set() {
        let fit = tail_decay_from_gaps(&[1, 2], &[3], &DiagnosticConfig { min_intervals: 0, ..Default::default() });
        let s: Vec<f64> = fit.survival.iter().map(|p| p.survival).collect();
        // at risk 3, 2, 1; events 1, 1, 0
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15 && (s[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-15);
    }

    fn scalar(lam: f64) -> LinearSystem {
        LinearSystem::new(
            Matrix::from_element(1, 1, lam),
            Matrix::identity(1, 1),
            vec![Sensor::new(Matrix::identity(1, 1))],
        )
        .unwrap()
    }

    #[test]
    fn open_loop_moments_diverge() {
        let mut cfg = LoopConfig::new(400);
        cfg.open_loop = true;
        let plan = LoopPlan::new(&scalar(2.0), &cfg).unwrap();
        let reports = plan.run_trials(1, 20);
        let m = moment_diagnostic(&reports, &DiagnosticConfig::default());
        assert_eq!(m.verdict, Verdict::Diverging);
    }

    #[test]
    fn noiseless_moments_vanish() {
        let sys = scalar(2.0)
            .with_process_noise(Matrix::zeros(1, 1))
            .unwrap()
            .with_initial_state(crate::Vector::from_element(1, 3.0), Matrix::zeros(1, 1))
            .unwrap();
        let mut sys = sys;
        sys.sensors[0].sigma_v = Matrix::zeros(1, 1);
        let mut cfg = LoopConfig::new(400);
        cfg.zoom.c = 1e-8;
        let plan = LoopPlan::new(&sys, &cfg).unwrap();
        let reports = plan.run_trials(0, 2);
        let m = moment_diagnostic(&reports, &DiagnosticConfig { min_trials: 2, ..Default::default() });
        assert_eq!(m.verdict, Verdict::Bounded);
        assert!(*m.series.mean.last().unwrap() < 1e-10 * m.series.mean[0]);
    }

    #[test]
    fn controlled_scalar_diagnostics() {
        let plan = LoopPlan::new(&scalar(2.0), &LoopConfig::new(2000)).unwrap();
        let reports = plan.run_trials(0, 200);
        let cfg = DiagnosticConfig::default();
        let m = moment_diagnostic(&reports, &cfg);
        assert_eq!(m.verdict, Verdict::Bounded);
        assert!(m.kappa.unwrap() > 0.0);
        let gaps: Vec<usize> = reports.iter().flat_map(|r| r.stopping_times().gaps()).collect();
        let mean = gaps.iter().sum::<usize>() as f64 / gaps.len() as f64;
        assert!(mean.is_finite() && mean >= 1.0);
        let d = invariant_distribution_diagnostic(&reports, 1000, 2000).unwrap();
        assert!(d.per_coordinate[0].between_groups <= 2.0 * d.per_coordinate[0].critical);
    }

    #[test]
    fn open_loop_distance_grows() {
        let mut cfg = LoopConfig::new(40);
        cfg.open_loop = true;
        let plan = LoopPlan::new(&scalar(1.02), &cfg).unwrap();
        let reports = plan.run_trials(2, 400);
        let near = invariant_distribution_diagnostic(&reports, 5, 6).unwrap().per_coordinate[0].between_times;
        let far = invariant_distribution_diagnostic(&reports, 5, 40).unwrap().per_coordinate[0].between_times;
        assert!(far > near);
    }

    #[test]
    fn drift_groups_and_adversarial_failure() {
        let base = LoopPlan::new(&scalar(2.0), &LoopConfig::new(2000)).unwrap();
        let cfg = DiagnosticConfig::default();
        let d = drift_diagnostic(&base.run_trials(3, 50), base.f_radius, &cfg).unwrap();
        assert!(d.excursions > 0 && d.groups.iter().all(|g| g.count > 0));
        assert!(d.mean_indicator > 0.0 && d.mean_indicator <= 1.0);

        let mut lc = LoopConfig::new(2000);
        lc.zoom.rho = 10.0;
        lc.zoom.epsilon = 0.01;
        lc.zoom.eta = 0.005;
        let adv = LoopPlan::new(&scalar(2.0), &lc).unwrap();
        let d = drift_diagnostic(&adv.run_trials(3, 50), adv.f_radius, &cfg).unwrap();
        assert_eq!(d.verdict, DriftVerdict::Failure, "{:?}", d.groups);
    }

    #[test]
    fn drift_on_inside_only_runs() {
        let plan = LoopPlan::new(&scalar(2.0), &LoopConfig::new(50)).unwrap();
        let d = drift_diagnostic(&plan.run_trials(0, 5), 1e12, &DiagnosticConfig::default()).unwrap();
        assert_eq!(d.mean_indicator, 1.0);
        assert_eq!(d.verdict, DriftVerdict::Inconclusive);
    }

    fn spd(vals: &[f64], n: usize) -> Matrix {
        let g = Matrix::from_row_slice(n, n, &vals[..n * n]);
        &g * g.transpose() + Matrix::identity(n, n) * 0.1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn min_rate_invariances(mods in prop::collection::vec((0.1f64..5.0, 0.0f64..3.0), 1..6), rot in 0usize..6) {
            let mut eigs: Vec<Complex64> = Vec::new();
            for (m, th) in &mods {
                let z = Complex64::from_polar(*m, *th);
                eigs.push(z);
                eigs.push(z.conj());
            }
            let base = min_rate(&eigs);
            let len = eigs.len();
            eigs.rotate_left(rot % len);
            prop_assert!((min_rate(&eigs) - base).abs() < 1e-12);
            let conj: Vec<Complex64> = eigs.iter().map(|z| z.conj()).collect();
            prop_assert!((min_rate(&conj) - base).abs() < 1e-12);
        }

        #[test]
        fn avg_rate_dominates_and_overhead_is_bounded(
            mods in prop::collection::vec(1.0001f64..6.0, 1..5),
            n in 1usize..4,
            t in 1u32..40,
            eps in 0.0f64..0.5,
            m in 0usize..4,
        ) {
            let eigs = re(&mods);
            let r = avg_rate(&eigs, t, n, eps, m).unwrap();
            let p = (t as usize * 2 * n) as f64;
            prop_assert!(r.implemented_policy >= min_rate(&eigs));
            prop_assert!(r.paper_formula <= r.implemented_policy);
            prop_assert!(r.excess <= (2.0 * mods.len() as f64 + m as f64) / p + 1e-12);
        }

        #[test]
        fn avg_rate_decreases_once_the_period_gain_beats_rounding(
            mods in prop::collection::vec(1.0f64..6.0, 1..5),
            n in 1usize..3,
            eps in 0.0f64..0.5,
            m in 0usize..3,
        ) {
            // |lambda|^{2n} >= 3 keeps the rounding overhead shrinking faster than the period grows
            let floor = 3f64.powf(1.0 / (2 * n) as f64);
            let eigs = re(&mods.iter().map(|&x| x.max(floor)).collect::<Vec<_>>());
            let mut prev = f64::INFINITY;
            for t in 1..60 {
                let r = avg_rate(&eigs, t, n, eps, m).unwrap();
                prop_assert!(r.excess <= prev, "t = {}", t);
                prop_assert!(r.excess > 0.0);
                prev = r.excess;
            }
        }

        #[test]
        fn tail_bound_dominates_monte_carlo(
            n in 1usize..5,
            g in prop::collection::vec(-1.5f64..1.5, 16),
            d in prop::collection::vec(1.0f64..4.0, 4),
            seed in 0u64..1000,
        ) {
            let sigma = spd(&g, n);
            let bound = gaussian_tail_bound(&sigma, &d[..n]).unwrap();
            let mc = gaussian_tail_mc(&sigma, &d[..n], 20_000, seed).unwrap();
            prop_assert!(bound >= mc.p - 4.0 * mc.se, "{} vs {}", bound, mc.p);
        }

        #[test]
        fn tail_bound_is_monotone(
            g in prop::collection::vec(-1.5f64..1.5, 9),
            d in prop::collection::vec(1.0f64..6.0, 3),
            bump in 0.01f64..3.0,
            i in 0usize..3,
        ) {
            let sigma = spd(&g, 3);
            let base = gaussian_tail_log_bound(&sigma, &d).unwrap();
            let mut up = d.clone();
            up[i] += bump;
            prop_assert!(gaussian_tail_log_bound(&sigma, &up).unwrap() < base);
        }
    }
}

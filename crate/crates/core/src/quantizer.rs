//! Adaptive uniform quantizer with zoom-in / zoom-out bin updates.
//!
//! Scalar symbols run over `1..=K+1` with `K+1` the overflow symbol. Vector
//! symbols run over `0..=prod K_i` with `0` meaning some component overflowed.

use num_traits::Float;
use serde::Serialize;

use crate::error::{Error, Result};

/// Vector channel symbol.
pub type Symbol = u128;

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 converts to any Float")
}

fn check_k(k: u32) -> Result<()> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Input(format!("bin count K must be even and >= 2, got {k}")));
    }
    Ok(())
}

fn check_delta<T: Float>(delta: T) -> Result<()> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::Input("bin size must be positive and finite".into()));
    }
    Ok(())
}

/// Granular bin count for one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScalarQuantizerConfig {
    pub k: u32,
}

impl ScalarQuantizerConfig {
    pub fn new(k: u32) -> Result<Self> {
        check_k(k)?;
        Ok(ScalarQuantizerConfig { k })
    }

    /// `ceil(|lambda| + eps)`, rounded up to the next even integer when odd.
    pub fn for_eigenvalue(lam_abs: f64, epsilon: f64) -> Result<Self> {
        let raw = (lam_abs + epsilon).ceil();
        if !raw.is_finite() || raw > (u32::MAX - 1) as f64 {
            return Err(Error::Numeric(format!("bin count for |lambda| = {lam_abs} does not fit in 32 bits")));
        }
        let mut k = (raw as u32).max(2);
        if k % 2 == 1 {
            k += 1;
        }
        Self::new(k)
    }
}

/// Integer lattice for the bin sizes: every update moves `log2(Delta)` by a
/// multiple of `ell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lattice {
    pub ell: f64,
    /// `log2(rho |lambda|) / ell`.
    pub grow_steps: i64,
    /// `-log2(shrink factor) / ell`.
    pub shrink_steps: i64,
}

/// Zoom parameters. `floor` holds the thresholds `L^i` below which bins stop shrinking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoomParams<T> {
    pub rho: T,
    pub epsilon: T,
    pub eta: T,
    pub delta: T,
    pub c: T,
    pub floor: Vec<T>,
    pub lattice: Option<Lattice>,
}

impl<T: Float> ZoomParams<T> {
    pub fn new(rho: T, epsilon: T, eta: T, delta: T, c: T) -> Result<Self> {
        let z = ZoomParams { rho, epsilon, eta, delta, c, floor: Vec::new(), lattice: None };
        z.validate()?;
        Ok(z)
    }

    /// Defaults: rho 1.5, eps 0.5, eta 0.25, delta 0.5, c 1.
    pub fn standard() -> Self {
        Self::new(cast(1.5), cast(0.5), cast(0.25), cast(0.5), T::one()).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.rho, self.epsilon, self.eta, self.delta, self.c].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("zoom parameters must be finite".into()));
        }
        if !(self.rho > T::one()) {
            return Err(Error::Config("rho must exceed 1".into()));
        }
        if !(self.eta > T::zero() && self.eta < self.epsilon) {
            return Err(Error::Config("eta must lie strictly between 0 and epsilon".into()));
        }
        if !(self.delta > T::zero()) {
            return Err(Error::Config("the bin-ordering ratio delta must be positive".into()));
        }
        if !(self.c > T::zero() && self.c <= T::one()) {
            return Err(Error::Config("c must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// `|lambda| / (|lambda| + eps - eta)`.
    pub fn shrink(&self, lam_abs: T) -> T {
        lam_abs / (lam_abs + self.epsilon - self.eta)
    }

    /// `rho |lambda|`.
    pub fn grow(&self, lam_abs: T) -> T {
        self.rho * lam_abs
    }

    /// `L * shrink`, the strict lower bound every bin size stays above.
    pub fn floor_bar(&self, lam_abs: T) -> Vec<T> {
        let s = self.shrink(lam_abs);
        self.floor.iter().map(|&l| l * s).collect()
    }
}

/// Real eigenvalues use a strict geometric ladder; complex pairs share a bin size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BinMode {
    Real,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinState<T> {
    pub delta: Vec<T>,
    pub lattice_exponents: Option<Vec<i64>>,
}

impl<T: Float> BinState<T> {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

pub fn scalar_encode<T: Float>(x: T, delta: T, k: u32) -> Result<u32> {
    check_delta(delta)?;
    check_k(k)?;
    if x.is_nan() {
        return Err(Error::Input("cannot encode NaN".into()));
    }
    let half = cast::<T>((k / 2) as f64);
    let edge = half * delta;
    if x.abs() > edge {
        return Ok(k + 1);
    }
    // bin j covers [lower(j), lower(j+1)) with lower(j) = (j - 1 - K/2) * delta
    let lower = |j: u32| cast::<T>(j as f64 - 1.0 - (k / 2) as f64) * delta;
    let guess = (x / delta + half).floor().to_f64().unwrap_or(0.0) + 1.0;
    let mut j = guess.clamp(1.0, k as f64) as u32;
    while j > 1 && x < lower(j) {
        j -= 1;
    }
    while j < k && x >= lower(j + 1) {
        j += 1;
    }
    // a rounded center can leave x just past half a bin; a neighbour may not
    let dist = |i: u32| (x - center(i, delta, k)).abs();
    let mut best = j;
    for i in [j.saturating_sub(1).max(1), (j + 1).min(k)] {
        if dist(i) < dist(best) {
            best = i;
        }
    }
    Ok(best)
}

/// Reconstruction point of granular symbol `symbol`. The outermost points
/// are nudged up by at most an ulp so that `x = +-(K/2) delta` itself decodes
/// within half a bin.
fn center<T: Float>(symbol: u32, delta: T, k: u32) -> T {
    let offset = (2.0 * symbol as f64 - k as f64 - 1.0) / 2.0;
    let c = cast::<T>(offset) * delta;
    if symbol != 1 && symbol != k {
        return c;
    }
    let half_bin = delta / cast::<T>(2.0);
    let edge = cast::<T>((k / 2) as f64) * delta;
    let mut top = c.abs();
    // edge - top is exact here, both lie within a factor two
    while edge - top > half_bin {
        top = top + top * T::epsilon();
    }
    if symbol == k {
        top
    } else {
        -top
    }
}

pub fn scalar_decode<T: Float>(symbol: u32, delta: T, k: u32) -> Result<T> {
    check_delta(delta)?;
    check_k(k)?;
    if symbol == 0 || symbol > k + 1 {
        return Err(Error::Input(format!("scalar symbol {symbol} outside 1..={}", k + 1)));
    }
    if symbol == k + 1 {
        return Ok(T::zero());
    }
    Ok(center(symbol, delta, k))
}

/// Number of granular vector symbols, `prod K_i`.
pub fn alphabet_size(ks: &[u32]) -> Result<Symbol> {
    ks.iter().try_fold(1 as Symbol, |acc, &k| {
        acc.checked_mul(k as Symbol)
            .ok_or_else(|| Error::Numeric("vector alphabet exceeds 128 bits".into()))
    })
}

/// Per-component scalar symbols.
pub fn encode_components<T: Float>(y: &[T], bins: &BinState<T>, ks: &[u32]) -> Result<Vec<u32>> {
    if y.len() != bins.len() || y.len() != ks.len() {
        return Err(Error::Input(format!(
            "component counts differ: y {}, bins {}, K {}",
            y.len(),
            bins.len(),
            ks.len()
        )));
    }
    y.iter()
        .zip(&bins.delta)
        .zip(ks)
        .map(|((&v, &d), &k)| scalar_encode(v, d, k))
        .collect()
}

/// Mixed-radix combination of component symbols; 0 when any component overflowed.
pub fn combine_symbols(digits: &[u32], ks: &[u32]) -> Result<Symbol> {
    if digits.iter().zip(ks).any(|(&q, &k)| q == k + 1) {
        return Ok(0);
    }
    let mut acc: Symbol = 0;
    for (&q, &k) in digits.iter().zip(ks) {
        acc = acc
            .checked_mul(k as Symbol)
            .and_then(|a| a.checked_add((q - 1) as Symbol))
            .ok_or_else(|| Error::Numeric("vector alphabet exceeds 128 bits".into()))?;
    }
    Ok(acc + 1)
}

/// Inverse of [`combine_symbols`] on granular symbols.
pub fn split_symbol(q: Symbol, ks: &[u32]) -> Result<Vec<u32>> {
    let size = alphabet_size(ks)?;
    if q == 0 || q > size {
        return Err(Error::Input(format!("vector symbol {q} outside 1..={size}")));
    }
    let mut rest = q - 1;
    let mut digits = vec![0u32; ks.len()];
    for i in (0..ks.len()).rev() {
        let k = ks[i] as Symbol;
        digits[i] = (rest % k) as u32 + 1;
        rest /= k;
    }
    Ok(digits)
}

pub fn vector_encode<T: Float>(y: &[T], bins: &BinState<T>, ks: &[u32]) -> Result<Symbol> {
    combine_symbols(&encode_components(y, bins, ks)?, ks)
}

pub fn vector_decode<T: Float>(q: Symbol, bins: &BinState<T>, ks: &[u32]) -> Result<Vec<T>> {
    if bins.len() != ks.len() {
        return Err(Error::Input("bin state and K differ in length".into()));
    }
    if q == 0 {
        alphabet_size(ks)?;
        return Ok(vec![T::zero(); ks.len()]);
    }
    split_symbol(q, ks)?
        .iter()
        .zip(&bins.delta)
        .zip(ks)
        .map(|((&s, &d), &k)| scalar_decode(s, d, k))
        .collect()
}

/// Zoom update driven by the overflow flag, with one `|lambda|` per component.
pub fn zoom_update<T: Float>(overflow: bool, bins: &BinState<T>, zoom: &ZoomParams<T>, lam_abs: &[T]) -> BinState<T> {
    let n = bins.len();
    debug_assert_eq!(lam_abs.len(), n);
    let exponents = match (&bins.lattice_exponents, zoom.lattice) {
        (Some(e), Some(lat)) => Some(
            (0..n)
                .map(|i| {
                    if overflow {
                        e[i] + lat.grow_steps
                    } else if bins.delta[i] <= zoom.floor[i] {
                        e[i]
                    } else {
                        e[i] - lat.shrink_steps
                    }
                })
                .collect::<Vec<i64>>(),
        ),
        _ => None,
    };
    let delta = match (&exponents, zoom.lattice) {
        (Some(e), Some(lat)) => e.iter().map(|&k| cast::<T>((lat.ell * k as f64).exp2())).collect(),
        _ => (0..n)
            .map(|i| {
                let d = bins.delta[i];
                if overflow {
                    d * zoom.grow(lam_abs[i])
                } else if d <= zoom.floor[i] {
                    d
                } else {
                    d * zoom.shrink(lam_abs[i])
                }
            })
            .collect(),
    };
    BinState { delta, lattice_exponents: exponents }
}

/// Zoom update for a single `|lambda|` shared by all components.
pub fn update_bins<T: Float>(q: Symbol, bins: &BinState<T>, zoom: &ZoomParams<T>, lam_abs: T) -> BinState<T> {
    zoom_update(q == 0, bins, zoom, &vec![lam_abs; bins.len()])
}

/// Ladder of initial bin sizes and the floor `L = c * Delta_0`.
///
/// With a lattice attached to `zoom`, `delta1_0` is rounded up to the lattice
/// and the ladder ratio down to a whole number of lattice steps.
pub fn init_bins<T: Float>(
    delta1_0: T,
    n: usize,
    mode: BinMode,
    zoom: &ZoomParams<T>,
) -> Result<(BinState<T>, ZoomParams<T>)> {
    check_delta(delta1_0)?;
    zoom.validate()?;
    if n == 0 {
        return Err(Error::Input("cannot build bins for zero components".into()));
    }
    if mode == BinMode::Complex && n % 2 == 1 {
        return Err(Error::Input("complex mode needs an even number of components".into()));
    }
    let level = |i: usize| match mode {
        BinMode::Real => i,
        BinMode::Complex => i / 2,
    };
    let (delta, exponents) = match zoom.lattice {
        Some(lat) => {
            let top = (delta1_0.to_f64().unwrap().log2() / lat.ell).ceil() as i64;
            let ratio_steps = ((-zoom.delta.to_f64().unwrap().log2() / lat.ell).round() as i64).max(1);
            let e: Vec<i64> = (0..n).map(|i| top - ratio_steps * level(i) as i64).collect();
            let d: Vec<T> = e.iter().map(|&k| cast::<T>((lat.ell * k as f64).exp2())).collect();
            (d, Some(e))
        }
        None => ((0..n).map(|i| delta1_0 * zoom.delta.powi(level(i) as i32)).collect(), None),
    };
    let mut zoom = zoom.clone();
    zoom.floor = delta.iter().map(|&d: &T| d * zoom.c).collect();
    Ok((BinState { delta, lattice_exponents: exponents }, zoom))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Nudge `rho` and `epsilon` so both zoom factors become powers of `2^ell`
/// with coprime exponents, changing each by at most 10%.
pub fn snap_to_lattice<T: Float>(zoom: &ZoomParams<T>, lam_abs: T, ell: T) -> Result<ZoomParams<T>> {
    zoom.validate()?;
    let ell_f = ell.to_f64().unwrap_or(f64::NAN);
    if !(ell_f > 0.0) || !ell_f.is_finite() {
        return Err(Error::Config("lattice step must be positive".into()));
    }
    let lam = lam_abs.to_f64().unwrap();
    let rho = zoom.rho.to_f64().unwrap();
    let eps = zoom.epsilon.to_f64().unwrap();
    let eta = zoom.eta.to_f64().unwrap();
    let shrink = lam / (lam + eps - eta);
    let a0 = ((rho * lam).log2() / ell_f).round() as i64;
    let b0 = (-(shrink.log2()) / ell_f).round() as i64;

    let mut best: Option<(f64, i64, i64, f64, f64)> = None;
    for a in (a0 - 2).max(1)..=a0 + 2 {
        for b in (b0 - 2).max(1)..=b0 + 2 {
            if gcd(a, b) != 1 {
                continue;
            }
            let rho_new = (a as f64 * ell_f).exp2() / lam;
            let eps_new = eta + lam * ((b as f64 * ell_f).exp2() - 1.0);
            if !(rho_new > 1.0 && eps_new > eta && eps_new.is_finite()) {
                continue;
            }
            let change = ((rho_new - rho) / rho).abs().max(((eps_new - eps) / eps).abs());
            if change <= 0.1 + 1e-12 && best.is_none_or(|(c, ..)| change < c) {
                best = Some((change, a, b, rho_new, eps_new));
            }
        }
    }
    let (change, a, b, rho_new, eps_new) = best.ok_or_else(|| {
        Error::Config(format!(
            "no lattice adjustment with step {ell_f} keeps rho and epsilon within 10% (|lambda| = {lam})"
        ))
    })?;
    let mut out = zoom.clone();
    if change > 1e-12 {
        out.rho = cast(rho_new);
        out.epsilon = cast(eps_new);
    }
    out.lattice = Some(Lattice { ell: ell_f, grow_steps: a, shrink_steps: b });
    Ok(out)
}

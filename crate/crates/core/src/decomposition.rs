//! Block observability decomposition for several sensors, eigenspace
//! assignment, and the rates those structures support.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jordan::{self, RealJordan};
use crate::linalg::{self, Matrix, RANK_TOL};
use crate::system::{observability_matrix, LinearSystem};

/// One diagonal block of the decomposition, owned by a sensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompBlock {
    pub sensor: usize,
    pub start: usize,
    pub dim: usize,
    #[serde(skip)]
    pub eigenvalues: Vec<Complex64>,
}

impl DecompBlock {
    pub fn moduli(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|z| z.norm()).collect()
    }
}

/// `A_bar = Q A Q^{-1}` block upper triangular. Blocks are listed top to
/// bottom; the bottom block belongs to the first sensor in `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDecomposition {
    pub q: Matrix,
    pub q_inv: Matrix,
    pub a_bar: Matrix,
    /// `C^j Q^{-1}`, indexed by sensor.
    pub c_bars: Vec<Matrix>,
    pub order: Vec<usize>,
    pub blocks: Vec<DecompBlock>,
}

fn inf_norm(m: &Matrix) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

impl BlockDecomposition {
    /// Block sizes top to bottom.
    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim).collect()
    }

    /// `||below-block part of A_bar||_inf / ||A_bar||_inf`.
    pub fn below_block_residual(&self) -> f64 {
        let mut below = self.a_bar.clone();
        for (k, blk) in self.blocks.iter().enumerate() {
            for upper in &self.blocks[..=k] {
                for r in upper.start..upper.start + upper.dim {
                    for c in blk.start..blk.start + blk.dim {
                        below[(r, c)] = 0.0;
                    }
                }
            }
        }
        inf_norm(&below) / inf_norm(&self.a_bar).max(1e-300)
    }

    /// Largest relative weight a sensor puts on coordinates of blocks chosen after it.
    pub fn c_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, blk) in self.blocks.iter().enumerate() {
            let c = &self.c_bars[blk.sensor];
            let mut masked = Matrix::zeros(c.nrows(), c.ncols());
            for upper in &self.blocks[..k] {
                for col in upper.start..upper.start + upper.dim {
                    masked.set_column(col, &c.column(col));
                }
            }
            worst = worst.max(inf_norm(&masked) / inf_norm(c).max(1e-300));
        }
        worst
    }

    /// Whether the block at `upper` is driven by the block at `lower` (positions top to bottom).
    pub fn coupled(&self, upper: usize, lower: usize) -> bool {
        let (u, l) = (&self.blocks[upper], &self.blocks[lower]);
        if u.dim == 0 || l.dim == 0 {
            return false;
        }
        let part = self.a_bar.view((u.start, l.start), (u.dim, l.dim)).into_owned();
        inf_norm(&part) > 1e-9 * inf_norm(&self.a_bar).max(1e-300)
    }

    pub fn spectrum(&self) -> Vec<Complex64> {
        let mut all: Vec<Complex64> = self.blocks.iter().flat_map(|b| b.eigenvalues.clone()).collect();
        linalg::sort_eigenvalues(&mut all);
        all
    }

    /// Largest modulus each block inherits through nonzero coupling from below.
    pub fn inherited_moduli(&self) -> Vec<f64> {
        let m = self.blocks.len();
        let mut reach = vec![0.0f64; m];
        let mut inherited = vec![0.0f64; m];
        for j in (0..m).rev() {
            inherited[j] = (j + 1..m).filter(|&h| self.coupled(j, h)).map(|h| reach[h]).fold(0.0, f64::max);
            reach[j] = self.blocks[j].moduli().into_iter().fold(inherited[j], f64::max);
        }
        inherited
    }

    /// Effective growth moduli per block: the own modulus raised to the
    /// largest modulus reachable through nonzero coupling from below.
    pub fn effective_moduli(&self) -> Vec<Vec<f64>> {
        self.inherited_moduli()
            .into_iter()
            .zip(&self.blocks)
            .map(|(h, b)| b.moduli().into_iter().map(|l| l.max(h)).collect())
            .collect()
    }
}

/// Build the decomposition with sensors taken in `order` (0-based ids).
pub fn build_block_decomposition(sys: &LinearSystem, order: &[usize]) -> Result<BlockDecomposition> {
    let n = sys.n();
    let mut seen = vec![false; sys.num_sensors()];
    if order.len() != sys.num_sensors() || order.iter().any(|&j| j >= seen.len() || std::mem::replace(&mut seen[j], true)) {
        return Err(Error::Input(format!("sensor order {order:?} is not a permutation of 0..{}", sys.num_sensors())));
    }
    let mut basis = Matrix::zeros(0, n);
    let mut groups: Vec<(usize, Matrix)> = Vec::new();
    for &j in order {
        let u = linalg::row_space_basis(&observability_matrix(&sys.sensors[j].c, &sys.a), RANK_TOL);
        let grown = linalg::row_space_basis(&linalg::vstack(&[basis.clone(), u], n), RANK_TOL);
        let new = grown.nrows().saturating_sub(basis.nrows());
        let rows = if new == 0 {
            Matrix::zeros(0, n)
        } else {
            // orthogonal complement of what the earlier sensors already see
            let projected = &grown * (Matrix::identity(n, n) - basis.transpose() * &basis);
            let leading = linalg::row_space_basis(&projected, 0.0);
            leading.rows(0, new.min(leading.nrows())).into_owned()
        };
        if new > 0 {
            basis = linalg::vstack(&[basis.clone(), rows.clone()], n);
        }
        groups.push((j, rows));
    }
    if basis.nrows() < n {
        return Err(Error::Structural("the sensors are not jointly observable".into()));
    }
    // last sensor on top
    groups.reverse();
    let mut blocks = Vec::with_capacity(groups.len());
    let mut start = 0;
    for (j, rows) in &groups {
        blocks.push(DecompBlock { sensor: *j, start, dim: rows.nrows(), eigenvalues: Vec::new() });
        start += rows.nrows();
    }
    let q = linalg::vstack(&groups.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(), n);
    let q_inv = linalg::inverse(&q)?;
    let a_bar = &q * &sys.a * &q_inv;
    for b in &mut blocks {
        b.eigenvalues = linalg::eigenvalues(&a_bar.view((b.start, b.start), (b.dim, b.dim)).into_owned());
    }
    let c_bars = sys.sensors.iter().map(|s| &s.c * &q_inv).collect();
    Ok(BlockDecomposition { q, q_inv, a_bar, c_bars, order: order.to_vec(), blocks })
}

/// Coupling-aware sufficient rate in bits per stage.
pub fn sufficient_rate(d: &BlockDecomposition) -> f64 {
    d.effective_moduli().iter().flatten().map(|&l| l.max(1.0).log2()).sum()
}

/// Sufficient rate when every lower block is assumed to drive every upper one.
pub fn sufficient_rate_worst_case(d: &BlockDecomposition) -> f64 {
    let m = d.blocks.len();
    let mut total = 0.0;
    let mut below = 0.0f64;
    for j in (0..m).rev() {
        let own = d.blocks[j].moduli();
        total += own.iter().map(|&l| l.max(below).max(1.0).log2()).sum::<f64>();
        below = own.iter().copied().fold(below, f64::max);
    }
    total
}

/// Every lower block's largest modulus is at most every upper block's smallest.
pub fn check_decreasing_order(d: &BlockDecomposition) -> bool {
    let mods: Vec<Vec<f64>> = d.blocks.iter().filter(|b| b.dim > 0).map(|b| b.moduli()).collect();
    (0..mods.len()).all(|upper| {
        let min_up = mods[upper].iter().copied().fold(f64::INFINITY, f64::min);
        mods[upper + 1..].iter().all(|low| low.iter().all(|&l| l <= min_up * (1.0 + 1e-12)))
    })
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// First sensor order (lexicographic) whose decomposition passes [`check_decreasing_order`].
pub fn search_decreasing_order(sys: &LinearSystem) -> Result<Option<BlockDecomposition>> {
    if sys.num_sensors() > 6 {
        return Err(Error::Unsupported("order search is limited to at most 6 sensors".into()));
    }
    for order in permutations(sys.num_sensors()) {
        let d = build_block_decomposition(sys, &order)?;
        if check_decreasing_order(&d) {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

/// Jordan blocks assigned to sensors whose observable subspace contains them.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenspaceAssignment {
    /// `(block index in the original Jordan order, sensor)`.
    pub assignments: Vec<(usize, usize)>,
    /// Jordan decomposition with blocks regrouped by sensor (ascending sensor id).
    pub jordan: RealJordan,
    /// Sensor owning each regrouped block.
    pub block_sensor: Vec<usize>,
    /// Rows of the regrouped transform, `Q = jordan.p`.
    pub q: Matrix,
    /// Per regrouped block: weights `K` with `K * O_j` equal to the block's transform rows.
    pub coefficient_maps: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EigenspaceCheck {
    Assigned(EigenspaceAssignment),
    Violated { unassigned: Vec<usize> },
}

/// Assign the blocks of a given Jordan decomposition.
pub fn assign_eigenspaces(sys: &LinearSystem, rj: &RealJordan) -> EigenspaceCheck {
    let obs: Vec<Matrix> = sys.sensors.iter().map(|s| observability_matrix(&s.c, &sys.a)).collect();
    let bases: Vec<Matrix> = obs.iter().map(|o| linalg::row_space_basis(o, RANK_TOL)).collect();
    let mut assignments = Vec::new();
    let mut unassigned = Vec::new();
    for (i, blk) in rj.blocks.iter().enumerate() {
        let rows = rj.p.rows(blk.start, blk.dim).into_owned();
        let owner = bases.iter().position(|u| {
            let resid = &rows - &rows * u.transpose() * u;
            resid.norm() < 1e-9 * rows.norm().max(1e-300)
        });
        match owner {
            Some(j) => assignments.push((i, j)),
            None => unassigned.push(i),
        }
    }
    if !unassigned.is_empty() {
        return EigenspaceCheck::Violated { unassigned };
    }
    let mut order: Vec<(usize, usize)> = assignments.clone();
    order.sort_by_key(|&(i, j)| (j, i));
    let jordan = rj.permute_blocks(&order.iter().map(|&(i, _)| i).collect::<Vec<_>>());
    let block_sensor: Vec<usize> = order.iter().map(|&(_, j)| j).collect();
    let coefficient_maps = jordan
        .blocks
        .iter()
        .zip(&block_sensor)
        .map(|(blk, &j)| jordan.p.rows(blk.start, blk.dim) * linalg::pinv(&obs[j], 1e-12))
        .collect();
    EigenspaceCheck::Assigned(EigenspaceAssignment {
        assignments,
        q: jordan.p.clone(),
        jordan,
        block_sensor,
        coefficient_maps,
    })
}

/// Test whether every Jordan block of `A` is observed by a single sensor.
pub fn check_eigenspace_assumption(sys: &LinearSystem) -> Result<EigenspaceCheck> {
    Ok(assign_eigenspaces(sys, &jordan::to_real_jordan(&sys.a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Sensor;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, v)
    }

    fn two_sensor(a: Matrix, c1: &[f64], c2: &[f64]) -> LinearSystem {
        let n = a.nrows();
        LinearSystem::new(a, Matrix::identity(n, n), vec![Sensor::new(m(1, n, c1)), Sensor::new(m(1, n, c2))]).unwrap()
    }

    #[test]
    fn diagonal_two_sensors() {
        let sys = two_sensor(m(2, 2, &[2.0, 0.0, 0.0, 3.0]), &[0.0, 1.0], &[1.0, 0.0]);
        let d = build_block_decomposition(&sys, &[0, 1]).unwrap();
        assert_eq!(d.block_dims(), vec![1, 1]);
        // bottom block is sensor 0 with row [0, 1]
        assert_eq!(d.blocks[1].sensor, 0);
        assert!((d.q.row(1).into_owned() - m(1, 2, &[0.0, 1.0])).norm() < 1e-12 || (d.q.row(1).into_owned() + m(1, 2, &[0.0, 1.0])).norm() < 1e-12);
        assert!(d.below_block_residual() < 1e-9 && d.c_residual() < 1e-9);
        assert!((d.blocks[0].moduli()[0] - 2.0).abs() < 1e-9);
        assert!((d.blocks[1].moduli()[0] - 3.0).abs() < 1e-9);
        assert!(!check_decreasing_order(&d));
        // decoupled: no inflation
        assert!((sufficient_rate(&d) - (2f64.log2() + 3f64.log2())).abs() < 1e-9);
        assert!((sufficient_rate_worst_case(&d) - 2.0 * 3f64.log2()).abs() < 1e-9);
    }

    #[test]
    fn coupled_upper_triangular() {
        let sys = two_sensor(m(2, 2, &[2.0, 1.0, 0.0, 3.0]), &[0.0, 1.0], &[1.0, 0.0]);
        let d = build_block_decomposition(&sys, &[0, 1]).unwrap();
        assert!(d.below_block_residual() < 1e-9 && d.c_residual() < 1e-9);
        assert!(d.coupled(0, 1));
        // top {2}, bottom {3}: 2 log2 3
        assert!((sufficient_rate(&d) - 3.169925001442312).abs() < 1e-9);
    }

    #[test]
    fn ordered_blocks_reach_the_floor() {
        let sys = two_sensor(m(2, 2, &[3.0, 1.0, 0.0, 2.0]), &[0.0, 1.0], &[1.0, 0.0]);
        let d = build_block_decomposition(&sys, &[0, 1]).unwrap();
        assert!(check_decreasing_order(&d));
        assert!((sufficient_rate(&d) - 6f64.log2()).abs() < 1e-9);
        let tie = two_sensor(m(2, 2, &[2.0, 1.0, 0.0, 2.0]), &[0.0, 1.0], &[1.0, 0.0]);
        assert!(check_decreasing_order(&build_block_decomposition(&tie, &[0, 1]).unwrap()));
    }

    #[test]
    fn single_sensor_is_one_block() {
        let sys = LinearSystem::new(
            m(2, 2, &[1.0, 2.0, -1.0, 3.0]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[1.0, 0.0]))],
        )
        .unwrap();
        let d = build_block_decomposition(&sys, &[0]).unwrap();
        assert_eq!(d.block_dims(), vec![2]);
        let want: f64 = linalg::eigenvalues(&sys.a).iter().map(|z| z.norm().log2()).sum();
        assert!((sufficient_rate(&d) - want).abs() < 1e-9);
    }

    #[test]
    fn unobservable_is_structural() {
        let sys = two_sensor(m(2, 2, &[2.0, 0.0, 0.0, 3.0]), &[1.0, 0.0], &[2.0, 0.0]);
        assert!(matches!(build_block_decomposition(&sys, &[0, 1]), Err(Error::Structural(_))));
        assert!(build_block_decomposition(&sys, &[0, 0]).is_err());
    }

    #[test]
    fn eigenspace_examples() {
        let sys = two_sensor(m(2, 2, &[2.0, 0.0, 0.0, 3.0]), &[0.0, 1.0], &[1.0, 0.0]);
        let EigenspaceCheck::Assigned(asg) = check_eigenspace_assumption(&sys).unwrap() else { panic!() };
        // Jordan order is by decreasing modulus: block 0 is lambda = 3
        assert_eq!(asg.assignments, vec![(0, 0), (1, 1)]);
        for (k, blk) in asg.jordan.blocks.iter().enumerate() {
            let o = observability_matrix(&sys.sensors[asg.block_sensor[k]].c, &sys.a);
            let rebuilt = &asg.coefficient_maps[k] * o;
            assert!((rebuilt - asg.q.rows(blk.start, blk.dim)).norm() < 1e-9);
        }

        let one = LinearSystem::new(
            m(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            Matrix::identity(2, 2),
            vec![Sensor::new(m(1, 2, &[1.0, 1.0]))],
        )
        .unwrap();
        let EigenspaceCheck::Assigned(asg) = check_eigenspace_assumption(&one).unwrap() else { panic!() };
        assert!(asg.assignments.iter().all(|&(_, j)| j == 0));
    }

    #[test]
    fn violation_is_reported() {
        // repeated eigenvalue: each Jordan coordinate is split across both sensors
        let sys = two_sensor(m(2, 2, &[2.0, 0.0, 0.0, 2.0]), &[1.0, 1.0], &[1.0, -1.0]);
        assert!(check_assumptions_ok(&sys));
        match check_eigenspace_assumption(&sys).unwrap() {
            EigenspaceCheck::Violated { unassigned } => assert_eq!(unassigned, vec![0, 1]),
            EigenspaceCheck::Assigned(a) => panic!("unexpected assignment {:?}", a.assignments),
        }
    }

    fn check_assumptions_ok(sys: &LinearSystem) -> bool {
        crate::system::check_assumptions(sys).jointly_observable
    }

    #[test]
    fn order_search_finds_decreasing_order() {
        let sys = two_sensor(m(2, 2, &[2.0, 0.0, 1.0, 3.0]), &[1.0, 0.0], &[0.0, 1.0]);
        let d = search_decreasing_order(&sys).unwrap().expect("an order exists");
        assert!(check_decreasing_order(&d));
    }
}

//! Exhaustive oracle: a discretized BallWalk on at most 16 lattice states,
//! small enough that every subset can be enumerated.

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_STATES: usize = 16;

/// Slack for floating-point comparisons of exact quantities.
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExactKind {
    Path,
    Grid,
}

/// Finite chain over lattice points: from `i`, propose one of the non-zero
/// lattice offsets of length at most `r_steps` uniformly; stay if the target
/// is not a state.
#[derive(Debug, Clone, Serialize)]
pub struct ExactChain {
    pub kind: ExactKind,
    pub points: Vec<[i32; 2]>,
    pub r_steps: u32,
    pub lazy: bool,
    /// Row-stochastic transition matrix.
    pub p: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
}

impl ExactChain {
    pub fn path(states: usize, r_steps: u32, lazy: bool) -> Result<Self> {
        let pts = (0..states as i32).map(|i| [i, 0]).collect();
        Self::build(ExactKind::Path, pts, r_steps, lazy)
    }

    /// `cols × rows` block of lattice points, row-major.
    pub fn grid(cols: usize, rows: usize, r_steps: u32, lazy: bool) -> Result<Self> {
        let pts = (0..rows as i32).flat_map(|j| (0..cols as i32).map(move |i| [i, j])).collect();
        Self::build(ExactKind::Grid, pts, r_steps, lazy)
    }

    /// Arbitrary 2D lattice points.
    pub fn from_points(points: Vec<[i32; 2]>, r_steps: u32, lazy: bool) -> Result<Self> {
        Self::build(ExactKind::Grid, points, r_steps, lazy)
    }

    fn build(kind: ExactKind, points: Vec<[i32; 2]>, r_steps: u32, lazy: bool) -> Result<Self> {
        let n = points.len();
        if n > MAX_STATES {
            return Err(Error::Resource(format!("exact chain supports at most {MAX_STATES} states, got {n}")));
        }
        if n == 0 || r_steps == 0 {
            return Err(Error::input("exact chain needs at least one state and r_steps >= 1"));
        }
        for (i, a) in points.iter().enumerate() {
            if points[..i].contains(a) {
                return Err(Error::input(format!("duplicate lattice point {a:?}")));
            }
        }
        let r = r_steps as i32;
        let offsets: Vec<[i32; 2]> = match kind {
            ExactKind::Path => (-r..=r).filter(|d| *d != 0).map(|d| [d, 0]).collect(),
            ExactKind::Grid => (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| [dx, dy]))
                .filter(|[dx, dy]| (dx, dy) != (&0, &0) && dx * dx + dy * dy <= r * r)
                .collect(),
        };
        let k = offsets.len() as f64;
        let mut p = vec![vec![0.0; n]; n];
        for (i, a) in points.iter().enumerate() {
            for o in &offsets {
                let b = [a[0] + o[0], a[1] + o[1]];
                match points.iter().position(|q| *q == b) {
                    Some(j) => p[i][j] += 1.0 / k,
                    None => p[i][i] += 1.0 / k,
                }
            }
            if lazy {
                for (j, v) in p[i].iter_mut().enumerate() {
                    *v = 0.5 * *v + if i == j { 0.5 } else { 0.0 };
                }
            }
        }
        // the proposal is symmetric, so the uniform law is stationary
        let stationary = vec![1.0 / n as f64; n];
        Ok(ExactChain { kind, points, r_steps, lazy, p, stationary })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One application of the kernel: `σ ↦ σP`.
    pub fn push(&self, sigma: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            if sigma[i] != 0.0 {
                for j in 0..n {
                    out[j] += sigma[i] * self.p[i][j];
                }
            }
        }
        out
    }

    /// `σ_t` for `t = 0..=t_max`.
    pub fn evolve(&self, sigma0: &[f64], t_max: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(t_max + 1);
        out.push(sigma0.to_vec());
        for t in 0..t_max {
            let next = self.push(&out[t]);
            out.push(next);
        }
        out
    }

    /// Measure of the subset encoded by the bit mask `a`.
    pub fn measure(&self, dist: &[f64], a: u32) -> f64 {
        (0..self.len()).filter(|i| a >> i & 1 == 1).map(|i| dist[i]).sum()
    }

    /// `Φ(A) = Σ_{i∈A} π_i P(i, A^c)` in units of the stationary measure.
    pub fn ergodic_flow(&self, a: u32) -> f64 {
        let n = self.len();
        let mut f = 0.0;
        for i in (0..n).filter(|i| a >> i & 1 == 1) {
            for j in (0..n).filter(|j| a >> j & 1 == 0) {
                f += self.stationary[i] * self.p[i][j];
            }
        }
        f
    }

    fn all_masks(&self) -> std::ops::Range<u32> {
        0..(1u32 << self.len())
    }

    /// Exact `Φ_s` with a minimizing subset, or `None` when no subset has
    /// measure in `(s, 1/2]`.
    pub fn phi_s(&self, s: f64) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for a in self.all_masks() {
            let m = self.measure(&self.stationary, a);
            if m > s + EPS && m <= 0.5 + EPS {
                let ratio = self.ergodic_flow(a) / m.min(1.0 - m);
                if best.is_none_or(|(b, _)| ratio < b) {
                    best = Some((ratio, a));
                }
            }
        }
        best
    }

    /// `H_s = sup_{σ(A) ≤ s} |σ0(A) − σ(A)|` over subsets.
    pub fn hs_subsets(&self, sigma0: &[f64], s: f64) -> f64 {
        self.all_masks()
            .filter(|a| self.measure(&self.stationary, *a) <= s + EPS)
            .map(|a| (self.measure(sigma0, a) - self.measure(&self.stationary, a)).abs())
            .fold(0.0, f64::max)
    }

    /// `H_s` over fractional subsets `g: states → [0, 1]` with `Σ g π ≤ s`,
    /// i.e. with atoms allowed to split: a fractional knapsack on each sign
    /// of `σ0 − π`.
    pub fn hs_fractional(&self, sigma0: &[f64], s: f64) -> f64 {
        let knap = |sign: f64| {
            let mut items: Vec<(f64, f64)> = (0..self.len())
                .map(|i| (sign * (sigma0[i] - self.stationary[i]), self.stationary[i]))
                .filter(|(d, _)| *d > 0.0)
                .collect();
            items.sort_by(|x, y| (y.0 / y.1).total_cmp(&(x.0 / x.1)));
            let (mut room, mut val) = (s, 0.0);
            for (d, w) in items {
                if room <= 0.0 {
                    break;
                }
                let take = (room / w).min(1.0);
                val += take * d;
                room -= take * w;
            }
            val
        };
        knap(1.0).max(knap(-1.0))
    }

    /// Distinct subset measures `s` in `(0, 1/2)` for which the window
    /// `(s, 1/2]` holds a subset.
    pub fn s_grid(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.all_masks().map(|a| self.measure(&self.stationary, a)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < EPS);
        let window = |s: f64| v.iter().any(|m| *m > s + EPS && *m <= 0.5 + EPS);
        v.iter().copied().filter(|s| *s > EPS && window(*s)).collect()
    }

    /// Lovász–Simonovits check: for every start, every `s` and every
    /// `t ≤ t_max`, `max_A |σ_t(A) − σ(A)|` (by enumeration) against
    /// `H_s + (H_s/s)(1 − Φ_s²/2)^t`.
    ///
    /// `s` ranges over [`ExactChain::s_grid`] with subset-derived `H_s`,
    /// plus `s` below the smallest atom, where subsets give `H_s = 0` and
    /// the fractional `H_s` is used.
    pub fn ls_check(&self, starts: &[Vec<f64>], t_max: usize) -> LsReport {
        let min_atom = self.stationary.iter().copied().fold(f64::INFINITY, f64::min);
        let mut cases: Vec<(f64, bool, f64)> = Vec::new();
        for s in self.s_grid() {
            if let Some((phi, _)) = self.phi_s(s) {
                cases.push((s, false, phi));
            }
        }
        if let Some((phi, _)) = self.phi_s(0.5 * min_atom) {
            cases.push((0.5 * min_atom, true, phi));
        }
        let mut rep = LsReport { checks: 0, violations: 0, worst_margin: f64::INFINITY, cases: Vec::new() };
        for (si, sigma0) in starts.iter().enumerate() {
            let path = self.evolve(sigma0, t_max);
            let dev: Vec<f64> = path.iter().map(|d| self.max_subset_deviation(d)).collect();
            for &(s, fractional, phi) in &cases {
                let hs = if fractional { self.hs_fractional(sigma0, s) } else { self.hs_subsets(sigma0, s) };
                let mut case = LsCase { start: si, s, fractional, hs, phi_s: phi, violations: 0, worst_margin: f64::INFINITY };
                for (t, d) in dev.iter().enumerate() {
                    let bound = ls_value(hs, s, phi, t);
                    let margin = bound - d;
                    case.worst_margin = case.worst_margin.min(margin);
                    rep.checks += 1;
                    if margin < -EPS {
                        case.violations += 1;
                    }
                }
                rep.violations += case.violations;
                rep.worst_margin = rep.worst_margin.min(case.worst_margin);
                rep.cases.push(case);
            }
        }
        rep
    }

    /// `max_A |d(A) − π(A)|` by walking all subsets in Gray-code order.
    pub fn max_subset_deviation(&self, dist: &[f64]) -> f64 {
        let diff: Vec<f64> = dist.iter().zip(&self.stationary).map(|(a, b)| a - b).collect();
        let (mut cur, mut best) = (0.0f64, 0.0f64);
        let mut prev = 0u32;
        for k in 1..(1u32 << self.len()) {
            let g = k ^ (k >> 1);
            let bit = (g ^ prev).trailing_zeros() as usize;
            if g >> bit & 1 == 1 {
                cur += diff[bit];
            } else {
                cur -= diff[bit];
            }
            best = best.max(cur.abs());
            prev = g;
        }
        best
    }

    /// Warm-start constant `M = max σ0/π`.
    pub fn warmness(&self, sigma0: &[f64]) -> f64 {
        sigma0.iter().zip(&self.stationary).map(|(a, b)| a / b).fold(0.0, f64::max)
    }

    /// One draw of the next state from row `i`, given `u ∈ [0, 1)`.
    pub fn next_state(&self, i: usize, u: f64) -> usize {
        let mut acc = 0.0;
        for (j, p) in self.p[i].iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding left a sliver at the top of the row
        self.p[i].iter().rposition(|p| *p > 0.0).unwrap_or(i)
    }
}

/// `H_s + (H_s/s)(1 − Φ_s²/2)^t` without argument checks.
pub(crate) fn ls_value(hs: f64, s: f64, phi_s: f64, t: usize) -> f64 {
    hs + hs / s * (1.0 - 0.5 * phi_s * phi_s).powi(t as i32)
}

#[derive(Debug, Clone, Serialize)]
pub struct LsCase {
    pub start: usize,
    pub s: f64,
    pub fractional: bool,
    pub hs: f64,
    pub phi_s: f64,
    pub violations: usize,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LsReport {
    pub checks: usize,
    pub violations: usize,
    /// Smallest `bound − max_A |σ_t(A) − σ(A)|` seen.
    pub worst_margin: f64,
    pub cases: Vec<LsCase>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_state_path() {
        let c = ExactChain::path(3, 1, false).unwrap();
        assert_eq!(c.p[0], vec![0.5, 0.5, 0.0]);
        assert_eq!(c.p[1], vec![0.5, 0.0, 0.5]);
        assert_eq!(c.stationary, vec![1.0 / 3.0; 3]);
        assert!((c.ergodic_flow(0b001) - 1.0 / 6.0).abs() < 1e-15);
        let starts: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let rep = c.ls_check(&starts, 100);
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.checks > 0);
    }

    #[test]
    fn rows_sum_to_one_and_uniform_is_stationary() {
        for c in [
            ExactChain::path(7, 2, false).unwrap(),
            ExactChain::grid(4, 4, 1, true).unwrap(),
            ExactChain::grid(3, 5, 2, false).unwrap(),
            ExactChain::from_points(vec![[0, 0], [1, 0], [0, 1], [2, 0], [0, 2]], 1, false).unwrap(),
        ] {
            for row in &c.p {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
            let next = c.push(&c.stationary);
            for (a, b) in next.iter().zip(&c.stationary) {
                assert!((a - b).abs() < 1e-14);
            }
            for i in 0..c.len() {
                for j in 0..c.len() {
                    assert!((c.p[i][j] - c.p[j][i]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn size_limit() {
        assert!(matches!(ExactChain::path(17, 1, false), Err(Error::Resource(_))));
        assert!(ExactChain::grid(4, 4, 1, false).is_ok());
    }

    #[test]
    fn gray_code_deviation_matches_brute_force() {
        let c = ExactChain::grid(3, 3, 1, true).unwrap();
        let d = c.evolve(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3).pop().unwrap();
        let brute = (0..512u32)
            .map(|a| (c.measure(&d, a) - c.measure(&c.stationary, a)).abs())
            .fold(0.0, f64::max);
        assert!((c.max_subset_deviation(&d) - brute).abs() < 1e-14);
    }

    #[test]
    fn fractional_hs_splits_atoms() {
        let c = ExactChain::path(4, 1, true).unwrap();
        let point = [1.0, 0.0, 0.0, 0.0];
        // below the smallest atom subsets see nothing
        assert_eq!(c.hs_subsets(&point, 0.1), 0.0);
        assert!((c.hs_fractional(&point, 0.1) - 0.1 * 3.0).abs() < 1e-12);
        // at an atom both agree
        assert!((c.hs_fractional(&point, 0.25) - c.hs_subsets(&point, 0.25)).abs() < 1e-12);
    }
}

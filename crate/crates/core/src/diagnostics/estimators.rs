//! Monte-Carlo estimators of ergodic flow and s-conductance, the
//! Lovász–Simonovits bound and the warm-start `H_s`.
//!
//! The estimators run against the [`Chain`] trait so that the same code can
//! be validated on [`ExactChain`].

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use super::exact::{ls_value, ExactChain};
use crate::ballwalk::step_in_place;
use crate::error::{Error, Result};
use crate::geometry::{volume_mc, BoundingBox, Domain, Estimate};
use crate::rng::{self, Purpose, Rng};

/// Draws per shard before a shard gives up finding a point of `A`.
const MAX_TRIES_PER_HIT: usize = 10_000;

/// A Markov chain with a known, samplable stationary law.
pub trait Chain: Sync {
    type State: Clone + Send;
    fn stationary(&self, rng: &mut Rng) -> Result<Self::State>;
    /// One move in place; returns whether the state changed.
    fn step(&self, x: &mut Self::State, rng: &mut Rng) -> bool;
}

/// The BallWalk on a domain, started from the uniform law.
pub struct BallWalkChain<'a> {
    pub domain: &'a Domain,
    pub radius: f64,
    pub lazy: bool,
    bbox: BoundingBox,
}

impl<'a> BallWalkChain<'a> {
    pub fn new(domain: &'a Domain, radius: f64, lazy: bool) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::input("radius must be positive"));
        }
        Ok(BallWalkChain { domain, radius, lazy, bbox: domain.bounding_box() })
    }
}

impl Chain for BallWalkChain<'_> {
    type State = Vec<f64>;

    fn stationary(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.domain.dim()];
        if self.domain.sample_uniform(&self.bbox, rng, &mut x, 1_000_000) {
            Ok(x)
        } else {
            Err(Error::EmptyDomain { proposals: 1_000_000 })
        }
    }

    fn step(&self, x: &mut Vec<f64>, rng: &mut Rng) -> bool {
        let mut buf = vec![0.0; x.len()];
        step_in_place(x, self.domain, self.radius, self.lazy, rng, &mut buf)
    }
}

impl Chain for ExactChain {
    type State = usize;

    fn stationary(&self, rng: &mut Rng) -> Result<usize> {
        Ok(rng.random_range(0..self.len()))
    }

    fn step(&self, x: &mut usize, rng: &mut Rng) -> bool {
        let y = self.next_state(*x, rng.random());
        let moved = y != *x;
        *x = y;
        moved
    }
}

/// Ergodic flow in units of the stationary probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowEstimate {
    /// `σ(A)`.
    pub measure: Estimate,
    /// Probability that one step from a uniform point of `A` lands in the
    /// complement.
    pub escape: Estimate,
    /// `Φ(A)/vol(Ω') = σ(A) · escape`.
    pub flow: Estimate,
    pub samples_in_a: usize,
}

fn product(a: Estimate, b: Estimate) -> Estimate {
    let value = a.value * b.value;
    let rel = if value == 0.0 { 0.0 } else { (a.stderr / a.value).hypot(b.stderr / b.value) };
    let stderr = if value == 0.0 { a.value * b.stderr + b.value * a.stderr } else { value * rel };
    Estimate { value, stderr }
}

/// Draw stationary states until `n` fall in `A`; each member of `A` makes one
/// step. `σ(A)` comes from the hit fraction, the escape rate from the steps.
pub fn ergodic_flow_mc<C: Chain>(
    chain: &C,
    a: &(dyn Fn(&C::State) -> bool + Sync),
    n: usize,
    seed: u64,
) -> Result<FlowEstimate> {
    let shards: Vec<Result<(usize, usize, usize)>> = rng::shard_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(s, m)| {
            let mut r = rng::stream(seed, Purpose::ErgodicFlow, s as u64);
            let (mut draws, mut hits, mut escapes) = (0usize, 0usize, 0usize);
            while hits < m {
                if draws >= MAX_TRIES_PER_HIT * (hits + 1) {
                    return Err(Error::input("set A received no samples"));
                }
                let mut x = chain.stationary(&mut r)?;
                draws += 1;
                if a(&x) {
                    hits += 1;
                    chain.step(&mut x, &mut r);
                    escapes += usize::from(!a(&x));
                }
            }
            Ok((draws, hits, escapes))
        })
        .collect();
    let (mut draws, mut hits, mut escapes) = (0, 0, 0);
    for s in shards {
        let (d, h, e) = s?;
        draws += d;
        hits += h;
        escapes += e;
    }
    if hits == 0 {
        return Err(Error::input("set A received no samples"));
    }
    let q = hits as f64 / draws as f64;
    let measure = Estimate { value: q, stderr: (q * (1.0 - q) / draws as f64).sqrt() };
    let p = escapes as f64 / hits as f64;
    let escape = Estimate { value: p, stderr: (p * (1.0 - p) / hits as f64).sqrt() };
    Ok(FlowEstimate { measure, escape, flow: product(measure, escape), samples_in_a: hits })
}

/// `Φ(A) = ∫_A P_x(Ω'∖A) dx` for the BallWalk, in volume units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErgodicFlow {
    pub phi: Estimate,
    pub volume: Estimate,
    pub normalized: FlowEstimate,
}

pub fn ergodic_flow_estimate(
    domain: &Domain,
    a: &(dyn Fn(&[f64]) -> bool + Sync),
    r: f64,
    n: usize,
    seed: u64,
) -> Result<ErgodicFlow> {
    if n < 10_000 {
        return Err(Error::input(format!("ergodic_flow_estimate needs n >= 10^4, got {n}")));
    }
    let chain = BallWalkChain::new(domain, r, false)?;
    let normalized = ergodic_flow_mc(&chain, &|x: &Vec<f64>| a(x), n, seed)?;
    let volume = volume_mc(domain, n.max(1000), seed)?;
    Ok(ErgodicFlow { phi: product(normalized.flow, volume), volume, normalized })
}

/// One member of an s-conductance scan.
#[derive(Debug, Clone, Serialize)]
pub struct ScanEntry {
    pub label: String,
    pub flow: FlowEstimate,
    /// `Φ(A) / min(σ(A), 1 − σ(A))`, or `None` when skipped.
    pub ratio: Option<Estimate>,
    pub skipped: Option<String>,
}

/// Minimum over a finite family: an upper bound on `Φ_s`, never a
/// certificate.
#[derive(Debug, Clone, Serialize)]
pub struct ConductanceScan {
    pub s: f64,
    pub upper_bound: Estimate,
    pub argmin: String,
    pub entries: Vec<ScanEntry>,
    pub warnings: Vec<String>,
}

pub fn s_conductance_scan_chain<C: Chain>(
    chain: &C,
    family: &[(String, Box<dyn Fn(&C::State) -> bool + Sync + '_>)],
    s: f64,
    n: usize,
    seed: u64,
) -> Result<ConductanceScan> {
    if family.is_empty() {
        return Err(Error::input("conductance scan needs at least one set"));
    }
    if !(s >= 0.0 && s <= 1.0) {
        return Err(Error::input(format!("s must lie in [0, 1], got {s}")));
    }
    let mut entries = Vec::with_capacity(family.len());
    let mut warnings = Vec::new();
    let mut best: Option<(Estimate, String)> = None;
    for (k, (label, a)) in family.iter().enumerate() {
        let flow = ergodic_flow_mc(chain, a.as_ref(), n, seed.wrapping_add(k as u64))?;
        // a set is skipped only when its measure is outside the window by
        // more than 3σ, so exact half cuts are not lost to sampling noise
        let (m, tol) = (flow.measure.value, 3.0 * flow.measure.stderr);
        if !(m + tol > s && m - tol <= 0.5) {
            let why = format!("{label}: measure {m:.4} outside ({s}, 1/2]");
            warnings.push(why.clone());
            entries.push(ScanEntry { label: label.clone(), flow, ratio: None, skipped: Some(why) });
            continue;
        }
        // σ(A) ≤ 1/2 up to noise, so the denominator is σ(A) and the ratio is the
        // escape rate
        let ratio = flow.escape;
        if best.as_ref().is_none_or(|(b, _)| ratio.value < b.value) {
            best = Some((ratio, label.clone()));
        }
        entries.push(ScanEntry { label: label.clone(), flow, ratio: Some(ratio), skipped: None });
    }
    let (upper_bound, argmin) =
        best.ok_or_else(|| Error::input(format!("no set in the family has measure in ({s}, 1/2]")))?;
    Ok(ConductanceScan { s, upper_bound, argmin, entries, warnings })
}

/// Scan of BallWalk conductance over a family of subsets of `domain`.
pub fn s_conductance_scan(
    domain: &Domain,
    r: f64,
    family: &[(String, Box<dyn Fn(&[f64]) -> bool + Sync + '_>)],
    s: f64,
    n: usize,
    seed: u64,
) -> Result<ConductanceScan> {
    let chain = BallWalkChain::new(domain, r, false)?;
    let wrapped: Vec<(String, Box<dyn Fn(&Vec<f64>) -> bool + Sync + '_>)> = family
        .iter()
        .map(|(l, f)| (l.clone(), Box::new(move |x: &Vec<f64>| f(x)) as Box<dyn Fn(&Vec<f64>) -> bool + Sync>))
        .collect();
    s_conductance_scan_chain(&chain, &wrapped, s, n, seed)
}

/// Half-space cuts `x_axis < c` for each offset.
pub fn halfspace_family(axis: usize, offsets: &[f64]) -> Vec<(String, Box<dyn Fn(&[f64]) -> bool + Sync>)> {
    offsets
        .iter()
        .map(|&c| (format!("x{axis} < {c}"), Box::new(move |x: &[f64]| x[axis] < c) as Box<dyn Fn(&[f64]) -> bool + Sync>))
        .collect()
}

/// `H_s + (H_s/s)(1 − Φ_s²/2)^t`.
pub fn ls_bound(hs: f64, s: f64, phi_s: f64, t: usize) -> Result<f64> {
    if !(s > 0.0 && s <= 0.5) {
        return Err(Error::input(format!("s must lie in (0, 1/2], got {s}")));
    }
    if !(phi_s >= 0.0) || !(hs >= 0.0) || !phi_s.is_finite() || !hs.is_finite() {
        return Err(Error::input("H_s and Φ_s must be finite and non-negative"));
    }
    Ok(ls_value(hs, s, phi_s, t))
}

/// `(M − 1)·s`, the `H_s` guaranteed by `σ0 ≤ M·σ`.
pub fn warm_start_hs(m: f64, s: f64) -> Result<f64> {
    if !(m >= 1.0) || !m.is_finite() {
        return Err(Error::input(format!("warm-start constant must be >= 1, got {m}")));
    }
    if !(s >= 0.0 && s <= 1.0) {
        return Err(Error::input(format!("s must lie in [0, 1], got {s}")));
    }
    Ok((m - 1.0) * s)
}

/// Empirical law of `X_t` over `n` independent chains from `start`, binned by
/// `bin`; each frequency carries its binomial standard error.
pub fn state_frequencies_mc<C: Chain>(
    chain: &C,
    start: &(dyn Fn(&mut Rng) -> C::State + Sync),
    t: usize,
    bin: &(dyn Fn(&C::State) -> usize + Sync),
    bins: usize,
    n: usize,
    seed: u64,
) -> Vec<Estimate> {
    let counts = rng::shard_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(s, m)| {
            let mut r = rng::stream(seed, Purpose::Chain, s as u64);
            let mut c = vec![0usize; bins];
            for _ in 0..m {
                let mut x = start(&mut r);
                for _ in 0..t {
                    chain.step(&mut x, &mut r);
                }
                c[bin(&x).min(bins - 1)] += 1;
            }
            c
        })
        .reduce(|| vec![0usize; bins], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    counts
        .into_iter()
        .map(|k| {
            let p = k as f64 / n as f64;
            Estimate { value: p, stderr: (p * (1.0 - p) / n as f64).sqrt() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ls_bound_examples() {
        assert!((ls_bound(0.1, 0.5, 0.0, 0).unwrap() - 0.3).abs() < 1e-15);
        assert!((ls_bound(0.1, 0.5, 1.0, 3).unwrap() - 0.125).abs() < 1e-15);
        for t in [0, 1, 10, 1000] {
            assert!((ls_bound(0.2, 0.25, 0.0, t).unwrap() - 0.2 * 5.0).abs() < 1e-15);
        }
        assert!(ls_bound(0.1, 0.0, 1.0, 1).is_err());
        assert!(ls_bound(0.1, 0.6, 1.0, 1).is_err());
    }

    #[test]
    fn warm_start_examples() {
        assert_eq!(warm_start_hs(1.0, 0.3).unwrap(), 0.0);
        assert!((warm_start_hs(3.0, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert!(warm_start_hs(0.5, 0.1).is_err());
    }

    #[test]
    fn whole_domain_has_no_flow() {
        let e = ergodic_flow_estimate(&Domain::unit_square(), &|_| true, 0.2, 10_000, 1).unwrap();
        assert_eq!(e.phi.value, 0.0);
        assert_eq!(e.normalized.escape.value, 0.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(ergodic_flow_estimate(&Domain::unit_square(), &|x| x[0] > 2.0, 0.2, 10_000, 1).is_err());
        assert!(ergodic_flow_estimate(&Domain::unit_square(), &|_| true, 0.2, 100, 1).is_err());
    }
}

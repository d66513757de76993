//! The BallWalk: from `x`, propose a uniform point of `B(x, r)` and move
//! there if it lies in the domain, otherwise stay.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{volume_mc, BoundingBox, Domain, Estimate};
use crate::rng::{self, Purpose, Rng};

/// Proposals allowed when drawing a start point before giving up.
const START_TRIES: usize = 1_000_000;

/// How a chain picks `x_0`.
#[derive(Debug, Clone)]
pub enum StartRule {
    Point(Vec<f64>),
    /// Exact uniform draw from the domain (`M = 1`).
    Uniform,
    /// Uniform draw from `region ∩ domain`. With `vol(region ∩ Ω) = vol(Ω)/M`
    /// the start law is bounded by `M` times the uniform law.
    Subregion(Domain),
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub radius: f64,
    pub steps: usize,
    pub lazy: bool,
    pub seed: u64,
    pub start: StartRule,
}

impl ChainConfig {
    pub fn new(radius: f64, steps: usize, seed: u64, start: StartRule) -> Self {
        ChainConfig { radius, steps, lazy: false, seed, start }
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::input(format!("radius must be positive, got {}", self.radius)));
        }
        match &self.start {
            StartRule::Point(x) => {
                if !domain.contains(x)? {
                    return Err(Error::input(format!("start point {x:?} is not in the domain")));
                }
            }
            StartRule::Subregion(region) if region.dim() != domain.dim() => {
                return Err(Error::input("warm-start region has the wrong dimension"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// States `x_0..x_T` of one chain; `accepted[t]` says whether step
/// `t → t+1` moved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainTrajectory {
    pub chain: u64,
    pub states: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

/// Uniform point of the ball: a normalised Gaussian direction scaled by
/// `r·U^{1/n}`.
pub fn uniform_in_ball(center: &[f64], r: f64, rng: &mut Rng, out: &mut [f64]) {
    let n = center.len();
    let mut norm2 = 0.0;
    loop {
        for o in out.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *o = g;
            norm2 += g * g;
        }
        if norm2 > 0.0 {
            break;
        }
    }
    let u: f64 = rng.random();
    let scale = r * u.powf(1.0 / n as f64) / norm2.sqrt();
    for (o, c) in out.iter_mut().zip(center) {
        *o = c + scale * *o;
    }
}

/// One move from `x` in place; `buf` is scratch of the same length.
/// Returns whether the chain moved.
#[inline]
pub fn step_in_place(x: &mut [f64], domain: &Domain, radius: f64, lazy: bool, rng: &mut Rng, buf: &mut [f64]) -> bool {
    if lazy && rng.random::<bool>() {
        return false;
    }
    uniform_in_ball(x, radius, rng, buf);
    if domain.contains_unchecked(buf) {
        x.copy_from_slice(buf);
        true
    } else {
        false
    }
}

/// One checked move from `x`.
pub fn step(x: &[f64], domain: &Domain, cfg: &ChainConfig, rng: &mut Rng) -> Result<(Vec<f64>, bool)> {
    if !domain.contains(x)? {
        return Err(Error::input("current state is not in the domain"));
    }
    let mut y = x.to_vec();
    let mut buf = vec![0.0; x.len()];
    let moved = step_in_place(&mut y, domain, cfg.radius, cfg.lazy, rng, &mut buf);
    Ok((y, moved))
}

fn draw_in(domain: &Domain, region: Option<&Domain>, rng: &mut Rng) -> Result<Vec<f64>> {
    let bbox: BoundingBox = region.unwrap_or(domain).bounding_box();
    let mut x = vec![0.0; domain.dim()];
    for _ in 0..START_TRIES {
        bbox.sample(rng, &mut x);
        if region.is_none_or(|r| r.contains_unchecked(&x)) && domain.contains_unchecked(&x) {
            return Ok(x);
        }
    }
    Err(Error::EmptyDomain { proposals: START_TRIES })
}

/// `x_0` of chain `chain`.
pub fn start_state(domain: &Domain, cfg: &ChainConfig, chain: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(cfg.seed, Purpose::WarmStart, chain);
    match &cfg.start {
        StartRule::Point(x) => Ok(x.clone()),
        StartRule::Uniform => draw_in(domain, None, &mut r),
        StartRule::Subregion(region) => draw_in(domain, Some(region), &mut r),
    }
}

pub fn run_chain(domain: &Domain, cfg: &ChainConfig) -> Result<ChainTrajectory> {
    run_chain_indexed(domain, cfg, 0)
}

/// Chain `chain` of the ensemble keyed by `cfg.seed`.
pub fn run_chain_indexed(domain: &Domain, cfg: &ChainConfig, chain: u64) -> Result<ChainTrajectory> {
    cfg.validate(domain)?;
    let mut x = start_state(domain, cfg, chain)?;
    let mut r = rng::stream(cfg.seed, Purpose::Chain, chain);
    let mut buf = vec![0.0; x.len()];
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut accepted = Vec::with_capacity(cfg.steps);
    states.push(x.clone());
    for _ in 0..cfg.steps {
        accepted.push(step_in_place(&mut x, domain, cfg.radius, cfg.lazy, &mut r, &mut buf));
        states.push(x.clone());
    }
    let n_acc = accepted.iter().filter(|a| **a).count();
    let acceptance_rate = if cfg.steps == 0 { 0.0 } else { n_acc as f64 / cfg.steps as f64 };
    Ok(ChainTrajectory { chain, states, accepted, acceptance_rate })
}

/// States of `n_chains` chains at each checkpoint, without storing whole
/// trajectories.
#[derive(Debug, Clone)]
pub struct Snapshots {
    pub checkpoints: Vec<usize>,
    /// `states[c][i]` = chain `i` at `checkpoints[c]`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// Fraction of moves accepted over all chains up to each checkpoint.
    pub acceptance: Vec<f64>,
}

pub fn ensemble_snapshots(domain: &Domain, cfg: &ChainConfig, n_chains: usize, checkpoints: &[usize]) -> Result<Snapshots> {
    cfg.validate(domain)?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("checkpoints must be strictly increasing"));
    }
    let per_chain: Vec<Result<(Vec<Vec<f64>>, Vec<usize>)>> = (0..n_chains as u64)
        .into_par_iter()
        .map(|chain| {
            let mut x = start_state(domain, cfg, chain)?;
            let mut r = rng::stream(cfg.seed, Purpose::Chain, chain);
            let mut buf = vec![0.0; x.len()];
            let mut snaps = Vec::with_capacity(checkpoints.len());
            let mut accs = Vec::with_capacity(checkpoints.len());
            let (mut t, mut acc) = (0usize, 0usize);
            for &c in checkpoints {
                while t < c {
                    acc += usize::from(step_in_place(&mut x, domain, cfg.radius, cfg.lazy, &mut r, &mut buf));
                    t += 1;
                }
                snaps.push(x.clone());
                accs.push(acc);
            }
            Ok((snaps, accs))
        })
        .collect();
    let mut states = vec![Vec::with_capacity(n_chains); checkpoints.len()];
    let mut acc_total = vec![0usize; checkpoints.len()];
    for r in per_chain {
        let (snaps, accs) = r?;
        for (c, s) in snaps.into_iter().enumerate() {
            states[c].push(s);
            acc_total[c] += accs[c];
        }
    }
    let acceptance = checkpoints
        .iter()
        .zip(&acc_total)
        .map(|(&t, &a)| if t == 0 { 0.0 } else { a as f64 / (t * n_chains) as f64 })
        .collect();
    Ok(Snapshots { checkpoints: checkpoints.to_vec(), states, acceptance })
}

/// `M = vol(Ω) / vol(region ∩ Ω)`, the warm-start constant of a subregion
/// start, with its delta-method standard error.
pub fn warm_start_m(domain: &Domain, region: &Domain, n: usize, seed: u64) -> Result<Estimate> {
    let bbox = region.bounding_box();
    let vol_d = volume_mc(domain, n, seed)?;
    // hit fraction of region ∩ Ω inside the region's box
    let hits: usize = rng::shard_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(s, m)| {
            let mut r = rng::stream(seed, Purpose::WarmStart, 1_000_000 + s as u64);
            let mut x = vec![0.0; domain.dim()];
            (0..m)
                .filter(|_| {
                    bbox.sample(&mut r, &mut x);
                    region.contains_unchecked(&x) && domain.contains_unchecked(&x)
                })
                .count()
        })
        .sum();
    if hits == 0 {
        return Err(Error::EmptyDomain { proposals: n });
    }
    let p = hits as f64 / n as f64;
    let vol_a = Estimate { value: p * bbox.volume(), stderr: bbox.volume() * (p * (1.0 - p) / n as f64).sqrt() };
    let m = vol_d.value / vol_a.value;
    let rel = (vol_d.stderr / vol_d.value).hypot(vol_a.stderr / vol_a.value);
    Ok(Estimate { value: m, stderr: m * rel })
}

/// CSV with columns `chain,t,<coords>,accepted`; coordinates are `x,y` in
/// 2D and `x1..xn` otherwise. `accepted` is empty on the `t = 0` row.
pub fn write_samples_csv<W: Write>(trajectories: &[ChainTrajectory], mut w: W) -> std::io::Result<()> {
    let dim = trajectories.first().and_then(|t| t.states.first()).map_or(2, Vec::len);
    let coords: Vec<String> = if dim == 2 { vec!["x".into(), "y".into()] } else { (1..=dim).map(|i| format!("x{i}")).collect() };
    writeln!(w, "chain,t,{},accepted", coords.join(","))?;
    for tr in trajectories {
        for (t, x) in tr.states.iter().enumerate() {
            write!(w, "{},{}", tr.chain, t)?;
            for v in x {
                write!(w, ",{v}")?;
            }
            match t.checked_sub(1).map(|s| tr.accepted[s]) {
                Some(a) => writeln!(w, ",{}", u8::from(a))?,
                None => writeln!(w, ",")?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_the_start() {
        let cfg = ChainConfig::new(0.1, 0, 1, StartRule::Point(vec![0.2, 0.3]));
        let tr = run_chain(&Domain::unit_square(), &cfg).unwrap();
        assert_eq!(tr.states, vec![vec![0.2, 0.3]]);
        assert!(tr.accepted.is_empty());
    }

    #[test]
    fn invalid_inputs() {
        let sq = Domain::unit_square();
        assert!(run_chain(&sq, &ChainConfig::new(0.1, 5, 1, StartRule::Point(vec![2.0, 0.0]))).is_err());
        assert!(run_chain(&sq, &ChainConfig::new(0.0, 5, 1, StartRule::Uniform)).is_err());
        let mut r = rng::stream(1, Purpose::Misc, 0);
        let cfg = ChainConfig::new(0.1, 5, 1, StartRule::Uniform);
        assert!(matches!(step(&[1.5, 0.5], &sq, &cfg, &mut r), Err(Error::Input(_))));
    }

    #[test]
    fn csv_layout() {
        let cfg = ChainConfig::new(0.1, 2, 1, StartRule::Point(vec![0.5, 0.5]));
        let tr = run_chain(&Domain::unit_square(), &cfg).unwrap();
        let mut out = Vec::new();
        write_samples_csv(&[tr], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,t,x,y,accepted");
        assert_eq!(lines[1], "0,0,0.5,0.5,");
        assert_eq!(lines.len(), 4);
    }
}

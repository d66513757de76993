//! Domains, membership, and Monte-Carlo measures of them.

pub mod polyline;

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::TransportMap;
use crate::potential::{Expr, Vars};
use crate::rng::{self, Purpose};
pub use polyline::{Polyline, P2};

/// Number of angular samples a star-shaped radial function is stored with.
pub const STAR_SAMPLES: usize = 256;

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::input("bounding box corners must have the same positive dimension"));
        }
        Ok(BoundingBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn diagonal(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn inflated(&self, pad: f64) -> BoundingBox {
        BoundingBox { lo: self.lo.iter().map(|v| v - pad).collect(), hi: self.hi.iter().map(|v| v + pad).collect() }
    }

    /// Uniform point of the box written into `out`.
    pub fn sample(&self, rng: &mut rng::Rng, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.lo[k] + (self.hi[k] - self.lo[k]) * rng.random::<f64>();
        }
    }
}

/// Radial function of a 2D star-shaped body, sampled at `STAR_SAMPLES`
/// equally spaced angles and linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct StarShape {
    pub center: P2,
    radii: Vec<f64>,
}

impl StarShape {
    pub fn from_fn(center: P2, radius: impl Fn(f64) -> f64) -> Result<Self> {
        let radii = (0..STAR_SAMPLES).map(|k| radius(TAU * k as f64 / STAR_SAMPLES as f64)).collect();
        Self::from_samples(center, radii)
    }

    pub fn from_samples(center: P2, radii: Vec<f64>) -> Result<Self> {
        if radii.len() != STAR_SAMPLES {
            return Err(Error::input(format!("star shape needs {STAR_SAMPLES} radial samples, got {}", radii.len())));
        }
        if radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::input("star radial function must be strictly positive and finite"));
        }
        Ok(StarShape { center, radii })
    }

    pub fn radius_at(&self, theta: f64) -> f64 {
        let u = theta.rem_euclid(TAU) / TAU * STAR_SAMPLES as f64;
        let k = (u.floor() as usize).min(STAR_SAMPLES - 1);
        let f = u - k as f64;
        self.radii[k] * (1.0 - f) + self.radii[(k + 1) % STAR_SAMPLES] * f
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Boundary through the radial samples. Between samples the true boundary
    /// (linear in angle) deviates from this polygon by O(r * dtheta^2).
    pub fn polygon(&self) -> Polyline {
        let pts = (0..STAR_SAMPLES)
            .map(|k| {
                let th = TAU * k as f64 / STAR_SAMPLES as f64;
                [self.center[0] + self.radii[k] * th.cos(), self.center[1] + self.radii[k] * th.sin()]
            })
            .collect();
        Polyline::from_ccw_unchecked(pts)
    }
}

/// A bounded region of R^n known through a membership oracle.
#[derive(Debug, Clone)]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `[0,1]^2` minus `(0.5,1]^2`.
    LShape,
    Star(StarShape),
    Polyline(Polyline),
    /// Image of a convex base domain under a built transport map.
    FlowImage(Arc<TransportMap>),
}

impl Domain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || !(radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("ball needs a finite center and a positive radius"));
        }
        Ok(Domain::Ball { center, radius })
    }

    pub fn unit_disk() -> Self {
        Domain::Ball { center: vec![0.0, 0.0], radius: 1.0 }
    }

    pub fn cube(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let bb = BoundingBox::new(lo, hi)?;
        if bb.is_degenerate() {
            return Err(Error::input("box must have hi > lo in every coordinate"));
        }
        Ok(Domain::Box { lo: bb.lo, hi: bb.hi })
    }

    pub fn unit_square() -> Self {
        Domain::Box { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lo, .. } => lo.len(),
            _ => 2,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Domain::Ball { .. } => "ball",
            Domain::Box { .. } => "box",
            Domain::LShape => "l_shape",
            Domain::Star(_) => "star",
            Domain::Polyline(_) => "polyline",
            Domain::FlowImage(_) => "flow_image",
        }
    }

    pub fn bounding_box(&self) -> BoundingBox {
        match self {
            Domain::Ball { center, radius } => BoundingBox {
                lo: center.iter().map(|c| c - radius).collect(),
                hi: center.iter().map(|c| c + radius).collect(),
            },
            Domain::Box { lo, hi } => BoundingBox { lo: lo.clone(), hi: hi.clone() },
            Domain::LShape => BoundingBox { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] },
            Domain::Star(s) => {
                let rmax = s.radii.iter().copied().fold(0.0, f64::max);
                BoundingBox { lo: vec![s.center[0] - rmax, s.center[1] - rmax], hi: vec![s.center[0] + rmax, s.center[1] + rmax] }
            }
            Domain::Polyline(p) => {
                let (lo, hi) = p.bounds();
                BoundingBox { lo: lo.to_vec(), hi: hi.to_vec() }
            }
            Domain::FlowImage(map) => map.image_bounding_box(),
        }
    }

    /// Membership with argument validation.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::input(format!("point has dimension {}, domain has {}", x.len(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("point has non-finite coordinates"));
        }
        Ok(self.contains_unchecked(x))
    }

    /// Membership without validation. `x` must be finite with `x.len() == dim`.
    #[inline]
    pub fn contains_unchecked(&self, x: &[f64]) -> bool {
        match self {
            Domain::Ball { center, radius } => {
                let mut s = 0.0;
                for (a, c) in x.iter().zip(center) {
                    s += (a - c) * (a - c);
                }
                s <= radius * radius
            }
            Domain::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v >= *a && *v <= *b),
            Domain::LShape => {
                let inside_square = (0.0..=1.0).contains(&x[0]) && (0.0..=1.0).contains(&x[1]);
                inside_square && !(x[0] > 0.5 && x[1] > 0.5)
            }
            Domain::Star(s) => {
                let dx = x[0] - s.center[0];
                let dy = x[1] - s.center[1];
                let rho = dx.hypot(dy);
                rho <= s.radius_at(dy.atan2(dx))
            }
            Domain::Polyline(p) => p.contains([x[0], x[1]]),
            Domain::FlowImage(map) => map.inverse_membership([x[0], x[1]]),
        }
    }

    /// Closed-form diameter, when one is known.
    pub fn exact_diameter(&self) -> Option<f64> {
        match self {
            Domain::Ball { radius, .. } => Some(2.0 * radius),
            Domain::Box { .. } => Some(self.bounding_box().diagonal()),
            Domain::LShape => Some(2f64.sqrt()),
            _ => None,
        }
    }

    /// Built-in shapes known to be convex without probing.
    pub fn is_known_convex(&self) -> bool {
        matches!(self, Domain::Ball { .. } | Domain::Box { .. })
    }

    /// Boundary length (area for n = 3, and so on) when it is available in
    /// closed form or from a stored polyline.
    pub fn perimeter(&self) -> Result<f64> {
        match self {
            Domain::Ball { center, radius } => {
                let n = center.len() as f64;
                Ok(n * ball_volume(center.len(), *radius) / radius)
            }
            Domain::Box { lo, hi } => {
                let sides: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
                if sides.len() == 1 {
                    return Ok(2.0);
                }
                let total: f64 = sides.iter().product();
                Ok(sides.iter().map(|s| 2.0 * total / s).sum())
            }
            Domain::LShape => Ok(4.0),
            Domain::Star(s) => Ok(s.polygon().perimeter()),
            Domain::Polyline(p) => Ok(p.perimeter()),
            Domain::FlowImage(map) => match map.final_boundary() {
                Some(b) => Ok(b.perimeter()),
                None => Err(Error::Unsupported("flow image has no advected boundary".into())),
            },
        }
    }

    /// A boundary polyline with vertex spacing at most `spacing` (2D only).
    pub fn boundary_polyline(&self, spacing: f64) -> Result<Polyline> {
        if self.dim() != 2 {
            return Err(Error::Unsupported("boundary polylines exist for 2D domains only".into()));
        }
        let pl = match self {
            Domain::Ball { center, radius } => {
                let n = ((TAU * radius / spacing).ceil() as usize).max(16);
                polyline::circle([center[0], center[1]], *radius, n)
            }
            Domain::Box { lo, hi } => {
                polyline::subdivided(&[[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]], spacing)
            }
            Domain::LShape => polyline::subdivided(
                &[[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]],
                spacing,
            ),
            Domain::Star(s) => polyline::subdivided(s.polygon().vertices(), spacing),
            Domain::Polyline(p) => polyline::subdivided(p.vertices(), spacing),
            Domain::FlowImage(map) => match map.final_boundary() {
                Some(b) => polyline::subdivided(b.vertices(), spacing),
                None => return Err(Error::Unsupported("flow image has no advected boundary".into())),
            },
        };
        Ok(pl)
    }

    /// Rejection sample from the bounding box. Returns false if `max_tries`
    /// proposals all miss.
    pub fn sample_uniform(&self, bbox: &BoundingBox, rng: &mut rng::Rng, out: &mut [f64], max_tries: usize) -> bool {
        for _ in 0..max_tries {
            bbox.sample(rng, out);
            if self.contains_unchecked(out) {
                return true;
            }
        }
        false
    }

    /// `n` exact uniform samples drawn in `SHARDS` independent streams.
    pub fn uniform_samples(&self, n: usize, seed: u64, purpose: Purpose) -> Result<Vec<Vec<f64>>> {
        let bbox = self.bounding_box();
        if bbox.is_degenerate() {
            return Err(Error::input("degenerate bounding box"));
        }
        let dim = self.dim();
        let shards: Vec<Result<Vec<Vec<f64>>>> = rng::shard_sizes(n)
            .into_par_iter()
            .enumerate()
            .map(|(s, m)| {
                let mut r = rng::stream(seed, purpose, s as u64);
                let mut out = Vec::with_capacity(m);
                let mut buf = vec![0.0; dim];
                for _ in 0..m {
                    if !self.sample_uniform(&bbox, &mut r, &mut buf, 100 * n.max(1)) {
                        return Err(Error::EmptyDomain { proposals: 100 * n.max(1) });
                    }
                    out.push(buf.clone());
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::with_capacity(n);
        for s in shards {
            all.extend(s?);
        }
        Ok(all)
    }
}

/// Volume of the n-ball of radius `r`.
pub fn ball_volume(n: usize, r: f64) -> f64 {
    // V_n = V_{n-2} * 2π / n, from V_0 = 1 and V_1 = 2
    let mut v = if n % 2 == 0 { 1.0 } else { 2.0 };
    let mut k = n % 2;
    while k < n {
        k += 2;
        v *= TAU / k as f64;
    }
    v * r.powi(n as i32)
}

/// Midpoint-convexity probe: draws pairs of uniform points and checks that
/// their midpoints are members.
pub fn convexity_probe(domain: &Domain, trials: usize, seed: u64) -> Result<bool> {
    let bbox = domain.bounding_box();
    let dim = domain.dim();
    let mut r = rng::stream(seed, Purpose::Misc, 0);
    let (mut a, mut b, mut m) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..trials {
        if !domain.sample_uniform(&bbox, &mut r, &mut a, 100_000) || !domain.sample_uniform(&bbox, &mut r, &mut b, 100_000) {
            return Err(Error::EmptyDomain { proposals: 100_000 });
        }
        for k in 0..dim {
            m[k] = 0.5 * (a[k] + b[k]);
        }
        if !domain.contains_unchecked(&m) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// True if `other` is within `k` combined standard errors.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.stderr.hypot(other.stderr)
    }
}

/// Hit fraction of uniform bounding-box samples times the box volume.
pub fn volume_mc(domain: &Domain, n: usize, seed: u64) -> Result<Estimate> {
    if n < 1000 {
        return Err(Error::input(format!("volume_mc needs n >= 1000, got {n}")));
    }
    let bbox = domain.bounding_box();
    if bbox.is_degenerate() {
        return Err(Error::input("degenerate bounding box"));
    }
    let dim = domain.dim();
    let hits: usize = rng::shard_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(s, m)| {
            let mut r = rng::stream(seed, Purpose::Volume, s as u64);
            let mut x = vec![0.0; dim];
            (0..m)
                .filter(|_| {
                    bbox.sample(&mut r, &mut x);
                    domain.contains_unchecked(&x)
                })
                .count()
        })
        .sum();
    let p = hits as f64 / n as f64;
    let vol = bbox.volume();
    Ok(Estimate { value: p * vol, stderr: vol * (p * (1.0 - p) / n as f64).sqrt() })
}

/// Largest pairwise distance among `n` accepted samples. This is a lower
/// bound on the true diameter; it is capped at the bounding-box diagonal.
///
/// The farthest pair of a point cloud consists of extreme points in some
/// direction, so only the extremes along 2·K directions are compared.
pub fn diameter_estimate(domain: &Domain, n: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::input("diameter_estimate needs n >= 2"));
    }
    let bbox = domain.bounding_box();
    let dim = domain.dim();
    let mut r = rng::stream(seed, Purpose::Diameter, 0);
    let dirs = directions(dim, 360, &mut r);
    let mut best_hi = vec![(f64::NEG_INFINITY, 0usize); dirs.len()];
    let mut best_lo = vec![(f64::INFINITY, 0usize); dirs.len()];
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut x = vec![0.0; dim];
    let budget = 100 * n;
    let mut proposals = 0;
    while samples.len() < n {
        if proposals >= budget {
            return Err(Error::EmptyDomain { proposals });
        }
        proposals += 1;
        bbox.sample(&mut r, &mut x);
        if !domain.contains_unchecked(&x) {
            continue;
        }
        let id = samples.len();
        for (k, d) in dirs.iter().enumerate() {
            let p: f64 = d.iter().zip(&x).map(|(a, b)| a * b).sum();
            if p > best_hi[k].0 {
                best_hi[k] = (p, id);
            }
            if p < best_lo[k].0 {
                best_lo[k] = (p, id);
            }
        }
        samples.push(x.clone());
    }
    let mut ids: Vec<usize> = best_hi.iter().chain(&best_lo).map(|b| b.1).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut best: f64 = 0.0;
    for (u, &i) in ids.iter().enumerate() {
        for &j in &ids[u + 1..] {
            best = best.max(euclid(&samples[i], &samples[j]));
        }
    }
    Ok(best.min(bbox.diagonal()))
}

fn directions(dim: usize, count: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0]];
    }
    if dim == 2 {
        // half circle suffices: both extremes are tracked per direction
        return (0..count)
            .map(|k| {
                let th = PI * k as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect();
    }
    let mut out: Vec<Vec<f64>> = (0..dim)
        .map(|k| {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            e
        })
        .collect();
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Boundary measure divided by a Monte-Carlo volume estimate.
pub fn iso_ratio_estimate(domain: &Domain, n: usize, seed: u64) -> Result<Estimate> {
    let perimeter = domain.perimeter()?;
    let vol = volume_mc(domain, n, seed)?;
    let value = perimeter / vol.value;
    // delta method
    Ok(Estimate { value, stderr: value * vol.stderr / vol.value })
}

/// Minimum pairwise Euclidean distance between two point sets.
///
/// Exact for the given samples; as an estimate of the distance between the
/// sampled sets it is an upper bound.
pub fn set_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("set_distance needs two non-empty point lists"));
    }
    // sweep along the centroid direction; projected gaps never exceed
    // Euclidean ones, so the early exits stay exact
    let dim = a[0].len();
    let centroid = |s: &[Vec<f64>]| (0..dim).map(|k| s.iter().map(|p| p[k]).sum::<f64>() / s.len() as f64).collect::<Vec<f64>>();
    let (ca, cb) = (centroid(a), centroid(b));
    let mut u: Vec<f64> = cb.iter().zip(&ca).map(|(x, y)| x - y).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        u.iter_mut().for_each(|v| *v /= norm);
    } else {
        u = (0..dim).map(|k| f64::from(u8::from(k == 0))).collect();
    }
    let key = |p: &[f64]| p.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
    let mut sorted: Vec<(f64, &Vec<f64>)> = b.iter().map(|p| (key(p), p)).collect();
    sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
    let keys: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let mut best = f64::INFINITY;
    for p in a {
        let kp = key(p);
        let start = keys.partition_point(|&k| k < kp);
        for (kq, q) in sorted[start..].iter() {
            if kq - kp >= best {
                break;
            }
            best = best.min(euclid(p, q));
        }
        for (kq, q) in sorted[..start].iter().rev() {
            if kp - kq >= best {
                break;
            }
            best = best.min(euclid(p, q));
        }
        if best == 0.0 {
            break;
        }
    }
    Ok(best)
}

/// Part of a three-way partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Part {
    One,
    Two,
    Three,
}

/// Three-way partition `(Ω1, Ω2, Ω3)` of a domain.
#[derive(Debug, Clone)]
pub enum Partition {
    /// `n·x < lo` is part 1, `n·x > hi` part 2, the slab between is part 3.
    Planes { normal: Vec<f64>, lo: f64, hi: f64 },
    /// 2D only: `part1(x, y) < 0` is part 1, otherwise `part2(x, y) < 0` is
    /// part 2, everything else is part 3.
    Expressions { part1: Expr, part2: Expr },
}

impl Partition {
    pub fn planes(normal: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        let norm = normal.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) || !(lo <= hi) {
            return Err(Error::input("plane partition needs a non-zero normal and lo <= hi"));
        }
        Ok(Partition::Planes { normal: normal.into_iter().map(|a| a / norm).collect(), lo, hi })
    }

    pub fn label(&self, x: &[f64]) -> Part {
        match self {
            Partition::Planes { normal, lo, hi } => {
                let p: f64 = normal.iter().zip(x).map(|(a, b)| a * b).sum();
                if p < *lo {
                    Part::One
                } else if p > *hi {
                    Part::Two
                } else {
                    Part::Three
                }
            }
            Partition::Expressions { part1, part2 } => {
                let v = Vars { t: 0.0, x: x[0], y: x[1] };
                if part1.eval(v) < 0.0 {
                    Part::One
                } else if part2.eval(v) < 0.0 {
                    Part::Two
                } else {
                    Part::Three
                }
            }
        }
    }

    /// Random parallel-plane partition whose slab lies within the projection
    /// range of `bbox` along a random direction.
    pub fn random_planes(bbox: &BoundingBox, r: &mut rng::Rng) -> Partition {
        let dim = bbox.dim();
        let normal: Vec<f64> = loop {
            let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-9 {
                break v.into_iter().map(|a| a / n).collect();
            }
        };
        let (mut pmin, mut pmax) = (0.0, 0.0);
        for k in 0..dim {
            let (a, b) = (normal[k] * bbox.lo[k], normal[k] * bbox.hi[k]);
            pmin += a.min(b);
            pmax += a.max(b);
        }
        let u: f64 = r.random();
        let v: f64 = r.random();
        let (a, b) = (pmin + (pmax - pmin) * u.min(v), pmin + (pmax - pmin) * u.max(v));
        Partition::Planes { normal, lo: a, hi: b }
    }
}

/// Summary measures of a domain.
#[derive(Debug, Clone, Serialize)]
pub struct DomainStats {
    pub volume: Estimate,
    pub diameter: f64,
    pub iso_ratio: Option<Estimate>,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn domain_stats(domain: &Domain, n: usize, seed: u64) -> Result<DomainStats> {
    let volume = volume_mc(domain, n, seed)?;
    let diameter = diameter_estimate(domain, (n / 10).clamp(2, 100_000), seed)?;
    let iso_ratio = domain.perimeter().ok().map(|p| {
        let value = p / volume.value;
        Estimate { value, stderr: value * volume.stderr / volume.value }
    });
    Ok(DomainStats { volume, diameter, iso_ratio, n_samples: n, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_polyline() -> Domain {
        Domain::Polyline(Polyline::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap())
    }

    fn l_polyline() -> Domain {
        Domain::Polyline(
            Polyline::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]]).unwrap(),
        )
    }

    #[test]
    fn contains_examples() {
        assert!(Domain::unit_disk().contains(&[0.0, 0.0]).unwrap());
        assert!(!Domain::LShape.contains(&[0.75, 0.75]).unwrap());
        assert!(Domain::LShape.contains(&[0.25, 0.75]).unwrap());
        assert!(square_polyline().contains(&[0.5, 0.5]).unwrap());
    }

    #[test]
    fn contains_rejects_bad_points() {
        assert!(matches!(Domain::unit_disk().contains(&[0.0, 0.0, 0.0]), Err(Error::Input(_))));
        assert!(matches!(Domain::unit_disk().contains(&[f64::NAN, 0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn volume_of_unit_box_is_exact() {
        let v = volume_mc(&Domain::unit_square(), 1_000_000, 1).unwrap();
        assert_eq!(v.value, 1.0);
        assert_eq!(v.stderr, 0.0);
    }

    #[test]
    fn volume_of_disk_and_l_shape() {
        let v = volume_mc(&Domain::unit_disk(), 1_000_000, 2).unwrap();
        assert!((v.value - PI).abs() <= 3.0 * v.stderr, "{v:?}");
        let v = volume_mc(&Domain::LShape, 1_000_000, 3).unwrap();
        assert!((v.value - 0.75).abs() <= 3.0 * v.stderr, "{v:?}");
    }

    #[test]
    fn volume_rejects_small_n_and_is_deterministic() {
        assert!(volume_mc(&Domain::unit_disk(), 999, 1).is_err());
        let a = volume_mc(&Domain::LShape, 10_000, 9).unwrap();
        let b = volume_mc(&Domain::LShape, 10_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diameter_examples() {
        let d = diameter_estimate(&Domain::unit_square(), 20_000, 1).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 0.01 * 2f64.sqrt(), "{d}");
        let d = diameter_estimate(&Domain::unit_disk(), 20_000, 1).unwrap();
        assert!((d - 2.0).abs() < 0.02 && d <= 2.0, "{d}");
        let d = diameter_estimate(&Domain::LShape, 20_000, 1).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 0.01 * 2f64.sqrt(), "{d}");
        assert!(d <= 2f64.sqrt());
    }

    #[test]
    fn l_shape_diameter_oracle() {
        // farthest pair over the boundary vertices
        let v = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.5, 0.5], [0.5, 1.0], [0.0, 1.0]];
        let mut best: f64 = 0.0;
        for a in &v {
            for b in &v {
                best = best.max(polyline::dist(*a, *b));
            }
        }
        assert!((best - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Domain::LShape.exact_diameter(), Some(best));
    }

    #[test]
    fn iso_ratio_examples() {
        let r = iso_ratio_estimate(&Domain::unit_square(), 100_000, 1).unwrap();
        assert_eq!(r.value, 4.0);
        let r = iso_ratio_estimate(&Domain::unit_disk(), 1_000_000, 1).unwrap();
        assert!((r.value - 2.0).abs() <= 3.0 * r.stderr, "{r:?}");
        let r = iso_ratio_estimate(&Domain::LShape, 1_000_000, 1).unwrap();
        assert!((r.value - 16.0 / 3.0).abs() <= 3.0 * r.stderr, "{r:?}");
        // vertex enumeration of the L boundary
        let l = l_polyline();
        if let Domain::Polyline(p) = &l {
            assert!((p.perimeter() - 4.0).abs() < 1e-15);
            assert!((p.area() - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn set_distance_examples() {
        assert_eq!(set_distance(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        let a = vec![vec![0.1, 0.2], vec![0.5, 0.5]];
        assert_eq!(set_distance(&a, &a).unwrap(), 0.0);
        assert!(set_distance(&[], &a).is_err());
    }

    #[test]
    fn set_distance_of_strips_matches_brute_force() {
        let s = Domain::unit_square().uniform_samples(20_000, 5, Purpose::Misc).unwrap();
        let left: Vec<_> = s.iter().filter(|p| p[0] <= 0.45).cloned().collect();
        let right: Vec<_> = s.iter().filter(|p| p[0] >= 0.55).cloned().collect();
        let fast = set_distance(&left, &right).unwrap();
        let mut brute = f64::INFINITY;
        for p in &left {
            for q in &right {
                brute = brute.min(euclid(p, q));
            }
        }
        assert_eq!(fast, brute);
        assert!((fast - 0.1).abs() < 0.01, "{fast}");
    }

    #[test]
    fn polyline_membership_agrees_with_analytic() {
        let mut r = rng::stream(11, Purpose::Misc, 0);
        let sq = square_polyline();
        let l = l_polyline();
        let bb = BoundingBox { lo: vec![-0.2, -0.2], hi: vec![1.2, 1.2] };
        let mut x = vec![0.0; 2];
        for _ in 0..10_000 {
            bb.sample(&mut r, &mut x);
            // boundary hits have probability zero
            assert_eq!(sq.contains_unchecked(&x), Domain::unit_square().contains_unchecked(&x));
            assert_eq!(l.contains_unchecked(&x), Domain::LShape.contains_unchecked(&x));
        }
    }

    #[test]
    fn convexity_probe_separates_shapes() {
        assert!(convexity_probe(&Domain::unit_disk(), 10_000, 1).unwrap());
        assert!(convexity_probe(&Domain::unit_square(), 10_000, 1).unwrap());
        assert!(convexity_probe(&Domain::cube(vec![0.0; 3], vec![1.0, 2.0, 3.0]).unwrap(), 10_000, 1).unwrap());
        assert!(!convexity_probe(&Domain::LShape, 10_000, 1).unwrap());
    }

    #[test]
    fn star_shape_membership() {
        let s = StarShape::from_fn([0.0, 0.0], |th| 1.0 + 0.3 * (3.0 * th).cos()).unwrap();
        let d = Domain::Star(s);
        assert!(d.contains(&[1.25, 0.0]).unwrap());
        assert!(!d.contains(&[1.35, 0.0]).unwrap());
        assert!(StarShape::from_fn([0.0, 0.0], |th| th.cos()).is_err());
        // area of r(θ) = 1 + 0.3 cos 3θ is π (1 + 0.045)
        let v = volume_mc(&d, 1_000_000, 4).unwrap();
        assert!((v.value - PI * 1.045).abs() < 3.0 * v.stderr + 2e-3, "{v:?}");
    }

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1, 1.0) - 2.0).abs() < 1e-15);
        assert!((ball_volume(2, 1.0) - PI).abs() < 1e-15);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * PI * 8.0).abs() < 1e-12);
    }

    #[test]
    fn partition_labels() {
        let p = Partition::planes(vec![1.0, 0.0], 0.45, 0.55).unwrap();
        assert_eq!(p.label(&[0.1, 0.9]), Part::One);
        assert_eq!(p.label(&[0.5, 0.9]), Part::Three);
        assert_eq!(p.label(&[0.9, 0.9]), Part::Two);
        let e = Partition::Expressions { part1: Expr::parse("x - 0.3").unwrap(), part2: Expr::parse("0.7 - x").unwrap() };
        assert_eq!(e.label(&[0.1, 0.0]), Part::One);
        assert_eq!(e.label(&[0.5, 0.0]), Part::Three);
        assert_eq!(e.label(&[0.8, 0.0]), Part::Two);
    }

    #[test]
    fn volume_never_exceeds_box() {
        for d in [Domain::unit_disk(), Domain::LShape, square_polyline()] {
            let v = volume_mc(&d, 5_000, 1).unwrap();
            assert!(v.value <= d.bounding_box().volume());
        }
    }
}

//! Potential-flow transport maps.
//!
//! For each time step the harmonic extension of `c(t_k, ·)` is solved on the
//! current domain, giving `v = ∇c − ∇w`. Seeds, boundary vertices and seed
//! Jacobians are advanced one RK4 step in that frozen field, and the moved
//! boundary defines the next domain.

mod archive;

use std::sync::{Arc, OnceLock};

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

pub use archive::{read_archive, write_archive, MapArchive};

use crate::error::{Error, Result};
use crate::geometry::{convexity_probe, polyline, BoundingBox, Domain, Polyline, P2};
use crate::pde::{
    central_gradient, extend_by_fit, BoundaryScheme, harmonic_extension_parts, rasterize_with_budget, Grid,
    GridField, MaskGrid, NodeKind, SolveStats, SolverOptions, VelocityField, DEFAULT_NODE_BUDGET,
};
use crate::potential::PotentialSpec;
use crate::rng::{self, Purpose};

/// Rings of extrapolated `w` outside the domain, so that velocities in
/// cells cut by the boundary do not see the jump to zero.
const EXTRAPOLATION_LAYERS: usize = 4;

/// Default cutoff wavelength of the boundary low-pass.
pub const DEFAULT_BOUNDARY_FILTER: f64 = 0.25;

pub type Mat2 = [[f64; 2]; 2];
pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat2) -> f64 {
    let s = 0.5 * (m[0][0].powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + m[1][1].powi(2));
    let d = det(m);
    (s + (s * s - d * d).max(0.0).sqrt()).sqrt()
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn mat_axpy(a: &Mat2, s: f64, b: &Mat2) -> Mat2 {
    [[a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]], [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]]]
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// Convex 2D base domain.
    pub base: Domain,
    pub potential: PotentialSpec,
    /// Number of time steps on `[0, 1]`.
    pub steps: usize,
    pub h: f64,
    /// Grid padding around the current domain; at least `5h`.
    pub pad: f64,
    pub solver: SolverOptions,
    /// Spacing of the seed lattice.
    pub seed_spacing: f64,
    pub node_budget: usize,
    /// Keep per-step velocity fields for forward/backward queries.
    pub cache_fields: bool,
    /// Shortest boundary wavelength kept after steps whose potential is not
    /// harmonic (see [`build_map`]); `0` disables the filter.
    pub boundary_filter: f64,
}

impl FlowConfig {
    pub fn new(base: Domain, potential: PotentialSpec, steps: usize, h: f64) -> Self {
        FlowConfig {
            base,
            potential,
            steps,
            h,
            pad: 5.0 * h,
            solver: SolverOptions { scheme: BoundaryScheme::GhostFluid, ..SolverOptions::default() },
            seed_spacing: 0.05,
            node_budget: DEFAULT_NODE_BUDGET,
            cache_fields: true,
            boundary_filter: DEFAULT_BOUNDARY_FILTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::input("flow needs at least one time step"));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::input(format!("grid spacing must be positive, got {}", self.h)));
        }
        if !(self.pad >= 5.0 * self.h * (1.0 - 1e-12)) {
            return Err(Error::input(format!("grid pad {} is below 5h = {}", self.pad, 5.0 * self.h)));
        }
        if !(self.boundary_filter >= 0.0) {
            return Err(Error::input("boundary filter wavelength must be non-negative"));
        }
        if !(self.seed_spacing > 0.0) {
            return Err(Error::input("seed spacing must be positive"));
        }
        if self.base.dim() != 2 {
            return Err(Error::Unsupported("transport maps are built in 2D only".into()));
        }
        if matches!(self.base, Domain::FlowImage(_)) {
            return Err(Error::input("base domain must not itself be a flow image"));
        }
        if !self.base.is_known_convex() && !convexity_probe(&self.base, 4000, 0)? {
            return Err(Error::input(format!("base domain `{}` is not convex", self.base.kind_name())));
        }
        Ok(())
    }
}

/// Frozen velocity of one step with its nodal Jacobian, interleaved per node
/// as `[vx, vy, ∂x vx, ∂y vx, ∂x vy, ∂y vy]`.
#[derive(Debug, Clone)]
struct StepField {
    grid: Grid,
    data: Vec<[f64; 6]>,
}

impl StepField {
    /// Velocity from `rv`; `∇v = ∇∇c − ∇∇w` with the exact Hessian of `c`
    /// and compact second differences of the extended `w`. At inside nodes
    /// the trace is the Poisson residual; at extension nodes it is an
    /// extrapolation artifact, so the trace-free part is kept everywhere.
    fn new(rv: &RealizedVelocity, spec: &PotentialSpec) -> Self {
        let vf = &rv.field;
        let grid = vf.vx.grid();
        let (nx, ny) = (grid.nx, grid.ny);
        let h2 = grid.h * grid.h;
        let w = &rv.w_ext;
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..ny {
            for i in 0..nx {
                let k = grid.index(i, j);
                let hc = spec.hessian(vf.t, grid.node(i, j));
                let (mut wxx, mut wxy, mut wyy) = (0.0, 0.0, 0.0);
                if let Some(w) = w {
                    if i > 0 && j > 0 && i + 1 < nx && j + 1 < ny {
                        wxx = (w[k + 1] - 2.0 * w[k] + w[k - 1]) / h2;
                        wyy = (w[k + nx] - 2.0 * w[k] + w[k - nx]) / h2;
                        wxy = (w[k + nx + 1] - w[k + nx - 1] - w[k - nx + 1] + w[k - nx - 1]) / (4.0 * h2);
                    }
                }
                let gxy = hc[0][1] - wxy;
                let m = 0.5 * ((hc[0][0] - wxx) - (hc[1][1] - wyy));
                data.push([vf.vx.values[k], vf.vy.values[k], m, gxy, gxy, -m]);
            }
        }
        StepField { grid, data }
    }

    #[inline]
    fn sample_full(&self, p: P2) -> Option<([f64; 2], Mat2)> {
        let (k, fx, fy) = self.grid.locate(p)?;
        let nx = self.grid.nx;
        let (a, b, c, d) = (&self.data[k], &self.data[k + 1], &self.data[k + nx], &self.data[k + nx + 1]);
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let mut o = [0.0; 6];
        for i in 0..6 {
            o[i] = w[0] * a[i] + w[1] * b[i] + w[2] * c[i] + w[3] * d[i];
        }
        Some(([o[0], o[1]], [[o[2], o[3]], [o[4], o[5]]]))
    }

    fn velocity_only(&self) -> VelocityOnly {
        VelocityOnly { grid: self.grid, v: self.data.iter().map(|d| [d[0], d[1]]).collect() }
    }
}

/// Velocity samples kept after construction.
#[derive(Debug, Clone)]
struct VelocityOnly {
    grid: Grid,
    v: Vec<[f64; 2]>,
}

impl VelocityOnly {
    #[inline]
    /// Off-grid points take the velocity of the nearest point on the box.
    fn sample(&self, p: P2) -> Option<[f64; 2]> {
        let (k, fx, fy) = self.grid.locate_clamped(p)?;
        let nx = self.grid.nx;
        let (a, b, c, d) = (self.v[k], self.v[k + 1], self.v[k + nx], self.v[k + nx + 1]);
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        Some([
            w[0] * a[0] + w[1] * b[0] + w[2] * c[0] + w[3] * d[0],
            w[0] * a[1] + w[1] * b[1] + w[2] * c[1] + w[3] * d[1],
        ])
    }

    #[inline]
    fn rk4(&self, x: P2, dt: f64) -> Option<P2> {
        let k1 = self.sample(x)?;
        let k2 = self.sample([x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]])?;
        let k3 = self.sample([x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]])?;
        let k4 = self.sample([x[0] + dt * k3[0], x[1] + dt * k3[1]])?;
        Some([
            x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ])
    }
}

/// One RK4 step of the point and the variational equation `J' = ∇v J`.
fn rk4_with_jacobian(f: &StepField, x: P2, j: &Mat2, dt: f64) -> Option<(P2, Mat2)> {
    let (v1, g1) = f.sample_full(x)?;
    let k1 = mat_mul(&g1, j);
    let x2 = [x[0] + 0.5 * dt * v1[0], x[1] + 0.5 * dt * v1[1]];
    let j2 = mat_axpy(j, 0.5 * dt, &k1);
    let (v2, g2) = f.sample_full(x2)?;
    let k2 = mat_mul(&g2, &j2);
    let x3 = [x[0] + 0.5 * dt * v2[0], x[1] + 0.5 * dt * v2[1]];
    let j3 = mat_axpy(j, 0.5 * dt, &k2);
    let (v3, g3) = f.sample_full(x3)?;
    let k3 = mat_mul(&g3, &j3);
    let x4 = [x[0] + dt * v3[0], x[1] + dt * v3[1]];
    let j4 = mat_axpy(j, dt, &k3);
    let (v4, g4) = f.sample_full(x4)?;
    let k4 = mat_mul(&g4, &j4);
    let s = dt / 6.0;
    let xn = [
        x[0] + s * (v1[0] + 2.0 * v2[0] + 2.0 * v3[0] + v4[0]),
        x[1] + s * (v1[1] + 2.0 * v2[1] + 2.0 * v3[1] + v4[1]),
    ];
    let mut jn = *j;
    for r in 0..2 {
        for c in 0..2 {
            jn[r][c] += s * (k1[r][c] + 2.0 * k2[r][c] + 2.0 * k3[r][c] + k4[r][c]);
        }
    }
    Some((xn, jn))
}

fn rk4_point(f: &StepField, x: P2, dt: f64) -> Option<P2> {
    let v = |p: P2| f.sample_full(p).map(|(v, _)| v);
    let k1 = v(x)?;
    let k2 = v([x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]])?;
    let k3 = v([x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]])?;
    let k4 = v([x[0] + dt * k3[0], x[1] + dt * k3[1]])?;
    Some([
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ])
}

/// Realized velocity on a classified grid, together with the extension
/// parts it came from.
pub struct RealizedVelocity {
    pub field: VelocityField,
    pub w: GridField,
    /// `w` continued past the boundary; `None` when `w ≡ 0`.
    pub w_ext: Option<Vec<f64>>,
    pub stats: SolveStats,
}

/// `v = ∇c − ∇w`, with `∇c` exact at the nodes and `∇w` by central
/// differences of `w` continued past the boundary by extrapolation.
pub fn realized_velocity(
    mask: &MaskGrid,
    spec: &PotentialSpec,
    t: f64,
    guess: Option<&GridField>,
    opts: SolverOptions,
) -> Result<RealizedVelocity> {
    let ext = harmonic_extension_parts(mask, spec, t, guess, opts)?;
    let g = mask.grid;
    let mut vx = GridField::zeros(mask);
    let mut vy = GridField::zeros(mask);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            let gc = spec.gradient(t, g.node(i, j));
            vx.values[k] = gc[0];
            vy.values[k] = gc[1];
        }
    }
    let mut w_ext = None;
    if stats_nonzero(&ext.w) {
        let lap = |p: P2| spec.laplacian(t, p).unwrap_or(0.0);
        let we = extend_by_fit(&ext.w, &lap, EXTRAPOLATION_LAYERS, opts.scheme == BoundaryScheme::GhostFluid);
        let (gx, gy) = central_gradient(&we);
        for k in 0..g.len() {
            vx.values[k] -= gx[k];
            vy.values[k] -= gy[k];
        }
        w_ext = Some(we.values);
    }
    for &k in mask.inside_nodes() {
        let k = k as usize;
        if !vx.values[k].is_finite() || !vy.values[k].is_finite() {
            return Err(Error::Numeric("velocity is not finite inside the domain".into()));
        }
    }
    Ok(RealizedVelocity { field: VelocityField { t, vx, vy }, w: ext.w, w_ext, stats: ext.stats })
}

fn stats_nonzero(w: &GridField) -> bool {
    w.values.iter().any(|v| *v != 0.0)
}

/// Realized velocity `v(t, ·)` on `domain` at grid spacing `h`.
pub fn velocity(t: f64, domain: &Domain, spec: &PotentialSpec, h: f64, pad: f64, opts: SolverOptions) -> Result<VelocityField> {
    let mask = rasterize_with_budget(domain, h, pad, DEFAULT_NODE_BUDGET)?;
    Ok(realized_velocity(&mask, spec, t, None, opts)?.field)
}

/// Largest `|∇·v|` over inside nodes whose difference stencils stay inside.
pub fn interior_divergence(v: &VelocityField) -> f64 {
    let mask = &v.vx.mask;
    let g = mask.grid;
    let div = v.divergence();
    let deep = |k: usize| {
        let nx = g.nx;
        [k, k - 1, k + 1, k - nx, k + nx, k - 2, k + 2, k - 2 * nx, k + 2 * nx]
            .iter()
            .all(|&q| mask.kinds[q] == NodeKind::Inside)
    };
    mask.inside_nodes()
        .iter()
        .map(|&k| k as usize)
        .filter(|&k| k >= 2 * g.nx + 2 && k + 2 * g.nx + 2 < g.len() && deep(k))
        .map(|k| div.values[k].abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluxResidual {
    /// Signed `∮ v·n ds`.
    pub raw: f64,
    /// `|raw| / perimeter`.
    pub relative: f64,
}

/// Outward flux of `v` through a closed polyline by midpoint quadrature.
pub fn flux_residual(boundary: &Polyline, v: &VelocityField) -> Result<FluxResidual> {
    flux_with(boundary, |p| v.sample(p))
}

fn flux_with(boundary: &Polyline, v: impl Fn(P2) -> Option<[f64; 2]>) -> Result<FluxResidual> {
    let mut raw = 0.0;
    for (a, b) in boundary.segments() {
        let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let vm = v(m).ok_or_else(|| Error::input("boundary leaves the velocity grid"))?;
        // counter-clockwise orientation: outward normal times length is (dy, -dx)
        raw += vm[0] * (b[1] - a[1]) - vm[1] * (b[0] - a[0]);
    }
    Ok(FluxResidual { raw, relative: raw.abs() / boundary.perimeter() })
}

/// Per-step diagnostics recorded during construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub solve: SolveStats,
    pub flux: FluxResidual,
    pub interior_divergence: f64,
    pub lipschitz: f64,
    pub boundary_vertices: usize,
    pub grid_nodes: usize,
}

/// Regular seed lattice: seed `s` starts at `spacing * index[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedLattice {
    pub spacing: f64,
    pub index: Vec<[i64; 2]>,
}

impl SeedLattice {
    pub fn inside(domain: &Domain, spacing: f64) -> Self {
        let bb = domain.bounding_box();
        let (i0, i1) = ((bb.lo[0] / spacing).floor() as i64, (bb.hi[0] / spacing).ceil() as i64);
        let (j0, j1) = ((bb.lo[1] / spacing).floor() as i64, (bb.hi[1] / spacing).ceil() as i64);
        let mut index = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                if domain.contains_unchecked(&[i as f64 * spacing, j as f64 * spacing]) {
                    index.push([i, j]);
                }
            }
        }
        SeedLattice { spacing, index }
    }

    pub fn point(&self, s: usize) -> P2 {
        [self.index[s][0] as f64 * self.spacing, self.index[s][1] as f64 * self.spacing]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// The map `u = Φ(1, ·)` with everything recorded along the way.
#[derive(Debug)]
pub struct TransportMap {
    config: FlowConfig,
    seeds: SeedLattice,
    /// `positions[k][s]` = seed `s` at `t_k`.
    positions: Vec<Vec<P2>>,
    /// `jacobians[k][s]` = propagated Jacobian at `t_k`.
    jacobians: Vec<Vec<Mat2>>,
    boundaries: Vec<Polyline>,
    fields: Vec<VelocityOnly>,
    records: Vec<StepRecord>,
    lipschitz: f64,
    classifier: OnceLock<ImageClassifier>,
}

/// Coarse cells over the image, each either decided once or flagged as
/// possibly cut by the image boundary.
#[derive(Debug)]
struct ImageClassifier {
    bbox: BoundingBox,
    cell: f64,
    nx: usize,
    ny: usize,
    state: Vec<u8>,
}

const CELL_OUT: u8 = 0;
const CELL_IN: u8 = 1;
const CELL_NEAR: u8 = 2;

impl ImageClassifier {
    /// The boundary of `{y : Φ⁻¹(y) ∈ Ω}` is the forward image of `∂Ω`.
    /// Densely mapped boundary points, each with a disk reaching its
    /// neighbours plus slack for the forward/backward mismatch, cover it;
    /// a cell missing every disk lies on one side and its centre decides.
    fn build(map: &TransportMap) -> Self {
        let h = map.config.h;
        let base = map.config.base.boundary_polyline(0.25 * h).expect("base boundary was built before");
        let mapped: Vec<P2> = base.vertices().par_iter().map(|p| map.forward(*p).unwrap_or(*p)).collect();
        let n = mapped.len();
        let gap = (0..n).map(|i| polyline::dist(mapped[i], mapped[(i + 1) % n])).fold(0.0, f64::max);
        let reach = gap + 2.0 * h;
        let cell = 2.0 * h;
        let (mut lo, mut hi) = map.final_boundary().expect("built map has a boundary").bounds();
        for p in &mapped {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        let pad = reach + cell;
        let lo = [lo[0] - pad, lo[1] - pad];
        let nx = (((hi[0] + pad - lo[0]) / cell).ceil() as usize).max(1);
        let ny = (((hi[1] + pad - lo[1]) / cell).ceil() as usize).max(1);
        let bbox = BoundingBox { lo: lo.to_vec(), hi: vec![lo[0] + nx as f64 * cell, lo[1] + ny as f64 * cell] };
        let mut state = vec![CELL_OUT; nx * ny];
        let r = reach + cell * std::f64::consts::FRAC_1_SQRT_2;
        for p in &mapped {
            let i0 = ((p[0] - r - lo[0]) / cell).floor().max(0.0) as usize;
            let j0 = ((p[1] - r - lo[1]) / cell).floor().max(0.0) as usize;
            let i1 = (((p[0] + r - lo[0]) / cell).floor() as usize).min(nx - 1);
            let j1 = (((p[1] + r - lo[1]) / cell).floor() as usize).min(ny - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let c = [lo[0] + (i as f64 + 0.5) * cell, lo[1] + (j as f64 + 0.5) * cell];
                    if polyline::dist(c, *p) <= r {
                        state[j * nx + i] = CELL_NEAR;
                    }
                }
            }
        }
        state.par_iter_mut().enumerate().for_each(|(k, s)| {
            if *s != CELL_NEAR {
                let c = [lo[0] + ((k % nx) as f64 + 0.5) * cell, lo[1] + ((k / nx) as f64 + 0.5) * cell];
                *s = if map.membership_by_backward(c) { CELL_IN } else { CELL_OUT };
            }
        });
        ImageClassifier { bbox, cell, nx, ny, state }
    }

    fn state(&self, y: P2) -> u8 {
        let i = ((y[0] - self.bbox.lo[0]) / self.cell) as usize;
        let j = ((y[1] - self.bbox.lo[1]) / self.cell) as usize;
        self.state[j.min(self.ny - 1) * self.nx + i.min(self.nx - 1)]
    }
}

/// Integrate the flow on `[0, 1]`.
///
/// When `∇²c ≠ 0` the boundary update is unstable at short wavelengths:
/// a bump where `∂w/∂n > 0` raises the Dirichlet data it carries and is
/// pushed further out, at a rate growing with its wavenumber. Such steps
/// are followed by a low-pass of the polyline at wavelength
/// `cfg.boundary_filter`.
/// Seeds and the cached fields are not filtered.
pub fn build_map(cfg: FlowConfig) -> Result<TransportMap> {
    cfg.validate()?;
    let steps = cfg.steps;
    let h = cfg.h;
    let dt = 1.0 / steps as f64;
    let seeds = SeedLattice::inside(&cfg.base, cfg.seed_spacing);
    if seeds.is_empty() {
        return Err(Error::input("seed lattice has no point inside the base domain"));
    }
    let mut pos: Vec<P2> = (0..seeds.len()).map(|s| seeds.point(s)).collect();
    let mut jac: Vec<Mat2> = vec![IDENTITY; seeds.len()];
    let mut boundary = cfg.base.boundary_polyline(h)?.resampled(0.5 * h, 2.0 * h);
    let mut positions = vec![pos.clone()];
    let mut jacobians = vec![jac.clone()];
    let mut boundaries = vec![boundary.clone()];
    let mut fields = Vec::new();
    let mut records = Vec::with_capacity(steps);
    let mut lipschitz = 0.0f64;
    // the last two solutions, for a linear-in-time initial guess
    let mut prev_w: Vec<GridField> = Vec::new();

    for k in 0..steps {
        let t = k as f64 * dt;
        let domain = if k == 0 { cfg.base.clone() } else { Domain::Polyline(boundary.clone()) };
        let mask = rasterize_with_budget(&domain, h, cfg.pad, cfg.node_budget)?;
        for p in boundary.vertices() {
            if !mask.grid.covers(*p) {
                return Err(Error::BlowUp { step: k, time: t });
            }
        }
        let guess = match &prev_w[..] {
            [a, b] => Some(GridField::from_fn(&mask, |p| match (a.sample(p), b.sample(p)) {
                (Some(wa), Some(wb)) => 2.0 * wb - wa,
                (_, Some(wb)) => wb,
                _ => 0.0,
            })),
            [b] => Some(b.clone()),
            _ => None,
        };
        let rv = realized_velocity(&mask, &cfg.potential, t, guess.as_ref(), cfg.solver)?;
        let field = StepField::new(&rv, &cfg.potential);
        let has_w = rv.w_ext.is_some();
        let step_l = step_lipschitz(&field, &mask);
        lipschitz = lipschitz.max(step_l);
        let flux = flux_residual(&boundary, &rv.field).map_err(|_| Error::BlowUp { step: k, time: t })?;
        records.push(StepRecord {
            step: k,
            t,
            solve: rv.stats,
            flux,
            interior_divergence: interior_divergence(&rv.field),
            lipschitz: step_l,
            boundary_vertices: boundary.len(),
            grid_nodes: mask.grid.len(),
        });

        let advanced: Vec<Option<(P2, Mat2)>> =
            pos.par_iter().zip(jac.par_iter()).map(|(x, j)| rk4_with_jacobian(&field, *x, j, dt)).collect();
        for (s, a) in advanced.into_iter().enumerate() {
            let (x, j) = a.ok_or(Error::BlowUp { step: k, time: t })?;
            pos[s] = x;
            jac[s] = j;
        }
        let moved: Vec<Option<P2>> = boundary.vertices().par_iter().map(|p| rk4_point(&field, *p, dt)).collect();
        let moved: Vec<P2> = moved.into_iter().collect::<Option<_>>().ok_or(Error::BlowUp { step: k, time: t })?;
        let mut next = Polyline::new(moved).map_err(|_| Error::Topology { step: k })?;
        if has_w && cfg.boundary_filter > 0.0 {
            next = next.low_passed(cfg.boundary_filter, h).map_err(|_| Error::Topology { step: k })?;
        }
        boundary = next.resampled(0.5 * h, 2.0 * h);
        if boundary.self_intersects() {
            return Err(Error::Topology { step: k });
        }

        positions.push(pos.clone());
        jacobians.push(jac.clone());
        boundaries.push(boundary.clone());
        if cfg.cache_fields {
            fields.push(field.velocity_only());
        }
        if has_w {
            if prev_w.len() == 2 {
                prev_w.remove(0);
            }
            prev_w.push(rv.w);
        } else {
            prev_w.clear();
        }
    }

    Ok(TransportMap {
        config: cfg,
        seeds,
        positions,
        jacobians,
        boundaries,
        fields,
        records,
        lipschitz,
        classifier: OnceLock::new(),
    })
}

fn step_lipschitz(f: &StepField, mask: &MaskGrid) -> f64 {
    let mut l = 0.0f64;
    for (k, kind) in mask.kinds.iter().enumerate() {
        if *kind != NodeKind::Outside {
            let d = &f.data[k];
            l = l.max(spectral_norm(&[[d[2], d[3]], [d[4], d[5]]]));
        }
    }
    l
}

impl TransportMap {
    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn seeds(&self) -> &SeedLattice {
        &self.seeds
    }

    pub fn positions(&self, k: usize) -> &[P2] {
        &self.positions[k]
    }

    pub fn final_positions(&self) -> &[P2] {
        self.positions.last().expect("at least the initial positions")
    }

    pub fn jacobians(&self, k: usize) -> &[Mat2] {
        &self.jacobians[k]
    }

    pub fn final_jacobians(&self) -> &[Mat2] {
        self.jacobians.last().expect("at least the initial jacobians")
    }

    pub fn boundary(&self, k: usize) -> &Polyline {
        &self.boundaries[k]
    }

    pub fn boundaries(&self) -> &[Polyline] {
        &self.boundaries
    }

    pub fn final_boundary(&self) -> Option<&Polyline> {
        self.boundaries.last()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Max over nodes and steps of the spectral norm of `∇v`.
    pub fn lipschitz_estimate(&self) -> f64 {
        self.lipschitz
    }

    pub fn has_cached_fields(&self) -> bool {
        !self.fields.is_empty()
    }

    /// Box holding the image: the cell cover when fields are cached,
    /// otherwise the padded advected boundary.
    pub fn image_bounding_box(&self) -> BoundingBox {
        if self.has_cached_fields() {
            return self.classifier().bbox.clone();
        }
        let (lo, hi) = self.final_boundary().expect("built map has a boundary").bounds();
        let pad = 2.0 * self.config.h;
        BoundingBox { lo: vec![lo[0] - pad, lo[1] - pad], hi: vec![hi[0] + pad, hi[1] + pad] }
    }

    fn classifier(&self) -> &ImageClassifier {
        self.classifier.get_or_init(|| ImageClassifier::build(self))
    }

    /// `Φ(1, x)` through the cached fields; `None` if the path leaves a grid.
    pub fn forward(&self, x: P2) -> Option<P2> {
        if !self.has_cached_fields() {
            return None;
        }
        let dt = 1.0 / self.config.steps as f64;
        self.fields.iter().try_fold(x, |p, f| f.rk4(p, dt))
    }

    /// `Φ⁻¹(y)`: integrate backward through the cached fields in reverse.
    pub fn backward(&self, y: P2) -> Option<P2> {
        if !self.has_cached_fields() {
            return None;
        }
        let dt = 1.0 / self.config.steps as f64;
        self.fields.iter().rev().try_fold(y, |p, f| f.rk4(p, -dt))
    }

    /// Membership in `Φ(1, Ω)`, decided by integrating backward. Points in
    /// cells away from the image boundary are answered from a cell cover
    /// built on first use. Without cached fields the advected boundary
    /// decides.
    pub fn inverse_membership(&self, y: P2) -> bool {
        if !self.has_cached_fields() {
            return self.final_boundary().is_some_and(|b| b.contains(y));
        }
        let c = self.classifier();
        if !c.bbox.contains(&y) {
            return false;
        }
        match c.state(y) {
            CELL_NEAR => self.membership_by_backward(y),
            s => s == CELL_IN,
        }
    }

    /// `Φ⁻¹(y) ∈ Ω` without the cell cover.
    pub fn membership_by_backward(&self, y: P2) -> bool {
        self.backward(y).is_some_and(|x| self.config.base.contains_unchecked(&x))
    }

    /// The image as a domain.
    pub fn image(self: &Arc<Self>) -> Domain {
        Domain::FlowImage(Arc::clone(self))
    }
}

/// Determinants of the propagated Jacobians and the lattice cross-check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianReport {
    pub dets: Vec<f64>,
    pub max_abs_dev: f64,
    /// Central-difference determinant from neighbouring seeds, where all
    /// four lattice neighbours exist.
    pub fd_dets: Vec<Option<f64>>,
    pub fd_max_abs_dev: f64,
    /// Largest entrywise gap between the two Jacobian estimates.
    pub max_fd_gap: f64,
    pub fd_count: usize,
}

pub fn jacobian_dets(map: &TransportMap) -> JacobianReport {
    jacobian_report(map.seeds(), map.final_positions(), map.final_jacobians())
}

pub fn jacobian_report(seeds: &SeedLattice, finals: &[P2], jac: &[Mat2]) -> JacobianReport {
    let dets: Vec<f64> = jac.iter().map(det).collect();
    let max_abs_dev = dets.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
    let lookup: std::collections::HashMap<[i64; 2], usize> =
        seeds.index.iter().enumerate().map(|(s, ij)| (*ij, s)).collect();
    let two_s = 2.0 * seeds.spacing;
    let mut fd_dets = Vec::with_capacity(dets.len());
    let mut fd_max_abs_dev = 0.0f64;
    let mut max_fd_gap = 0.0f64;
    let mut fd_count = 0;
    for (s, ij) in seeds.index.iter().enumerate() {
        let nb = |di: i64, dj: i64| lookup.get(&[ij[0] + di, ij[1] + dj]).copied();
        let fd = match (nb(1, 0), nb(-1, 0), nb(0, 1), nb(0, -1)) {
            (Some(e), Some(w), Some(n), Some(so)) => {
                let m: Mat2 = [
                    [(finals[e][0] - finals[w][0]) / two_s, (finals[n][0] - finals[so][0]) / two_s],
                    [(finals[e][1] - finals[w][1]) / two_s, (finals[n][1] - finals[so][1]) / two_s],
                ];
                for r in 0..2 {
                    for c in 0..2 {
                        max_fd_gap = max_fd_gap.max((m[r][c] - jac[s][r][c]).abs());
                    }
                }
                let d = det(&m);
                fd_max_abs_dev = fd_max_abs_dev.max((d - 1.0).abs());
                fd_count += 1;
                Some(d)
            }
            _ => None,
        };
        fd_dets.push(fd);
    }
    JacobianReport { dets, max_abs_dev, fd_dets, fd_max_abs_dev, max_fd_gap, fd_count }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiLipschitzReport {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub l_est: f64,
    pub lower: f64,
    pub upper: f64,
    pub pairs: usize,
    pub within: bool,
}

/// Distance ratios over random seed pairs against the `e^{±L}` sandwich
/// with 5% slack.
pub fn bilipschitz_check(map: &TransportMap, n_pairs: usize, seed: u64) -> Result<BiLipschitzReport> {
    let n = map.seeds().len();
    if n < 2 {
        return Err(Error::input("need at least two seeds"));
    }
    let mut r = rng::stream(seed, Purpose::Pairs, 0);
    let src: Vec<P2> = (0..n).map(|s| map.seeds().point(s)).collect();
    let dst = map.final_positions();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..n_pairs {
        let a = r.random_range(0..n);
        let mut b = r.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let ratio = crate::geometry::polyline::dist(dst[a], dst[b]) / crate::geometry::polyline::dist(src[a], src[b]);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    let l = map.lipschitz_estimate();
    let lower = (-l).exp() * 0.95;
    let upper = l.exp() * 1.05;
    Ok(BiLipschitzReport {
        ratio_min: lo,
        ratio_max: hi,
        l_est: l,
        lower,
        upper,
        pairs: n_pairs,
        within: n_pairs == 0 || (lo >= lower && hi <= upper),
    })
}

/// Forward-then-backward error over uniform base points.
pub fn round_trip_error(map: &TransportMap, n: usize, seed: u64) -> Result<f64> {
    if !map.has_cached_fields() {
        return Err(Error::input("round trip needs cached velocity fields"));
    }
    let pts = map.config().base.uniform_samples(n, seed, Purpose::Misc)?;
    let errs: Vec<f64> = pts
        .par_iter()
        .map(|p| {
            let x = [p[0], p[1]];
            match map.forward(x).and_then(|y| map.backward(y)) {
                Some(z) => crate::geometry::polyline::dist(x, z),
                None => f64::INFINITY,
            }
        })
        .collect();
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::volume_mc;

    fn spec(text: &str) -> PotentialSpec {
        PotentialSpec::parse(text).unwrap()
    }

    #[test]
    fn spectral_norm_matches_definition() {
        assert!((spectral_norm(&[[1.0, 0.0], [0.0, -1.0]]) - 1.0).abs() < 1e-15);
        assert!((spectral_norm(&[[3.0, 0.0], [0.0, 2.0]]) - 3.0).abs() < 1e-15);
        assert!((spectral_norm(&[[0.0, 2.0], [0.0, 0.0]]) - 2.0).abs() < 1e-15);
        assert_eq!(spectral_norm(&[[0.0; 2]; 2]), 0.0);
    }

    #[test]
    fn velocity_examples() {
        let h = 0.02;
        let v = velocity(0.0, &Domain::unit_disk(), &spec("x"), h, 5.0 * h, SolverOptions::default()).unwrap();
        assert!(v.vx.values.iter().all(|x| *x == 1.0) && v.vy.values.iter().all(|y| *y == 0.0));
        let v = velocity(0.0, &Domain::unit_disk(), &spec("(x^2-y^2)/2"), h, 5.0 * h, SolverOptions::default()).unwrap();
        for &k in v.vx.mask.inside_nodes() {
            let k = k as usize;
            let g = v.vx.grid();
            let p = g.node(k % g.nx, k / g.nx);
            assert!((v.vx.values[k] - p[0]).abs() < 1e-12 && (v.vy.values[k] + p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_divergence_small_for_nonharmonic_potential() {
        let h = 0.01;
        let opts = FlowConfig::new(Domain::unit_disk(), spec("x^2"), 1, h).solver;
        let v = velocity(0.0, &Domain::unit_disk(), &spec("x^2"), h, 5.0 * h, opts).unwrap();
        let d = interior_divergence(&v);
        assert!(d <= 0.05, "{d}");
    }

    #[test]
    fn flux_examples() {
        let h = 0.01;
        let disk = Domain::unit_disk();
        let circle = disk.boundary_polyline(h).unwrap();
        let v = velocity(0.0, &disk, &spec("x"), h, 5.0 * h, SolverOptions::default()).unwrap();
        assert!(flux_residual(&circle, &v).unwrap().raw.abs() < 1e-6);
        let sq = Domain::unit_square().boundary_polyline(0.05).unwrap();
        assert!(flux_residual(&sq, &v).unwrap().raw.abs() < 1e-6);
        let f = flux_with(&circle, |p| Some(p)).unwrap();
        assert!((f.raw - std::f64::consts::TAU).abs() < 1e-3, "{}", f.raw);
        let hv = velocity(0.0, &disk, &spec("(x^2-y^2)/2"), h, 5.0 * h, SolverOptions::default()).unwrap();
        assert!(flux_residual(&circle, &hv).unwrap().relative < h);
    }

    #[test]
    fn zero_potential_is_identity() {
        let map = build_map(FlowConfig::new(Domain::unit_disk(), spec("0"), 5, 0.05)).unwrap();
        for (s, p) in map.final_positions().iter().enumerate() {
            assert_eq!(*p, map.seeds().point(s));
        }
        assert!(map.final_jacobians().iter().all(|j| *j == IDENTITY));
        let rep = jacobian_dets(&map);
        assert_eq!(rep.max_abs_dev, 0.0);
        assert_eq!(map.lipschitz_estimate(), 0.0);
        let base = Domain::unit_disk();
        let mut r = rng::stream(1, Purpose::Misc, 0);
        for _ in 0..500 {
            let y = [r.random_range(-1.3..1.3), r.random_range(-1.3..1.3)];
            assert_eq!(map.inverse_membership(y), base.contains_unchecked(&y));
        }
    }

    #[test]
    fn translation_flow() {
        let map = build_map(FlowConfig::new(Domain::unit_disk(), spec("x"), 10, 0.05)).unwrap();
        for (s, p) in map.final_positions().iter().enumerate() {
            let x = map.seeds().point(s);
            assert!((p[0] - x[0] - 1.0).abs() < 1e-6 && (p[1] - x[1]).abs() < 1e-6);
        }
        let rep = jacobian_dets(&map);
        assert!(rep.dets.iter().all(|d| *d == 1.0));
        let bl = bilipschitz_check(&map, 1000, 3).unwrap();
        assert_eq!(bl.l_est, 0.0);
        assert!((bl.ratio_min - 1.0).abs() < 1e-9 && (bl.ratio_max - 1.0).abs() < 1e-9 && bl.within);

        let sq = build_map(FlowConfig::new(Domain::unit_square(), spec("x"), 10, 0.05)).unwrap();
        let back = sq.backward([1.5, 0.5]).unwrap();
        assert!((back[0] - 0.5).abs() < 1e-9 && (back[1] - 0.5).abs() < 1e-9);
        assert!(sq.inverse_membership([1.5, 0.5]));
        assert!(!sq.inverse_membership([0.5, 0.5 + 1.0]));
    }

    #[test]
    fn stagnation_flow_matches_closed_form() {
        let mut cfg = FlowConfig::new(Domain::unit_disk(), spec("(x^2-y^2)/2"), 100, 0.02);
        cfg.seed_spacing = 0.1;
        let map = build_map(cfg).unwrap();
        let e = std::f64::consts::E;
        for (s, p) in map.final_positions().iter().enumerate() {
            let x = map.seeds().point(s);
            assert!((p[0] - x[0] * e).abs() < 1e-4 && (p[1] - x[1] / e).abs() < 1e-4);
        }
        let rep = jacobian_dets(&map);
        assert!(rep.max_abs_dev < 1e-4, "{}", rep.max_abs_dev);
        assert!((map.lipschitz_estimate() - 1.0).abs() < 0.1);
        let bl = bilipschitz_check(&map, 2000, 5).unwrap();
        assert!(bl.within && bl.ratio_min >= (-1.0f64).exp() * 0.95 && bl.ratio_max <= e * 1.05);
    }

    #[test]
    fn generic_flow_round_trip_and_volume() {
        let h = 0.02;
        let mut cfg = FlowConfig::new(Domain::unit_disk(), spec("x^2*sin(y)*t"), 40, h);
        cfg.seed_spacing = 0.1;
        let map = Arc::new(build_map(cfg).unwrap());
        let rt = round_trip_error(&map, 1000, 9).unwrap();
        assert!(rt <= 10.0 * h, "{rt}");
        let rep = jacobian_dets(&map);
        assert!(rep.max_abs_dev < 0.05, "{}", rep.max_abs_dev);
        assert!(rep.fd_count > 0);
        let img = map.image();
        let a = volume_mc(&img, 100_000, 1).unwrap();
        let b = volume_mc(&Domain::unit_disk(), 100_000, 2).unwrap();
        assert!(a.agrees_with(&b, 3.0), "{a:?} {b:?}");
        for r in map.records() {
            assert!(r.flux.relative < 0.1);
        }
    }

    #[test]
    fn cell_cover_agrees_with_backward_integration() {
        for (text, steps) in [("(x^2-y^2)/2", 50), ("x^2*sin(y)*t", 40)] {
            let mut cfg = FlowConfig::new(Domain::unit_disk(), spec(text), steps, 0.02);
            cfg.seed_spacing = 0.2;
            let map = build_map(cfg).unwrap();
            let bb = map.image_bounding_box();
            let mut r = rng::stream(4, Purpose::Misc, 0);
            for _ in 0..20_000 {
                let y = [r.random_range(bb.lo[0]..bb.hi[0]), r.random_range(bb.lo[1]..bb.hi[1])];
                assert_eq!(map.inverse_membership(y), map.membership_by_backward(y), "{text} {y:?}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FlowConfig::new(Domain::unit_disk(), spec("x"), 0, 0.05);
        assert!(build_map(cfg.clone()).is_err());
        cfg.steps = 2;
        cfg.pad = 0.01;
        assert!(build_map(cfg.clone()).is_err());
        let cfg = FlowConfig::new(Domain::LShape, spec("x"), 2, 0.05);
        assert!(matches!(build_map(cfg), Err(Error::Input(_))));
    }

    #[test]
    fn blow_up_is_reported() {
        // a strong shear pushes the boundary past the pad in one step
        let cfg = FlowConfig::new(Domain::unit_disk(), spec("100*x*y"), 1, 0.05);
        match build_map(cfg) {
            Err(Error::BlowUp { step: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}

//! Embedded-boundary finite differences on a uniform Cartesian grid.
//!
//! Nodes are classified by domain membership. Unknowns live on `Inside`
//! nodes; `Boundary` nodes (outside nodes with an inside 4-neighbour) carry
//! the Dirichlet data. The 5-point system is solved with conjugate gradients
//! preconditioned by modified incomplete Cholesky, matrix-free.

use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Domain, P2};
use crate::potential::PotentialSpec;

pub const DEFAULT_NODE_BUDGET: usize = 4_000_000;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[repr(u8)]
pub enum NodeKind {
    Inside,
    Boundary,
    Outside,
}

/// Node `(i, j)` sits at `origin + h * (i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub origin: P2,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> P2 {
        [self.origin[0] + self.h * i as f64, self.origin[1] + self.h * j as f64]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Upper corner of the grid.
    pub fn far_corner(&self) -> P2 {
        self.node(self.nx - 1, self.ny - 1)
    }

    /// True if `p` lies in the closed grid rectangle.
    #[inline]
    pub fn covers(&self, p: P2) -> bool {
        let u = (p[0] - self.origin[0]) / self.h;
        let v = (p[1] - self.origin[1]) / self.h;
        u >= 0.0 && v >= 0.0 && u <= (self.nx - 1) as f64 && v <= (self.ny - 1) as f64
    }

    /// Cell index and bilinear weights of `p`, or `None` outside the grid.
    #[inline]
    pub fn locate(&self, p: P2) -> Option<(usize, f64, f64)> {
        let u = (p[0] - self.origin[0]) / self.h;
        let v = (p[1] - self.origin[1]) / self.h;
        if !(u >= 0.0 && v >= 0.0 && u <= (self.nx - 1) as f64 && v <= (self.ny - 1) as f64) {
            return None;
        }
        let i = (u as usize).min(self.nx - 2);
        let j = (v as usize).min(self.ny - 2);
        Some((self.index(i, j), u - i as f64, v - j as f64))
    }

    /// Like [`Grid::locate`] but projects finite points onto the grid box.
    pub fn locate_clamped(&self, p: P2) -> Option<(usize, f64, f64)> {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return None;
        }
        let q = self.far_corner();
        self.locate([p[0].clamp(self.origin[0], q[0]), p[1].clamp(self.origin[1], q[1])])
    }
}

/// Classified grid.
#[derive(Debug, Clone)]
pub struct MaskGrid {
    pub grid: Grid,
    pub kinds: Arc<Vec<NodeKind>>,
    inside: Arc<Vec<u32>>,
    /// Inside nodes next to the boundary, sorted by node index, with the
    /// fraction of the grid step at which the boundary is crossed toward
    /// `[west, east, south, north]` (1 where the neighbour is inside).
    cuts: Arc<Vec<(u32, [f64; 4])>>,
}

/// Grid offsets in `cuts` order: west, east, south, north.
pub const DIRECTIONS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Smallest boundary fraction used by the ghost-fluid rows.
pub const MIN_FRACTION: f64 = 1e-3;

impl MaskGrid {
    pub fn kind(&self, i: usize, j: usize) -> NodeKind {
        self.kinds[self.grid.index(i, j)]
    }

    pub fn inside_count(&self) -> usize {
        self.inside.len()
    }

    /// Linear indices of inside nodes in lexicographic order.
    pub fn inside_nodes(&self) -> &[u32] {
        &self.inside
    }

    /// Build from a membership predicate evaluated at node positions.
    /// Boundary fractions of an inside node, or `None` away from the boundary.
    pub fn cut(&self, k: usize) -> Option<[f64; 4]> {
        self.cuts.binary_search_by_key(&(k as u32), |c| c.0).ok().map(|i| self.cuts[i].1)
    }

    pub fn cuts(&self) -> &[(u32, [f64; 4])] {
        &self.cuts
    }

    /// Build from a membership predicate evaluated at node positions. The
    /// same predicate locates boundary crossings between nodes.
    pub fn from_predicate(grid: Grid, inside: impl Fn(P2) -> bool) -> Result<Self> {
        let mut kinds = vec![NodeKind::Outside; grid.len()];
        for j in 1..grid.ny.saturating_sub(1) {
            for i in 1..grid.nx.saturating_sub(1) {
                if inside(grid.node(i, j)) {
                    kinds[grid.index(i, j)] = NodeKind::Inside;
                }
            }
        }
        Self::finish(grid, kinds, &inside)
    }

    fn finish(grid: Grid, mut kinds: Vec<NodeKind>, member: &dyn Fn(P2) -> bool) -> Result<Self> {
        let (nx, ny) = (grid.nx, grid.ny);
        // grid-edge nodes are never unknowns
        for j in 0..ny {
            for i in 0..nx {
                if (i == 0 || j == 0 || i == nx - 1 || j == ny - 1) && kinds[grid.index(i, j)] == NodeKind::Inside {
                    kinds[grid.index(i, j)] = NodeKind::Outside;
                }
            }
        }
        let mut inside = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let k = grid.index(i, j);
                if kinds[k] == NodeKind::Inside {
                    inside.push(k as u32);
                    continue;
                }
                let near = (i > 0 && kinds[k - 1] == NodeKind::Inside)
                    || (i + 1 < nx && kinds[k + 1] == NodeKind::Inside)
                    || (j > 0 && kinds[k - nx] == NodeKind::Inside)
                    || (j + 1 < ny && kinds[k + nx] == NodeKind::Inside);
                if near {
                    kinds[k] = NodeKind::Boundary;
                }
            }
        }
        if inside.is_empty() {
            return Err(Error::input("rasterized domain has no inside nodes"));
        }
        let mut cuts = Vec::new();
        for &k in &inside {
            let k = k as usize;
            let (i, j) = (k % nx, k / nx);
            let mut theta = [1.0; 4];
            let mut any = false;
            for (d, (di, dj)) in DIRECTIONS.iter().enumerate() {
                let (ii, jj) = ((i as isize + di) as usize, (j as isize + dj) as usize);
                if kinds[grid.index(ii, jj)] != NodeKind::Inside {
                    any = true;
                    theta[d] = crossing(grid.node(i, j), grid.node(ii, jj), member).max(MIN_FRACTION);
                }
            }
            if any {
                cuts.push((k as u32, theta));
            }
        }
        Ok(MaskGrid { grid, kinds: Arc::new(kinds), inside: Arc::new(inside), cuts: Arc::new(cuts) })
    }
}

/// Fraction along `a -> b` where membership is lost (`a` inside). If `b` is
/// itself a member the boundary passes through it.
fn crossing(a: P2, b: P2, member: &dyn Fn(P2) -> bool) -> f64 {
    if member(b) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if member([a[0] + mid * (b[0] - a[0]), a[1] + mid * (b[1] - a[1])]) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Grid covering `bbox(domain)` inflated by `pad`. A node is inside when it
/// is a strict interior point of the domain; nodes exactly on the boundary
/// carry Dirichlet data.
pub fn rasterize(domain: &Domain, h: f64, pad: f64) -> Result<MaskGrid> {
    rasterize_with_budget(domain, h, pad, DEFAULT_NODE_BUDGET)
}

pub fn rasterize_with_budget(domain: &Domain, h: f64, pad: f64, budget: usize) -> Result<MaskGrid> {
    if domain.dim() != 2 {
        return Err(Error::Unsupported("grid solves are 2D only".into()));
    }
    if !(h > 0.0) || !(pad >= h) {
        return Err(Error::input(format!("rasterize needs h > 0 and pad >= h (h = {h}, pad = {pad})")));
    }
    let bb = domain.bounding_box().inflated(pad);
    let grid = grid_for(&bb.lo, &bb.hi, h, budget)?;
    match domain {
        Domain::Polyline(pl) => {
            let mut kinds = vec![NodeKind::Outside; grid.len()];
            let mut xs = Vec::new();
            for j in 1..grid.ny - 1 {
                let y = grid.node(0, j)[1];
                pl.row_crossings(y, &mut xs);
                for pair in xs.chunks_exact(2) {
                    let i0 = ((pair[0] - grid.origin[0]) / h).floor() as i64 + 1;
                    let i1 = ((pair[1] - grid.origin[0]) / h).ceil() as i64 - 1;
                    for i in i0.max(1)..=i1.min(grid.nx as i64 - 2) {
                        kinds[grid.index(i as usize, j)] = NodeKind::Inside;
                    }
                }
            }
            MaskGrid::finish(grid, kinds, &|p| pl.contains(p))
        }
        _ => {
            let eps = 1e-9 * h;
            MaskGrid::from_predicate(grid, |p| {
                domain.contains_unchecked(&p)
                    && domain.contains_unchecked(&[p[0] + eps, p[1]])
                    && domain.contains_unchecked(&[p[0] - eps, p[1]])
                    && domain.contains_unchecked(&[p[0], p[1] + eps])
                    && domain.contains_unchecked(&[p[0], p[1] - eps])
            })
        }
    }
}

/// Smallest grid with spacing `h` whose nodes span `[lo, hi]`.
pub fn grid_for(lo: &[f64], hi: &[f64], h: f64, budget: usize) -> Result<Grid> {
    let nx = ((hi[0] - lo[0]) / h - 1e-9).ceil() as usize + 1;
    let ny = ((hi[1] - lo[1]) / h - 1e-9).ceil() as usize + 1;
    if nx.saturating_mul(ny) > budget {
        return Err(Error::Resource(format!("grid of {nx} x {ny} nodes exceeds the budget of {budget}")));
    }
    if nx < 3 || ny < 3 {
        return Err(Error::input("grid needs at least 3 nodes per axis"));
    }
    Ok(Grid { origin: [lo[0], lo[1]], h, nx, ny })
}

/// Scalar field on a classified grid.
#[derive(Debug, Clone)]
pub struct GridField {
    pub mask: MaskGrid,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(mask: &MaskGrid) -> Self {
        GridField { mask: mask.clone(), values: vec![0.0; mask.grid.len()] }
    }

    pub fn from_fn(mask: &MaskGrid, mut f: impl FnMut(P2) -> f64) -> Self {
        let g = mask.grid;
        let mut values = Vec::with_capacity(g.len());
        for j in 0..g.ny {
            for i in 0..g.nx {
                values.push(f(g.node(i, j)));
            }
        }
        GridField { mask: mask.clone(), values }
    }

    pub fn grid(&self) -> Grid {
        self.mask.grid
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.mask.grid.index(i, j)]
    }

    /// Bilinear interpolation; `None` outside the grid.
    #[inline]
    pub fn sample(&self, p: P2) -> Option<f64> {
        let (k, fx, fy) = self.mask.grid.locate(p)?;
        Some(bilinear(&self.values, k, self.mask.grid.nx, fx, fy))
    }

    /// Node dump: `x,y,kind,value` per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y,kind,value")?;
        let g = self.mask.grid;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.node(i, j);
                let kind = match self.mask.kind(i, j) {
                    NodeKind::Inside => "inside",
                    NodeKind::Boundary => "boundary",
                    NodeKind::Outside => "outside",
                };
                writeln!(w, "{},{},{},{}", p[0], p[1], kind, self.at(i, j))?;
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn bilinear(values: &[f64], k: usize, nx: usize, fx: f64, fy: f64) -> f64 {
    let a = values[k];
    let b = values[k + 1];
    let c = values[k + nx];
    let d = values[k + nx + 1];
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

/// Velocity on a grid: two components sharing one classified grid.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub t: f64,
    pub vx: GridField,
    pub vy: GridField,
}

impl VelocityField {
    #[inline]
    pub fn sample(&self, p: P2) -> Option<[f64; 2]> {
        let g = self.vx.mask.grid;
        let (k, fx, fy) = g.locate(p)?;
        Some([bilinear(&self.vx.values, k, g.nx, fx, fy), bilinear(&self.vy.values, k, g.nx, fx, fy)])
    }

    /// Central-difference divergence at nodes whose 4 neighbours exist.
    pub fn divergence(&self) -> GridField {
        let g = self.vx.grid();
        let mut out = GridField::zeros(&self.vx.mask);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                let k = g.index(i, j);
                out.values[k] = (self.vx.values[k + 1] - self.vx.values[k - 1] + self.vy.values[k + g.nx]
                    - self.vy.values[k - g.nx])
                    / (2.0 * g.h);
            }
        }
        out
    }
}

/// Solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: BoundaryScheme,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, scheme: BoundaryScheme::Staircase }
    }
}

/// How the Dirichlet condition enters the 5-point rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum BoundaryScheme {
    /// Zero at the first node outside the domain (first order).
    #[default]
    Staircase,
    /// Zero at the located boundary crossing, through a linearly
    /// extrapolated ghost value (second order, still symmetric).
    GhostFluid,
}

/// Solve `∇²w = rhs` on inside nodes with `w = 0` on every other node.
///
/// Convergence is measured by the relative residual of the scaled system
/// `||b - A w||_2 / ||b||_2 <= tol`.
pub fn solve_poisson(mask: &MaskGrid, rhs: &GridField, opts: SolverOptions) -> Result<(GridField, SolveStats)> {
    solve_poisson_from(mask, rhs, None, opts)
}

/// As [`solve_poisson`], starting CG from `guess` (sampled at inside nodes).
pub fn solve_poisson_from(
    mask: &MaskGrid,
    rhs: &GridField,
    guess: Option<&GridField>,
    opts: SolverOptions,
) -> Result<(GridField, SolveStats)> {
    if !(opts.tol > 0.0) {
        return Err(Error::input("solver tolerance must be positive"));
    }
    let g = mask.grid;
    let inside = mask.inside_nodes();
    if rhs.values.len() != g.len() {
        return Err(Error::input("rhs grid does not match mask grid"));
    }
    // unknowns are numbered in lexicographic order; slot `m` is a zero sink
    // standing in for every non-inside neighbour
    let m = inside.len();
    let mut slot = vec![m as u32; g.len()];
    for (u, &k) in inside.iter().enumerate() {
        slot[k as usize] = u as u32;
    }
    let nbr: Vec<[u32; 4]> = inside
        .iter()
        .map(|&k| {
            let k = k as usize;
            [slot[k - 1], slot[k + 1], slot[k - g.nx], slot[k + g.nx]]
        })
        .collect();
    let h2 = g.h * g.h;
    let mut b = vec![0.0; m + 1];
    for (u, &k) in inside.iter().enumerate() {
        let v = rhs.values[k as usize];
        if !v.is_finite() {
            return Err(Error::Numeric("poisson right-hand side is not finite".into()));
        }
        b[u] = -h2 * v;
    }
    let to_field = |x: &[f64]| {
        let mut values = vec![0.0; g.len()];
        for (u, &k) in inside.iter().enumerate() {
            values[k as usize] = x[u];
        }
        GridField { mask: mask.clone(), values }
    };
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; m + 1];
    if bnorm == 0.0 {
        return Ok((to_field(&x), SolveStats { iterations: 0, residual: 0.0 }));
    }
    if let Some(gf) = guess {
        for (u, &k) in inside.iter().enumerate() {
            let p = g.node(k as usize % g.nx, k as usize / g.nx);
            x[u] = gf.sample(p).unwrap_or(0.0);
        }
    }
    let mut diag = vec![4.0; m];
    if opts.scheme == BoundaryScheme::GhostFluid {
        for (k, theta) in mask.cuts() {
            diag[slot[*k as usize] as usize] += theta.iter().map(|t| 1.0 / t - 1.0).sum::<f64>();
        }
    }
    let apply = |p: &[f64], out: &mut [f64]| {
        for u in 0..m {
            let n = &nbr[u];
            out[u] = diag[u] * p[u] - p[n[0] as usize] - p[n[1] as usize] - p[n[2] as usize] - p[n[3] as usize];
        }
    };

    // modified incomplete Cholesky, tau = 0.97
    let tau = 0.97;
    let sigma = 0.25;
    let is_in = |s: u32| (s as usize) < m;
    let mut precon = vec![0.0; m + 1];
    for u in 0..m {
        let [w, _, so, _] = nbr[u];
        let mut e: f64 = diag[u];
        if is_in(w) {
            let pw = precon[w as usize];
            e -= pw * pw;
            // coupling of the west node to its north neighbour
            if is_in(nbr[w as usize][3]) {
                e -= tau * pw * pw;
            }
        }
        if is_in(so) {
            let ps = precon[so as usize];
            e -= ps * ps;
            if is_in(nbr[so as usize][1]) {
                e -= tau * ps * ps;
            }
        }
        if e < sigma * diag[u] {
            e = diag[u];
        }
        precon[u] = 1.0 / e.sqrt();
    }
    let apply_precon = |r: &[f64], q: &mut [f64], z: &mut [f64]| {
        for u in 0..m {
            let n = &nbr[u];
            let (w, so) = (n[0] as usize, n[2] as usize);
            q[u] = (r[u] + precon[w] * q[w] + precon[so] * q[so]) * precon[u];
        }
        for u in (0..m).rev() {
            let n = &nbr[u];
            let (e, no) = (n[1] as usize, n[3] as usize);
            z[u] = (q[u] + precon[u] * (z[e] + z[no])) * precon[u];
        }
    };

    let mut r = vec![0.0; m + 1];
    let mut ap = vec![0.0; m + 1];
    apply(&x, &mut ap);
    for u in 0..m {
        r[u] = b[u] - ap[u];
    }
    let mut res = dot(&r, &r).sqrt() / bnorm;
    if res <= opts.tol {
        return Ok((to_field(&x), SolveStats { iterations: 0, residual: res }));
    }
    let mut q = vec![0.0; m + 1];
    let mut z = vec![0.0; m + 1];
    apply_precon(&r, &mut q, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=opts.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numeric("conjugate gradient breakdown: operator not positive definite".into()));
        }
        let alpha = rz / pap;
        for u in 0..m {
            x[u] += alpha * p[u];
            r[u] -= alpha * ap[u];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        if res <= opts.tol {
            return Ok((to_field(&x), SolveStats { iterations: it, residual: res }));
        }
        apply_precon(&r, &mut q, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for u in 0..m {
            p[u] = z[u] + beta * p[u];
        }
    }
    Err(Error::Convergence { iterations: opts.max_iter, residual: res })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discrete 5-point Laplacian at inside nodes (other nodes zero).
pub fn laplacian_5pt(f: &GridField) -> GridField {
    let g = f.grid();
    let mut out = GridField::zeros(&f.mask);
    let h2 = g.h * g.h;
    for &k in f.mask.inside_nodes() {
        let k = k as usize;
        let v = &f.values;
        out.values[k] = (v[k - 1] + v[k + 1] + v[k - g.nx] + v[k + g.nx] - 4.0 * v[k]) / h2;
    }
    out
}

/// Harmonic extension split into its parts: `h = c - w`.
#[derive(Debug, Clone)]
pub struct Extension {
    pub c: GridField,
    pub w: GridField,
    pub h: GridField,
    pub stats: SolveStats,
}

/// Solve the Dirichlet problem `∇²h = 0`, `h = c` on the boundary, by
/// solving `∇²w = ∇²c` with zero data and taking `h = c - w`.
pub fn harmonic_extension(mask: &MaskGrid, spec: &PotentialSpec, t: f64, opts: SolverOptions) -> Result<GridField> {
    Ok(harmonic_extension_parts(mask, spec, t, None, opts)?.h)
}

pub fn harmonic_extension_parts(
    mask: &MaskGrid,
    spec: &PotentialSpec,
    t: f64,
    guess: Option<&GridField>,
    opts: SolverOptions,
) -> Result<Extension> {
    let c = GridField::from_fn(mask, |p| spec.value(t, p));
    if c.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("potential is not finite on the grid".into()));
    }
    let mut rhs = GridField::zeros(mask);
    if !spec.is_harmonic_symbolically() {
        let g = mask.grid;
        for &k in mask.inside_nodes() {
            let k = k as usize;
            rhs.values[k] = spec.laplacian(t, g.node(k % g.nx, k / g.nx))?;
        }
    }
    let (w, stats) = solve_poisson_from(mask, &rhs, guess, opts)?;
    let h = GridField { mask: mask.clone(), values: c.values.iter().zip(&w.values).map(|(a, b)| a - b).collect() };
    Ok(Extension { c, w, h, stats })
}

/// Gradient with the embedded-boundary stencil: central differences at
/// inside nodes; at the boundary ring and beyond, differences never reach
/// across the boundary (one-sided toward the ring's side, second order when
/// two nodes are available).
pub fn grad_field(f: &GridField) -> VelocityField {
    let g = f.grid();
    let kinds = &f.mask.kinds;
    let side = |k: usize| kinds[k] != NodeKind::Outside;
    let mut vx = GridField::zeros(&f.mask);
    let mut vy = GridField::zeros(&f.mask);
    let v = &f.values;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            let s = side(k);
            let same = |kk: usize| side(kk) == s;
            vx.values[k] = axis_diff(v, k, 1, i, g.nx, g.h, &same);
            vy.values[k] = axis_diff(v, k, g.nx, j, g.ny, g.h, &same);
        }
    }
    VelocityField { t: 0.0, vx, vy }
}

fn axis_diff(v: &[f64], k: usize, stride: usize, pos: usize, len: usize, h: f64, ok: &dyn Fn(usize) -> bool) -> f64 {
    let has_lo = pos >= 1 && ok(k - stride);
    let has_hi = pos + 1 < len && ok(k + stride);
    match (has_lo, has_hi) {
        (true, true) => (v[k + stride] - v[k - stride]) / (2.0 * h),
        (false, true) => {
            if pos + 2 < len && ok(k + 2 * stride) {
                (-3.0 * v[k] + 4.0 * v[k + stride] - v[k + 2 * stride]) / (2.0 * h)
            } else {
                (v[k + stride] - v[k]) / h
            }
        }
        (true, false) => {
            if pos >= 2 && ok(k - 2 * stride) {
                (3.0 * v[k] - 4.0 * v[k - stride] + v[k - 2 * stride]) / (2.0 * h)
            } else {
                (v[k] - v[k - stride]) / h
            }
        }
        (false, false) => 0.0,
    }
}

/// Plain central-difference gradient (one-sided only at the grid edge).
pub fn central_gradient(f: &GridField) -> (Vec<f64>, Vec<f64>) {
    let g = f.grid();
    let all = |_: usize| true;
    let mut gx = vec![0.0; g.len()];
    let mut gy = vec![0.0; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            gx[k] = axis_diff(&f.values, k, 1, i, g.nx, g.h, &all);
            gy[k] = axis_diff(&f.values, k, g.nx, j, g.ny, g.h, &all);
        }
    }
    (gx, gy)
}

/// Values at the non-inside neighbours of inside nodes, extrapolated from
/// the inside through the zero crossing located on each grid line (the
/// continuation a ghost-fluid solution implies). Returns the field with
/// those nodes filled; nodes reached from several sides get the mean.
pub fn fill_from_crossings(w: &GridField) -> GridField {
    let mask = &w.mask;
    let g = mask.grid;
    let mut sum = vec![0.0; g.len()];
    let mut cnt = vec![0u8; g.len()];
    for (k, theta) in mask.cuts() {
        let k = *k as usize;
        let (i, j) = ((k % g.nx) as isize, (k / g.nx) as isize);
        for (d, (di, dj)) in DIRECTIONS.iter().enumerate() {
            let th = theta[d];
            let out = g.index((i + di) as usize, (j + dj) as usize);
            if mask.kinds[out] == NodeKind::Inside {
                continue;
            }
            // nodes behind k along the same line, at offsets -1 and -2
            let back = |m: isize| -> Option<f64> {
                let (ii, jj) = (i - di * m, j - dj * m);
                if ii < 0 || jj < 0 || ii >= g.nx as isize || jj >= g.ny as isize {
                    return None;
                }
                let kk = g.index(ii as usize, jj as usize);
                (mask.kinds[kk] == NodeKind::Inside).then(|| w.values[kk])
            };
            let mut pts: Vec<(f64, f64)> = vec![(th, 0.0)];
            if th >= 0.25 {
                pts.push((0.0, w.values[k]));
                if let Some(a) = back(1) {
                    pts.push((-1.0, a));
                }
            } else {
                match (back(1), back(2)) {
                    (Some(a), Some(b)) => {
                        pts.push((-1.0, a));
                        pts.push((-2.0, b));
                    }
                    (Some(a), None) => {
                        pts.push((0.0, w.values[k]));
                        pts.push((-1.0, a));
                    }
                    _ => pts.push((0.0, w.values[k])),
                }
            }
            sum[out] += lagrange(&pts, 1.0);
            cnt[out] += 1;
        }
    }
    let mut out = w.clone();
    for k in 0..g.len() {
        if cnt[k] > 0 {
            out.values[k] = sum[k] / cnt[k] as f64;
        }
    }
    out
}

fn lagrange(pts: &[(f64, f64)], x: f64) -> f64 {
    let mut total = 0.0;
    for (i, (xi, yi)) in pts.iter().enumerate() {
        let mut l = 1.0;
        for (j, (xj, _)) in pts.iter().enumerate() {
            if i != j {
                l *= (x - xj) / (xi - xj);
            }
        }
        total += yi * l;
    }
    total
}

/// Continue the solution of `∇²w = m`, `w = 0` on the boundary, to the
/// `layers` rings of nodes around the inside. Each node gets the value of a
/// local quadratic fitted by weighted least squares to nearby inside
/// values and to the zero crossings on grid lines, with the quadratic's
/// Laplacian pinned to `m` at that node. With `ghost = false` the
/// boundary ring itself is the zero set and is left in place.
pub fn extend_by_fit(w: &GridField, m: &dyn Fn(P2) -> f64, layers: usize, ghost: bool) -> GridField {
    let mask = &w.mask;
    let g = mask.grid;
    let h = g.h;
    let mut out = w.clone();
    // zero-crossing points, bucketed by the inside node they belong to
    let mut zero_at: std::collections::HashMap<usize, Vec<P2>> = std::collections::HashMap::new();
    if ghost {
        for (k, theta) in mask.cuts() {
            let k = *k as usize;
            let p = g.node(k % g.nx, k / g.nx);
            for (d, (di, dj)) in DIRECTIONS.iter().enumerate() {
                if theta[d] < 1.0 || mask.kinds[(k as isize + di + dj * g.nx as isize) as usize] != NodeKind::Inside {
                    let q = [p[0] + *di as f64 * theta[d] * h, p[1] + *dj as f64 * theta[d] * h];
                    zero_at.entry(k).or_default().push(q);
                }
            }
        }
    }
    // breadth-first rings around the inside region
    let mut dist = vec![usize::MAX; g.len()];
    let mut frontier: Vec<usize> = mask.inside_nodes().iter().map(|&k| k as usize).collect();
    for &k in &frontier {
        dist[k] = 0;
    }
    let mut rings: Vec<Vec<usize>> = Vec::new();
    for l in 1..=layers {
        let mut next = Vec::new();
        for &k in &frontier {
            let (i, j) = (k % g.nx, k / g.nx);
            for (di, dj) in DIRECTIONS {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                if ii < 0 || jj < 0 || ii >= g.nx as isize || jj >= g.ny as isize {
                    continue;
                }
                let q = g.index(ii as usize, jj as usize);
                if dist[q] == usize::MAX {
                    dist[q] = l;
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        rings.push(next.clone());
        frontier = next;
    }
    for (l, ring) in rings.iter().enumerate() {
        let l = l + 1;
        if !ghost && l == 1 {
            continue;
        }
        let radius = (l as f64 + 1.5) * h;
        let reach = (radius / h).ceil() as isize;
        for &k in ring {
            let (i, j) = ((k % g.nx) as isize, (k / g.nx) as isize);
            let c = g.node(i as usize, j as usize);
            let mut ata = [[0.0f64; 6]; 6];
            let mut atb = [0.0f64; 6];
            let mut add_row = |p: P2, val: f64, wt: f64| {
                let (x, y) = ((p[0] - c[0]) / h, (p[1] - c[1]) / h);
                let row = [1.0, x, y, x * x, x * y, y * y];
                for a in 0..6 {
                    for b in 0..6 {
                        ata[a][b] += wt * row[a] * row[b];
                    }
                    atb[a] += wt * row[a] * val;
                }
            };
            let mut count = 0;
            for dj in -reach..=reach {
                for di in -reach..=reach {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= g.nx as isize || jj >= g.ny as isize {
                        continue;
                    }
                    let q = g.index(ii as usize, jj as usize);
                    let p = g.node(ii as usize, jj as usize);
                    let r = ((p[0] - c[0]).hypot(p[1] - c[1])) / h;
                    if r > radius / h {
                        continue;
                    }
                    let wt = 1.0 / (1.0 + r * r);
                    let known = dist[q] == 0 || (!ghost && dist[q] == 1);
                    if known {
                        add_row(p, w.values[q], wt);
                        count += 1;
                    }
                    if let Some(zs) = zero_at.get(&q) {
                        for z in zs {
                            let rz = ((z[0] - c[0]).hypot(z[1] - c[1])) / h;
                            add_row(*z, 0.0, 1.0 / (1.0 + rz * rz));
                        }
                    }
                }
            }
            if count < 3 {
                continue;
            }
            // pin the Laplacian: 2 a_xx + 2 a_yy = m h²
            let lap_row = [0.0, 0.0, 0.0, 2.0, 0.0, 2.0];
            let wt = 100.0;
            let target = m(c) * h * h;
            for a in 0..6 {
                for b in 0..6 {
                    ata[a][b] += wt * lap_row[a] * lap_row[b];
                }
                atb[a] += wt * lap_row[a] * target;
            }
            // small ridge keeps under-determined fits bounded
            for a in 0..6 {
                ata[a][a] += 1e-10;
            }
            if let Some(coef) = solve6(ata, atb) {
                out.values[k] = coef[0];
            }
        }
    }
    out
}

/// Gaussian elimination with partial pivoting.
fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let piv = (col..6).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..6 {
            let f = a[r][col] / a[col][col];
            for c in col..6 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for r in (0..6).rev() {
        let mut s = b[r];
        for c in r + 1..6 {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Continue a field that is valid on inside and boundary nodes outward by
/// `layers` rings of polynomial extrapolation along the grid axes
/// (quadratic when three known nodes line up, else linear, else constant).
pub fn extrapolate_outward(f: &GridField, layers: usize) -> GridField {
    let g = f.grid();
    let mut known: Vec<bool> = f.mask.kinds.iter().map(|k| *k != NodeKind::Outside).collect();
    let mut out = f.clone();
    for _ in 0..layers {
        let mut updates = Vec::new();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.index(i, j);
                if known[k] {
                    continue;
                }
                let mut acc = 0.0;
                let mut cnt = 0.0;
                let mut best_order = 0;
                let dirs: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
                let mut cands: Vec<(usize, f64)> = Vec::new();
                for (di, dj) in dirs {
                    let at = |m: isize| -> Option<usize> {
                        let ii = i as isize + di * m;
                        let jj = j as isize + dj * m;
                        if ii < 0 || jj < 0 || ii >= g.nx as isize || jj >= g.ny as isize {
                            return None;
                        }
                        let kk = g.index(ii as usize, jj as usize);
                        known[kk].then_some(kk)
                    };
                    match (at(1), at(2), at(3)) {
                        (Some(a), Some(b), Some(c)) => {
                            cands.push((3, 3.0 * out.values[a] - 3.0 * out.values[b] + out.values[c]))
                        }
                        (Some(a), Some(b), None) => cands.push((2, 2.0 * out.values[a] - out.values[b])),
                        (Some(a), None, _) => cands.push((1, out.values[a])),
                        _ => {}
                    }
                }
                for &(order, _) in &cands {
                    best_order = best_order.max(order);
                }
                for &(order, val) in &cands {
                    if order == best_order {
                        acc += val;
                        cnt += 1.0;
                    }
                }
                if cnt > 0.0 {
                    updates.push((k, acc / cnt));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (k, val) in updates {
            out.values[k] = val;
            known[k] = true;
        }
    }
    out
}

//! Closed, simple 2D boundary polylines.
//!
//! Vertices are stored without the repeated closing vertex and are kept in
//! counter-clockwise order. Point queries go through a horizontal slab index
//! so membership costs O(edges per slab) instead of O(edges).

use crate::error::{Error, Result};

pub type P2 = [f64; 2];

#[derive(Debug, Clone)]
struct SlabIndex {
    y0: f64,
    inv_dy: f64,
    slabs: Vec<Vec<u32>>,
}

impl SlabIndex {
    fn build(pts: &[P2]) -> Self {
        let n = pts.len();
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let nslab = (n / 4).clamp(1, 4096);
        let span = (y1 - y0).max(f64::MIN_POSITIVE);
        let inv_dy = nslab as f64 / span;
        let mut slabs = vec![Vec::new(); nslab];
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            let lo = ((a[1].min(b[1]) - y0) * inv_dy).floor().max(0.0) as usize;
            let hi = (((a[1].max(b[1]) - y0) * inv_dy).floor() as usize).min(nslab - 1);
            for slab in &mut slabs[lo.min(nslab - 1)..=hi] {
                slab.push(i as u32);
            }
        }
        SlabIndex { y0, inv_dy, slabs }
    }

    fn edges_at(&self, y: f64) -> &[u32] {
        let s = (y - self.y0) * self.inv_dy;
        if !(s >= 0.0) || s as usize >= self.slabs.len() + 1 {
            return &[];
        }
        let k = (s as usize).min(self.slabs.len() - 1);
        &self.slabs[k]
    }
}

/// A closed simple polygon given by its boundary vertices.
#[derive(Debug, Clone)]
pub struct Polyline {
    pts: Vec<P2>,
    index: SlabIndex,
}

fn signed_area(pts: &[P2]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: P2, q: P2, r: P2) -> bool {
    q[0] <= p[0].max(r[0]) && q[0] >= p[0].min(r[0]) && q[1] <= p[1].max(r[1]) && q[1] >= p[1].min(r[1])
}

/// Closed-segment intersection test.
pub fn segments_intersect(p1: P2, p2: P2, q1: P2, q2: P2) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, p1, q2))
        || (d2 == 0.0 && on_segment(q1, p2, q2))
        || (d3 == 0.0 && on_segment(p1, q1, p2))
        || (d4 == 0.0 && on_segment(p1, q2, p2))
}

impl Polyline {
    /// Build from an ordered vertex loop. A repeated closing vertex is
    /// accepted and dropped. Clockwise input is reversed.
    pub fn new(mut pts: Vec<P2>) -> Result<Self> {
        if pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::input("polyline vertex is not finite"));
        }
        if pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        if pts.len() < 3 {
            return Err(Error::input("polyline needs at least 3 distinct vertices"));
        }
        let area = signed_area(&pts);
        if !(area.abs() > 0.0) {
            return Err(Error::input("polyline encloses zero area"));
        }
        if area < 0.0 {
            pts.reverse();
        }
        let pl = Self::from_ccw_unchecked(pts);
        if pl.self_intersects() {
            return Err(Error::input("polyline self-intersects"));
        }
        Ok(pl)
    }

    /// Skips the simplicity check; used on hot paths where the caller checks
    /// topology separately.
    pub(crate) fn from_ccw_unchecked(pts: Vec<P2>) -> Self {
        let index = SlabIndex::build(&pts);
        Polyline { pts, index }
    }

    /// Parse two numeric columns (x, y). A non-numeric first line is treated
    /// as a header.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::input(format!("polyline csv line {}: expected 2 columns", lineno + 1)));
            }
            match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
                (Ok(x), Ok(y)) => pts.push([x, y]),
                _ if pts.is_empty() && lineno == 0 => continue,
                _ => return Err(Error::input(format!("polyline csv line {}: not a number", lineno + 1))),
            }
        }
        Self::new(pts)
    }

    pub fn vertices(&self) -> &[P2] {
        &self.pts
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Vertex loop with the closing vertex repeated.
    pub fn closed_vertices(&self) -> Vec<P2> {
        let mut v = self.pts.clone();
        v.push(self.pts[0]);
        v
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts)
    }

    pub fn perimeter(&self) -> f64 {
        self.segments().map(|(a, b)| dist(a, b)).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = (P2, P2)> + '_ {
        let n = self.pts.len();
        (0..n).map(move |i| (self.pts[i], self.pts[(i + 1) % n]))
    }

    pub fn bounds(&self) -> (P2, P2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Winding number of the loop around `p`.
    pub fn winding_number(&self, p: P2) -> i32 {
        let n = self.pts.len();
        let mut wn = 0;
        for &i in self.index.edges_at(p[1]) {
            let a = self.pts[i as usize];
            let b = self.pts[(i as usize + 1) % n];
            if a[1] <= p[1] {
                if b[1] > p[1] && cross(a, b, p) > 0.0 {
                    wn += 1;
                }
            } else if b[1] <= p[1] && cross(a, b, p) < 0.0 {
                wn -= 1;
            }
        }
        wn
    }

    pub fn contains(&self, p: P2) -> bool {
        self.winding_number(p) != 0
    }

    /// Sorted x-coordinates where the horizontal line at `y` crosses the
    /// boundary, using the same half-open rule as `winding_number`.
    pub fn row_crossings(&self, y: f64, out: &mut Vec<f64>) {
        out.clear();
        let n = self.pts.len();
        for &i in self.index.edges_at(y) {
            let a = self.pts[i as usize];
            let b = self.pts[(i as usize + 1) % n];
            if (a[1] <= y) != (b[1] <= y) {
                let s = (y - a[1]) / (b[1] - a[1]);
                out.push(a[0] + s * (b[0] - a[0]));
            }
        }
        out.sort_by(f64::total_cmp);
    }

    /// True if any two non-adjacent edges touch.
    pub fn self_intersects(&self) -> bool {
        let n = self.pts.len();
        if n < 4 {
            return false;
        }
        let (lo, hi) = self.bounds();
        let max_len = self.segments().map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        let cell = max_len.max(1e-12);
        let nx = (((hi[0] - lo[0]) / cell) as usize + 1).min(4096);
        let ny = (((hi[1] - lo[1]) / cell) as usize + 1).min(4096);
        let cx = (hi[0] - lo[0]).max(1e-300) / nx as f64;
        let cy = (hi[1] - lo[1]).max(1e-300) / ny as f64;
        let cell_of = |v: f64, o: f64, c: f64, m: usize| (((v - o) / c) as usize).min(m - 1);
        let mut buckets: std::collections::HashMap<(usize, usize), Vec<usize>> = std::collections::HashMap::new();
        for i in 0..n {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % n];
            let (i0, i1) = (cell_of(a[0].min(b[0]), lo[0], cx, nx), cell_of(a[0].max(b[0]), lo[0], cx, nx));
            let (j0, j1) = (cell_of(a[1].min(b[1]), lo[1], cy, ny), cell_of(a[1].max(b[1]), lo[1], cy, ny));
            for ii in i0..=i1 {
                for jj in j0..=j1 {
                    buckets.entry((ii, jj)).or_default().push(i);
                }
            }
        }
        let mut keys: Vec<_> = buckets.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let list = &buckets[&key];
            for (u, &i) in list.iter().enumerate() {
                for &j in &list[u + 1..] {
                    let adjacent = j == i + 1 || i == j + 1 || (i == 0 && j == n - 1) || (j == 0 && i == n - 1);
                    if adjacent {
                        continue;
                    }
                    if segments_intersect(self.pts[i], self.pts[(i + 1) % n], self.pts[j], self.pts[(j + 1) % n]) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Split edges longer than `max_len` and merge vertices closer than
    /// `min_len`, so that every edge ends up in `[min_len, max_len]` when
    /// `max_len >= 2 * min_len`.
    pub fn resampled(&self, min_len: f64, max_len: f64) -> Polyline {
        debug_assert!(max_len >= 2.0 * min_len);
        // merge short edges first, then split long ones: split pieces are
        // longer than max_len / 2 >= min_len, so the two passes do not fight
        let mut merged: Vec<P2> = Vec::with_capacity(self.pts.len());
        for &p in &self.pts {
            match merged.last() {
                Some(&q) if dist(p, q) < min_len => {}
                _ => merged.push(p),
            }
        }
        while merged.len() > 3 && dist(merged[merged.len() - 1], merged[0]) < min_len {
            merged.pop();
        }
        let n = merged.len();
        let mut pts: Vec<P2> = Vec::with_capacity(n);
        for i in 0..n {
            let a = merged[i];
            let b = merged[(i + 1) % n];
            let pieces = (dist(a, b) / max_len).ceil().max(1.0) as usize;
            for k in 0..pieces {
                let s = k as f64 / pieces as f64;
                pts.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
            }
        }
        Polyline::from_ccw_unchecked(pts)
    }

    /// `n` vertices at equal arc-length steps, starting at vertex 0.
    pub fn uniform_by_arclength(&self, n: usize) -> Vec<P2> {
        let closed = self.closed_vertices();
        let total = self.perimeter();
        let step = total / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        let mut seg_start = 0.0;
        let mut seg_len = dist(closed[0], closed[1]);
        for i in 0..n {
            let target = i as f64 * step;
            while seg + 1 < closed.len() - 1 && seg_start + seg_len < target {
                seg_start += seg_len;
                seg += 1;
                seg_len = dist(closed[seg], closed[seg + 1]);
            }
            let s = if seg_len > 0.0 { ((target - seg_start) / seg_len).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (closed[seg], closed[seg + 1]);
            out.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
        }
        out
    }

    /// Low-pass filter of the curve: resample to equal arc-length steps of
    /// about `spacing`, then damp Fourier modes of wavelength below `cutoff`
    /// by `exp(-(k/k_c)^8)`. Long waves pass essentially unchanged, so the
    /// enclosed area is kept.
    pub fn low_passed(&self, cutoff: f64, spacing: f64) -> Result<Polyline> {
        use rustfft::{num_complex::Complex, FftPlanner};
        let perimeter = self.perimeter();
        let n = ((perimeter / spacing).ceil() as usize).max(8);
        let pts = self.uniform_by_arclength(n);
        let mut buf: Vec<Complex<f64>> = pts.iter().map(|p| Complex::new(p[0], p[1])).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        let kc = std::f64::consts::TAU / cutoff;
        for (m, c) in buf.iter_mut().enumerate() {
            let freq = if m <= n / 2 { m as f64 } else { (n - m) as f64 };
            let k = std::f64::consts::TAU * freq / perimeter;
            *c *= (-(k / kc).powi(8)).exp() / n as f64;
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        Polyline::new(buf.iter().map(|c| [c.re, c.im]).collect())
    }

    /// Replace each vertex by `f(vertex)`; orientation is preserved for
    /// orientation-preserving `f`.
    pub fn map_vertices(&self, mut f: impl FnMut(P2) -> P2) -> Polyline {
        Polyline::from_ccw_unchecked(self.pts.iter().map(|&p| f(p)).collect())
    }
}

pub fn dist(a: P2, b: P2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Regular `n`-gon inscribed in the circle.
pub fn circle(center: P2, radius: f64, n: usize) -> Polyline {
    let pts = (0..n)
        .map(|k| {
            let th = std::f64::consts::TAU * k as f64 / n as f64;
            [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
        })
        .collect();
    Polyline::from_ccw_unchecked(pts)
}

/// Subdivide each edge of a CCW loop into pieces no longer than `spacing`.
pub fn subdivided(corners: &[P2], spacing: f64) -> Polyline {
    let n = corners.len();
    let mut pts = Vec::new();
    for i in 0..n {
        let a = corners[i];
        let b = corners[(i + 1) % n];
        let pieces = (dist(a, b) / spacing).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let s = k as f64 / pieces as f64;
            pts.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
        }
    }
    Polyline::from_ccw_unchecked(pts)
}

#[cfg(test)]
mod low_pass_tests {
    use super::*;

    #[test]
    fn low_pass_removes_short_waves() {
        let n = 600;
        let wavy = Polyline::new(
            (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    let r = 1.0 + 0.01 * (60.0 * a).sin() + 0.05 * (3.0 * a).cos();
                    [r * a.cos(), r * a.sin()]
                })
                .collect(),
        )
        .unwrap();
        let f = wavy.low_passed(0.3, 0.01).unwrap();
        // the 3-lobe wave (length ~2.1) survives, the 60-wave (~0.1) does not
        let mut worst = 0.0f64;
        for p in f.vertices() {
            let a = p[1].atan2(p[0]);
            let r = p[0].hypot(p[1]);
            worst = worst.max((r - (1.0 + 0.05 * (3.0 * a).cos())).abs());
        }
        assert!(worst < 2e-3, "{worst}");
        assert!((f.area() - wavy.area()).abs() < 2e-3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Polyline {
        Polyline::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap()
    }

    #[test]
    fn winding_inside_outside() {
        let sq = square();
        assert_eq!(sq.winding_number([0.5, 0.5]), 1);
        assert_eq!(sq.winding_number([1.5, 0.5]), 0);
        assert_eq!(sq.winding_number([0.5, -0.1]), 0);
        assert!((sq.area() - 1.0).abs() < 1e-15);
        assert!((sq.perimeter() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn clockwise_input_is_reoriented() {
        let cw = Polyline::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(cw.area() > 0.0);
        assert!(cw.contains([0.3, 0.3]));
    }

    #[test]
    fn rejects_bowtie_and_degenerate() {
        assert!(Polyline::new(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn crossings_pair_up() {
        let c = circle([0.0, 0.0], 1.0, 200);
        let mut xs = Vec::new();
        c.row_crossings(0.3, &mut xs);
        assert_eq!(xs.len(), 2);
        assert!((xs[1] - (1.0f64 - 0.09).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn resample_keeps_spacing() {
        let c = subdivided(&[[0.0, 0.0], [3.0, 0.0], [3.0, 1.0], [0.0, 1.0]], 0.7);
        let r = c.resampled(0.05, 0.1);
        for (a, b) in r.segments() {
            let d = dist(a, b);
            assert!(d >= 0.05 - 1e-12 && d <= 0.1 + 1e-12, "{d}");
        }
        assert!((r.area() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_loop() {
        let pl = Polyline::from_csv_str("x,y\n0,0\n2,0\n2,1\n0,1\n0,0\n").unwrap();
        assert_eq!(pl.len(), 4);
        assert!((pl.area() - 2.0).abs() < 1e-15);
        assert!(Polyline::from_csv_str("0,0\n1,zz\n").is_err());
    }
}

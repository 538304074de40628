//! Grid-based Hamilton-Jacobi forward reachable tubes for the extended Dubins
//! car with box-bounded controls.
//!
//! The set of states is the zero sublevel set of a value function `V` sampled
//! on a 4D grid over `(x, y, v, θ)`. Forward growth solves
//!
//! ```text
//! V_t + ∇V·f₀(z) + max_{u ∈ box} (V_v·u1 + V_θ·u2) = 0,   V ← min(V, V_prev)
//! ```
//!
//! with explicit Euler in time and a monotone first-order flux in space. The
//! per-substep `min` freezes previously reached states, so the result is a
//! tube: the sets projected after successive steps are nested.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::conformal::ControlInterval;
use crate::dynamics::{integrate, wrap_unchecked, AgentState, Control};
use crate::error::{Error, Result};

pub const DEFAULT_CFL: f64 = 0.8;
pub const DEFAULT_INITIAL_RADIUS: f64 = 2.0;
pub const DEFAULT_MAX_SHIFT: f64 = 1.5;
pub const DEFAULT_CONTROL_SAMPLES: usize = 3;
pub const DEFAULT_DILATION: f64 = 0.25;

/// One grid dimension. Periodic axes cover `[min, min + n·Δ)`; the others
/// have nodes at both ends. An angular axis reads its argument modulo 2π,
/// taking the representative closest to the window centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    #[serde(default)]
    pub periodic: bool,
    #[serde(default)]
    pub angular: bool,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid(
                "grid",
                format!("need at least 3 nodes per axis, got {n}"),
            ));
        }
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::invalid("grid", format!("bad axis bounds [{min}, {max}]")));
        }
        Ok(Self {
            min,
            max,
            n,
            periodic: false,
            angular: false,
        })
    }

    /// Heading axis over `(−π, π]`, node 0 at `−π ≡ π`.
    pub fn heading(n: usize) -> Result<Self> {
        let mut a = Self::new(-PI, PI, n)?;
        a.periodic = true;
        a.angular = true;
        Ok(a)
    }

    /// Bounded heading window `[min, max]`, at most one turn wide.
    pub fn heading_window(min: f64, max: f64, n: usize) -> Result<Self> {
        let mut a = Self::new(min, max, n)?;
        if max - min >= 2.0 * PI {
            return Err(Error::invalid("grid", "heading window wider than a full turn"));
        }
        a.angular = true;
        Ok(a)
    }

    fn unwrap(&self, x: f64) -> f64 {
        if self.angular && !self.periodic {
            let c = 0.5 * (self.min + self.max);
            c + wrap_unchecked(x - c)
        } else {
            x
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.max - self.min) / self.n as f64
        } else {
            (self.max - self.min) / (self.n - 1) as f64
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }

    /// Continuous index coordinate of `x`.
    fn coord(&self, x: f64) -> f64 {
        if self.periodic {
            (x - self.min).rem_euclid(self.max - self.min) / self.spacing()
        } else {
            (self.unwrap(x) - self.min) / self.spacing()
        }
    }

    /// Nearest node, or `None` when `x` lies more than half a cell outside.
    pub fn nearest(&self, x: f64) -> Option<usize> {
        if !x.is_finite() {
            return None;
        }
        let c = self.coord(x).round();
        if self.periodic {
            return Some(c as usize % self.n);
        }
        if c < 0.0 || c > (self.n - 1) as f64 {
            None
        } else {
            Some(c as usize)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let x = self.unwrap(x);
        self.periodic || (x >= self.min && x <= self.max)
    }

    /// Lower node index and fractional offset for multilinear interpolation.
    fn locate(&self, x: f64) -> (usize, usize, f64) {
        let c = self.coord(x);
        if self.periodic {
            let i = (c.floor() as usize) % self.n;
            return (i, (i + 1) % self.n, c - c.floor());
        }
        let c = c.clamp(0.0, (self.n - 1) as f64);
        let i = (c.floor() as usize).min(self.n - 2);
        (i, i + 1, c - i as f64)
    }
}

/// Grid over `(x, y, v, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid4 {
    pub axes: [Axis; 4],
}

impl Grid4 {
    pub fn new(x: Axis, y: Axis, v: Axis, theta: Axis) -> Result<Self> {
        if x.periodic || y.periodic || v.periodic || x.angular || y.angular || v.angular {
            return Err(Error::invalid(
                "grid",
                "only the heading axis may be periodic or angular",
            ));
        }
        if !theta.angular {
            return Err(Error::invalid("grid", "the heading axis must be angular"));
        }
        Ok(Self { axes: [x, y, v, theta] })
    }

    /// 41×41×11×25 nodes over a 40 m square around `center`, speeds in
    /// `[−2, 20]` m/s and the full heading circle.
    pub fn desk_default(center: [f64; 2]) -> Self {
        GridSpec {
            fit_heading: false,
            ..Default::default()
        }
        .build(center, (-2.0, 20.0), None)
        .expect("default grid is valid")
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 4] {
        [
            self.axes[0].spacing(),
            self.axes[1].spacing(),
            self.axes[2].spacing(),
            self.axes[3].spacing(),
        ]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iv: usize, it: usize) -> usize {
        ((ix * self.axes[1].n + iy) * self.axes[2].n + iv) * self.axes[3].n + it
    }

    pub fn node(&self, ix: usize, iy: usize, iv: usize, it: usize) -> AgentState {
        AgentState {
            x: self.axes[0].value(ix),
            y: self.axes[1].value(iy),
            v: self.axes[2].value(iv),
            theta: wrap_unchecked(self.axes[3].value(it)),
        }
    }

    /// Node multi-index of a flat index.
    pub fn unflatten(&self, mut i: usize) -> [usize; 4] {
        let it = i % self.axes[3].n;
        i /= self.axes[3].n;
        let iv = i % self.axes[2].n;
        i /= self.axes[2].n;
        let iy = i % self.axes[1].n;
        [i / self.axes[1].n, iy, iv, it]
    }

    pub fn contains(&self, s: &AgentState) -> bool {
        self.axes[0].contains(s.x) && self.axes[1].contains(s.y) && self.axes[2].contains(s.v)
    }

    pub fn xy_cell_diagonal(&self) -> f64 {
        self.axes[0].spacing().hypot(self.axes[1].spacing())
    }
}

/// Node counts and window sizes; windows are placed per agent with
/// [`GridSpec::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nv: usize,
    pub ntheta: usize,
    pub width_x: f64,
    pub width_y: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Fit the speed window to the reachable speeds instead of `[v_min, v_max]`.
    pub fit_speed: bool,
    /// Extra speed slack on each side of a fitted window, m/s.
    pub speed_margin: f64,
    /// Fit a bounded heading window instead of the full circle.
    #[serde(default)]
    pub fit_heading: bool,
    /// Extra heading slack on each side of a fitted window, rad.
    #[serde(default)]
    pub heading_margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 41,
            ny: 41,
            nv: 11,
            ntheta: 25,
            width_x: 40.0,
            width_y: 40.0,
            v_min: -2.0,
            v_max: 20.0,
            fit_speed: true,
            speed_margin: 1.0,
            fit_heading: true,
            heading_margin: 0.05,
        }
    }
}

impl GridSpec {
    /// Grid with the given planar centre, speed window and heading window
    /// (`None` for the full circle).
    pub fn build(&self, center: [f64; 2], v_range: (f64, f64), heading: Option<(f64, f64)>) -> Result<Grid4> {
        Grid4::new(
            Axis::new(center[0] - 0.5 * self.width_x, center[0] + 0.5 * self.width_x, self.nx)?,
            Axis::new(center[1] - 0.5 * self.width_y, center[1] + 0.5 * self.width_y, self.ny)?,
            Axis::new(v_range.0, v_range.1, self.nv)?,
            match heading {
                Some((lo, hi)) => Axis::heading_window(lo, hi, self.ntheta)?,
                None => Axis::heading(self.ntheta)?,
            },
        )
    }

    /// Grid for an agent at `s0` driven by `boxes` over steps of `dt`. The
    /// planar window is centred on the bounding box of extreme-control
    /// rollouts and widened past `width_x`/`width_y` when that box (plus the
    /// initial ball and two cells) does not fit; the node counts stay fixed.
    /// The speed and heading windows are fixed or fitted to the reachable
    /// speeds and headings; a heading window that would not fit inside one
    /// turn falls back to the full circle.
    pub fn fit(&self, s0: &AgentState, boxes: &[ControlInterval], dt: f64, initial_radius: f64) -> Result<Grid4> {
        let (mut v_lo, mut v_hi) = (s0.v, s0.v);
        let (mut t_lo, mut t_hi) = (s0.theta, s0.theta);
        for b in boxes {
            v_lo += b.lower.u1 * dt;
            v_hi += b.upper.u1 * dt;
            t_lo += b.lower.u2 * dt;
            t_hi += b.upper.u2 * dt;
        }
        let (mut lo, mut hi) = ([s0.x, s0.y], [s0.x, s0.y]);
        for a in 0..3 {
            for c in 0..3 {
                let mut s = *s0;
                for b in boxes {
                    let pick = |dim: usize, i: usize| {
                        let (l, h) = b.bounds(dim);
                        l + 0.5 * (h - l) * i as f64
                    };
                    s = integrate(&s, Control::new(pick(0, a), pick(1, c)), dt);
                    lo = [lo[0].min(s.x), lo[1].min(s.y)];
                    hi = [hi[0].max(s.x), hi[1].max(s.y)];
                }
            }
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        // extent + 2·pad with pad = (r₀ + 2) cells of the resulting spacing
        let widen = |extent: f64, n: usize, min: f64| {
            let frac = 2.0 * (initial_radius + 2.0) / (n - 1) as f64;
            if frac < 1.0 {
                min.max(extent / (1.0 - frac))
            } else {
                min
            }
        };
        let reach = initial_radius + 1.0;
        // margin m covers the initial ball: m = slack + reach·Δ, Δ = (span + 2m)/cells
        let margin = |span: f64, n: usize, slack: f64| {
            let cells = (n - 1) as f64;
            (cells > 2.0 * reach).then(|| (slack + reach * span / cells) / (1.0 - 2.0 * reach / cells))
        };
        let v_range = match margin(v_hi - v_lo, self.nv, self.speed_margin) {
            Some(m) if self.fit_speed => (v_lo - m, v_hi + m),
            _ => (self.v_min, self.v_max),
        };
        let heading = match margin(t_hi - t_lo, self.ntheta, self.heading_margin) {
            Some(m) if self.fit_heading && t_hi - t_lo + 2.0 * m < 1.5 * PI => Some((t_lo - m, t_hi + m)),
            _ => None,
        };
        let sized = Self {
            width_x: widen(hi[0] - lo[0], self.nx, self.width_x),
            width_y: widen(hi[1] - lo[1], self.ny, self.width_y),
            ..*self
        };
        sized.build(center, v_range, heading)
    }
}

/// Sampled value function; `{V ≤ 0}` is the represented set.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: Grid4,
    pub values: Vec<f64>,
}

impl ValueGrid {
    pub fn constant(grid: Grid4, c: f64) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid,
        }
    }

    /// Distance in cell units to `center`, minus `radius_cells`. The heading
    /// difference is taken around the circle.
    pub fn ball(grid: Grid4, center: &AgentState, radius_cells: f64) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        if !grid.contains(center) {
            return Err(Error::OutsideGrid {
                x: center.x,
                y: center.y,
                v: center.v,
            });
        }
        let d = grid.spacing();
        let [ax, ay, av, at] = grid.axes;
        let mut values = Vec::with_capacity(grid.len());
        for ix in 0..ax.n {
            let dx = (ax.value(ix) - center.x) / d[0];
            for iy in 0..ay.n {
                let dy = (ay.value(iy) - center.y) / d[1];
                for iv in 0..av.n {
                    let dv = (av.value(iv) - center.v) / d[2];
                    for it in 0..at.n {
                        let dt = wrap_unchecked(at.value(it) - center.theta) / d[3];
                        values.push((dx * dx + dy * dy + dv * dv + dt * dt).sqrt() - radius_cells);
                    }
                }
            }
        }
        Ok(Self { grid, values })
    }

    pub fn at(&self, ix: usize, iy: usize, iv: usize, it: usize) -> f64 {
        self.values[self.grid.index(ix, iy, iv, it)]
    }

    /// Multilinear interpolation; non-periodic axes clamp to the boundary.
    pub fn interpolate(&self, s: &AgentState) -> f64 {
        self.interpolate_with(s, |i| self.values[i])
    }

    fn interpolate_with(&self, s: &AgentState, f: impl Fn(usize) -> f64) -> f64 {
        let q = s.as_array();
        let loc: Vec<(usize, usize, f64)> = (0..4).map(|d| self.grid.axes[d].locate(q[d])).collect();
        let mut acc = 0.0;
        for corner in 0..16usize {
            let mut w = 1.0;
            let mut idx = [0usize; 4];
            for d in 0..4 {
                let (lo, hi, t) = loc[d];
                if corner >> d & 1 == 1 {
                    idx[d] = hi;
                    w *= t;
                } else {
                    idx[d] = lo;
                    w *= 1.0 - t;
                }
            }
            if w != 0.0 {
                acc += w * f(self.grid.index(idx[0], idx[1], idx[2], idx[3]));
            }
        }
        acc
    }

    /// Central-difference gradient at a node (one-sided at non-periodic edges).
    pub fn node_gradient(&self, node: [usize; 4]) -> [f64; 4] {
        let d = self.grid.spacing();
        let mut g = [0.0; 4];
        for dim in 0..4 {
            let a = self.grid.axes[dim];
            let i = node[dim];
            let (lo, hi, span) = if a.periodic {
                ((i + a.n - 1) % a.n, (i + 1) % a.n, 2.0)
            } else if i == 0 {
                (0, 1, 1.0)
            } else if i == a.n - 1 {
                (i - 1, i, 1.0)
            } else {
                (i - 1, i + 1, 2.0)
            };
            let mut n_lo = node;
            let mut n_hi = node;
            n_lo[dim] = lo;
            n_hi[dim] = hi;
            let vl = self.values[self.grid.index(n_lo[0], n_lo[1], n_lo[2], n_lo[3])];
            let vh = self.values[self.grid.index(n_hi[0], n_hi[1], n_hi[2], n_hi[3])];
            g[dim] = (vh - vl) / (span * d[dim]);
        }
        g
    }

    /// Interpolated costate: node gradients blended multilinearly.
    pub fn gradient(&self, s: &AgentState) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (dim, o) in out.iter_mut().enumerate() {
            *o = self.interpolate_with(s, |i| self.node_gradient(self.grid.unflatten(i))[dim]);
        }
        out
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Planar occupancy mask on the `(x, y)` nodes of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SpatialSetRepr", try_from = "SpatialSetRepr")]
pub struct SpatialSet {
    pub x: Axis,
    pub y: Axis,
    /// Indexed `ix·ny + iy`.
    pub mask: Vec<bool>,
}

impl SpatialSet {
    pub fn empty(x: Axis, y: Axis) -> Self {
        Self {
            x,
            y,
            mask: vec![false; x.n * y.n],
        }
    }

    pub fn cell_area(&self) -> f64 {
        self.x.spacing() * self.y.spacing()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn area(&self) -> f64 {
        self.count() as f64 * self.cell_area()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.mask[ix * self.y.n + iy]
    }

    pub fn set(&mut self, ix: usize, iy: usize, value: bool) {
        let ny = self.y.n;
        self.mask[ix * ny + iy] = value;
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [self.x.value(ix), self.y.value(iy)]
    }

    /// Point membership by nearest node.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match (self.x.nearest(p[0]), self.y.nearest(p[1])) {
            (Some(ix), Some(iy)) => self.get(ix, iy),
            _ => false,
        }
    }

    /// Occupied node centres.
    pub fn occupied(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        let ny = self.y.n;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(move |(i, _)| self.cell_center(i / ny, i % ny))
    }

    /// Mask-wise subset test; `None` when the grids differ.
    pub fn is_subset_of(&self, other: &SpatialSet) -> Option<bool> {
        if self.x != other.x || self.y != other.y {
            return None;
        }
        Some(self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b))
    }

    pub fn half_cell_diagonal(&self) -> f64 {
        0.5 * self.x.spacing().hypot(self.y.spacing())
    }
}

/// Run-length form: alternating run lengths starting with unoccupied cells.
#[derive(Serialize, Deserialize)]
struct SpatialSetRepr {
    x: Axis,
    y: Axis,
    runs: Vec<u32>,
}

impl From<SpatialSet> for SpatialSetRepr {
    fn from(s: SpatialSet) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &m in &s.mask {
            if m == current {
                len += 1;
            } else {
                runs.push(len);
                current = m;
                len = 1;
            }
        }
        runs.push(len);
        Self { x: s.x, y: s.y, runs }
    }
}

impl TryFrom<SpatialSetRepr> for SpatialSet {
    type Error = String;
    fn try_from(r: SpatialSetRepr) -> std::result::Result<Self, String> {
        let mut mask = Vec::with_capacity(r.x.n * r.y.n);
        let mut value = false;
        for len in r.runs {
            mask.extend(std::iter::repeat_n(value, len as usize));
            value = !value;
        }
        if mask.len() != r.x.n * r.y.n {
            return Err(format!(
                "mask runs cover {} cells, grid has {}",
                mask.len(),
                r.x.n * r.y.n
            ));
        }
        Ok(Self { x: r.x, y: r.y, mask })
    }
}

/// `{(x, y) : min over (v, θ) of V(x, y, v, θ) ≤ 0}`.
pub fn project_xy(v: &ValueGrid) -> SpatialSet {
    let [ax, ay, av, at] = v.grid.axes;
    let column = av.n * at.n;
    let mask = v
        .values
        .chunks_exact(column)
        .map(|c| c.iter().any(|&x| x <= 0.0))
        .collect();
    SpatialSet { x: ax, y: ay, mask }
}

pub fn set_area(s: &SpatialSet) -> f64 {
    s.area()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Backward characteristics under constant sampled controls, with
    /// multilinear interpolation; unconditionally stable.
    #[default]
    SemiLagrangian,
    /// Dimension-wise Godunov flux (exact upwinding of each separable term).
    Upwind,
    /// Lax-Friedrichs with global dissipation coefficients.
    LaxFriedrichs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeOptions {
    pub scheme: Scheme,
    /// Courant number used to size substeps.
    pub cfl: f64,
    /// Radius of the initial ball, in cell units.
    pub initial_radius: f64,
    /// Semi-Lagrangian substeps are sized so no node moves further than this
    /// many cells along any axis.
    pub max_shift_cells: f64,
    /// Control samples per box dimension for the semi-Lagrangian minimum.
    pub control_samples: usize,
    /// Semi-Lagrangian dilation per interval, in cell units. Offsets the
    /// erosion of multilinear interpolation, which otherwise collapses sets
    /// sheared thinner than a cell.
    pub dilation: f64,
}

impl Default for TubeOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::SemiLagrangian,
            cfl: DEFAULT_CFL,
            initial_radius: DEFAULT_INITIAL_RADIUS,
            max_shift_cells: DEFAULT_MAX_SHIFT,
            control_samples: DEFAULT_CONTROL_SAMPLES,
            dilation: DEFAULT_DILATION,
        }
    }
}

impl TubeOptions {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Default::default()
        }
    }
}

/// `p₁v cosθ + p₂v sinθ + min_{u1} p₃u1 + min_{u2} p₄u2` over the box.
pub fn hamiltonian(s: &AgentState, p: [f64; 4], b: &ControlInterval) -> f64 {
    let (sin, cos) = s.theta.sin_cos();
    let pick = |pj: f64, dim: usize| {
        let (lo, hi) = b.bounds(dim);
        if pj > 0.0 {
            pj * lo
        } else {
            pj * hi
        }
    };
    p[0] * s.v * cos + p[1] * s.v * sin + pick(p[2], 0) + pick(p[3], 1)
}

/// Hamiltonian of forward growth, `−H(z, −p)`: the maximizing control picks
/// the upper bound where the costate is positive.
pub fn growth_hamiltonian(s: &AgentState, p: [f64; 4], b: &ControlInterval) -> f64 {
    -hamiltonian(s, [-p[0], -p[1], -p[2], -p[3]], b)
}

/// Largest stable substep for `box` on `grid`.
pub fn cfl_limit(grid: &Grid4, b: &ControlInterval, cfl: f64) -> f64 {
    let d = grid.spacing();
    let a = dissipation(grid, b);
    let rate: f64 = (0..4).map(|j| a[j] / d[j]).sum();
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        cfl / rate
    }
}

/// Bounds on `|∂H/∂p_j|` over the whole grid.
fn dissipation(grid: &Grid4, b: &ControlInterval) -> [f64; 4] {
    let av = grid.axes[2];
    let vmax = av.min.abs().max(av.max.abs());
    let at = grid.axes[3];
    let (mut cmax, mut smax) = (0.0f64, 0.0f64);
    for it in 0..at.n {
        let (s, c) = at.value(it).sin_cos();
        cmax = cmax.max(c.abs());
        smax = smax.max(s.abs());
    }
    [
        vmax * cmax,
        vmax * smax,
        b.lower.u1.abs().max(b.upper.u1.abs()),
        b.lower.u2.abs().max(b.upper.u2.abs()),
    ]
}

/// Godunov flux of `h(p) = max(a·p, b·p)`, `a ≤ b`.
#[inline(always)]
fn interval_flux(a: f64, b: f64, pm: f64, pp: f64) -> f64 {
    let h = |p: f64| if p >= 0.0 { b * p } else { a * p };
    if a >= 0.0 {
        h(pm)
    } else if b <= 0.0 {
        h(pp)
    } else {
        (b * pm.max(0.0)).max(a * pp.min(0.0))
    }
}

#[inline(always)]
fn interval_h(a: f64, b: f64, p: f64) -> f64 {
    if p >= 0.0 {
        b * p
    } else {
        a * p
    }
}

/// Neighbour offsets for backward and forward differences along an axis:
/// `p⁻ = (V[i + m.0] − V[i + m.1])/Δ`, `p⁺ = (V[i + p.0] − V[i + p.1])/Δ`.
#[derive(Clone, Copy)]
struct Stencil {
    minus: (isize, isize),
    plus: (isize, isize),
}

fn stencils(a: &Axis, stride: usize) -> Vec<Stencil> {
    let s = stride as isize;
    let n = a.n;
    (0..n)
        .map(|i| {
            if a.periodic {
                let prev = ((i + n - 1) % n) as isize - i as isize;
                let next = ((i + 1) % n) as isize - i as isize;
                Stencil {
                    minus: (0, prev * s),
                    plus: (next * s, 0),
                }
            } else if i == 0 {
                Stencil {
                    minus: (s, 0),
                    plus: (s, 0),
                }
            } else if i == n - 1 {
                Stencil {
                    minus: (0, -s),
                    plus: (0, -s),
                }
            } else {
                Stencil {
                    minus: (0, -s),
                    plus: (s, 0),
                }
            }
        })
        .collect()
}

/// Evenly spaced controls covering the box, bounds included; a degenerate
/// dimension contributes a single value.
pub fn control_samples(b: &ControlInterval, per_dim: usize) -> Vec<Control> {
    let axis = |dim: usize| -> Vec<f64> {
        let (lo, hi) = b.bounds(dim);
        if hi <= lo || per_dim < 2 {
            return vec![0.5 * (lo + hi)];
        }
        (0..per_dim)
            .map(|i| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64)
            .collect()
    };
    let (a, c) = (axis(0), axis(1));
    a.iter()
        .flat_map(|&u1| c.iter().map(move |&u2| Control::new(u1, u2)))
        .collect()
}

/// Where the characteristic ending at a `(v, θ)` node started `s` seconds
/// earlier under the constant control `u`: the planar displacement to undo,
/// then the starting speed and heading. Simpson's rule is exactly RK4 here
/// since the field does not depend on position.
fn backward_displacement(v: f64, theta: f64, u: Control, s: f64) -> (f64, f64, f64, f64) {
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (w, r) in [(1.0, 0.0), (4.0, 0.5 * s), (1.0, s)] {
        let (sin, cos) = (theta - u.u2 * r).sin_cos();
        let speed = v - u.u1 * r;
        dx += w * speed * cos;
        dy += w * speed * sin;
    }
    (dx * s / 6.0, dy * s / 6.0, v - u.u1 * s, theta - u.u2 * s)
}

/// Interpolation stencil of a characteristic's foot relative to its node.
/// The flow is invariant under planar translation, so one stencil serves
/// every `(x, y)` column.
#[derive(Clone, Copy)]
struct Shift {
    ox: isize,
    fx: f64,
    oy: isize,
    fy: f64,
    /// Offsets of the four `(v, θ)` corners within a column.
    vt: [usize; 4],
    wvt: [f64; 4],
}

/// Inclusive `(x, y)` index box.
#[derive(Clone, Copy, Debug)]
struct Band {
    x: (usize, usize),
    y: (usize, usize),
}

impl Band {
    fn full(g: &Grid4) -> Self {
        Self {
            x: (0, g.axes[0].n - 1),
            y: (0, g.axes[1].n - 1),
        }
    }
}

/// Value assigned to nodes that no admissible characteristic reaches.
const FAR: f64 = 1.0e3;

/// Box around the columns holding `V ≤ 0`, widened by `margin` nodes, and
/// the largest `|v|` among those nodes.
fn occupied_band(g: &Grid4, values: &[f64], margin: usize) -> Option<(Band, f64)> {
    let [ax, ay, av, at] = g.axes;
    let column = av.n * at.n;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    let mut vmax = 0.0f64;
    for (c, chunk) in values.chunks_exact(column).enumerate() {
        let mut hit = false;
        for (j, &x) in chunk.iter().enumerate() {
            if x <= 0.0 {
                hit = true;
                vmax = vmax.max(av.value(j / at.n).abs());
            }
        }
        if hit {
            let (ix, iy) = (c / ay.n, c % ay.n);
            bbox = Some(match bbox {
                None => (ix, ix, iy, iy),
                Some((a, b, c0, d)) => (a.min(ix), b.max(ix), c0.min(iy), d.max(iy)),
            });
        }
    }
    bbox.map(|(x0, x1, y0, y1)| {
        (
            Band {
                x: (x0.saturating_sub(margin), (x1 + margin).min(ax.n - 1)),
                y: (y0.saturating_sub(margin), (y1 + margin).min(ay.n - 1)),
            },
            vmax,
        )
    })
}

/// Semi-Lagrangian sweeps over one grid.
struct SemiLagrangian {
    grid: Grid4,
    speeds: Vec<f64>,
}

impl SemiLagrangian {
    fn new(grid: Grid4) -> Self {
        Self {
            speeds: (0..grid.axes[2].n).map(|i| grid.axes[2].value(i)).collect(),
            grid,
        }
    }

    /// Stencils laid out `[(iv·nθ + iθ)·controls + c]`.
    fn shifts(&self, controls: &[Control], s: f64) -> Vec<Shift> {
        let [ax, ay, av, at] = self.grid.axes;
        let mut out = Vec::with_capacity(controls.len() * av.n * at.n);
        for iv in 0..av.n {
            for it in 0..at.n {
                for &u in controls {
                    let (dx, dy, v0, t0) = backward_displacement(self.speeds[iv], at.value(it), u, s);
                    let cx = -dx / ax.spacing();
                    let cy = -dy / ay.spacing();
                    let (va, vb, fv) = av.locate(v0);
                    let (ta, tb, ft) = at.locate(t0);
                    out.push(Shift {
                        ox: cx.floor() as isize,
                        fx: cx - cx.floor(),
                        oy: cy.floor() as isize,
                        fy: cy - cy.floor(),
                        vt: [va * at.n + ta, va * at.n + tb, vb * at.n + ta, vb * at.n + tb],
                        wvt: [(1.0 - fv) * (1.0 - ft), (1.0 - fv) * ft, fv * (1.0 - ft), fv * ft],
                    });
                }
            }
        }
        out
    }

    /// Nearest-node planar offsets of the characteristic at `checks` times
    /// before its node, `0` included; same layout as [`Self::shifts`] with
    /// `checks` entries per stencil.
    fn path_offsets(&self, controls: &[Control], s: f64, checks: usize) -> Vec<(isize, isize)> {
        let [ax, ay, av, at] = self.grid.axes;
        let mut out = Vec::with_capacity(controls.len() * av.n * at.n * checks);
        for iv in 0..av.n {
            for it in 0..at.n {
                for &u in controls {
                    for q in 0..checks {
                        let r = s * q as f64 / checks as f64;
                        let (dx, dy, _, _) = backward_displacement(self.speeds[iv], at.value(it), u, r);
                        out.push((
                            (-dx / ax.spacing()).round() as isize,
                            (-dy / ay.spacing()).round() as isize,
                        ));
                    }
                }
            }
        }
        out
    }

    /// For every node in `band`, the minimum over stencils of `src`
    /// interpolated at the characteristic foot, passed to `sink`. Stencils
    /// whose path crosses a blocked column are skipped.
    fn backward_min(
        &self,
        src: &[f64],
        shifts: &[Shift],
        ns: usize,
        band: Band,
        path: Option<(&[bool], &[(isize, isize)], usize)>,
        mut sink: impl FnMut(usize, f64),
    ) {
        let [ax, ay, av, at] = self.grid.axes;
        let column = av.n * at.n;
        let (nx, ny) = (ax.n as isize, ay.n as isize);
        let cx = |i: isize| i.clamp(0, nx - 1) as usize;
        let cy = |i: isize| i.clamp(0, ny - 1) as usize;
        for ix in band.x.0..=band.x.1 {
            for iy in band.y.0..=band.y.1 {
                let base = (ix * ay.n + iy) * column;
                let (xi, yi) = (ix as isize, iy as isize);
                for (j, group) in shifts.chunks_exact(ns).enumerate() {
                    let mut best = FAR;
                    for (c, sh) in group.iter().enumerate() {
                        if let Some((blocked, offs, checks)) = path {
                            let start = (j * ns + c) * checks;
                            let hit = offs[start..start + checks].iter().any(|&(dx, dy)| {
                                let (x, y) = (xi + dx, yi + dy);
                                x >= 0 && y >= 0 && x < nx && y < ny && blocked[(x * ny + y) as usize]
                            });
                            if hit {
                                continue;
                            }
                        }
                        let x0 = cx(xi + sh.ox);
                        let x1 = cx(xi + sh.ox + 1);
                        let y0 = cy(yi + sh.oy);
                        let y1 = cy(yi + sh.oy + 1);
                        let col = |x: usize, y: usize| {
                            let c = (x * ay.n + y) * column;
                            sh.wvt[0] * src[c + sh.vt[0]]
                                + sh.wvt[1] * src[c + sh.vt[1]]
                                + sh.wvt[2] * src[c + sh.vt[2]]
                                + sh.wvt[3] * src[c + sh.vt[3]]
                        };
                        let val = (1.0 - sh.fx) * ((1.0 - sh.fy) * col(x0, y0) + sh.fy * col(x0, y1))
                            + sh.fx * ((1.0 - sh.fy) * col(x1, y0) + sh.fy * col(x1, y1));
                        if val < best {
                            best = val;
                        }
                    }
                    sink(base + j, best);
                }
            }
        }
    }
}

/// Explicit finite-difference stepping state for one grid.
pub struct Propagator {
    grid: Grid4,
    scheme: Scheme,
    cos: Vec<f64>,
    sin: Vec<f64>,
    speeds: Vec<f64>,
    st: [Vec<Stencil>; 4],
    scratch: Vec<f64>,
}

impl Propagator {
    pub fn new(grid: Grid4, scheme: Scheme) -> Self {
        let [ax, ay, av, at] = grid.axes;
        let sy = av.n * at.n;
        let sx = ay.n * sy;
        let (sin, cos): (Vec<f64>, Vec<f64>) = (0..at.n).map(|i| at.value(i).sin_cos()).unzip();
        Self {
            grid,
            scheme,
            cos,
            sin,
            speeds: (0..av.n).map(|i| av.value(i)).collect(),
            st: [
                stencils(&ax, sx),
                stencils(&ay, sy),
                stencils(&av, at.n),
                stencils(&at, 1),
            ],
            scratch: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid4 {
        &self.grid
    }

    /// One substep of length `dt` followed by the tube freeze.
    pub fn step(&mut self, values: &mut [f64], b: &ControlInterval, dt: f64) {
        if self.scheme == Scheme::SemiLagrangian {
            let sl = SemiLagrangian::new(self.grid);
            let controls = control_samples(b, DEFAULT_CONTROL_SAMPLES);
            let shifts = sl.shifts(&controls, dt);
            let out = &mut self.scratch;
            out.copy_from_slice(values);
            sl.backward_min(values, &shifts, controls.len(), Band::full(&self.grid), None, |i, v| {
                if v < out[i] {
                    out[i] = v;
                }
            });
            values.copy_from_slice(out);
            return;
        }
        let g = self.grid;
        let [ax, ay, av, at] = g.axes;
        let d = g.spacing();
        let inv = [1.0 / d[0], 1.0 / d[1], 1.0 / d[2], 1.0 / d[3]];
        let (a3, b3) = b.bounds(0);
        let (a4, b4) = b.bounds(1);
        let alpha = dissipation(&g, b);
        let lf = self.scheme == Scheme::LaxFriedrichs;
        let out = &mut self.scratch;
        let v = &*values;
        for ix in 0..ax.n {
            let sx = self.st[0][ix];
            for iy in 0..ay.n {
                let sy = self.st[1][iy];
                for iv in 0..av.n {
                    let sv = self.st[2][iv];
                    let speed = self.speeds[iv];
                    let base = g.index(ix, iy, iv, 0);
                    for it in 0..at.n {
                        let i = base + it;
                        let st = self.st[3][it];
                        let diff = |s: Stencil| -> (f64, f64) {
                            let ii = i as isize;
                            (
                                v[(ii + s.minus.0) as usize] - v[(ii + s.minus.1) as usize],
                                v[(ii + s.plus.0) as usize] - v[(ii + s.plus.1) as usize],
                            )
                        };
                        let (xm, xp) = diff(sx);
                        let (ym, yp) = diff(sy);
                        let (vm, vp) = diff(sv);
                        let (tm, tp) = diff(st);
                        let (xm, xp) = (xm * inv[0], xp * inv[0]);
                        let (ym, yp) = (ym * inv[1], yp * inv[1]);
                        let (vm, vp) = (vm * inv[2], vp * inv[2]);
                        let (tm, tp) = (tm * inv[3], tp * inv[3]);
                        let c1 = speed * self.cos[it];
                        let c2 = speed * self.sin[it];
                        let flux = if lf {
                            let h = c1 * 0.5 * (xm + xp)
                                + c2 * 0.5 * (ym + yp)
                                + interval_h(a3, b3, 0.5 * (vm + vp))
                                + interval_h(a4, b4, 0.5 * (tm + tp));
                            h - 0.5
                                * (alpha[0] * (xp - xm)
                                    + alpha[1] * (yp - ym)
                                    + alpha[2] * (vp - vm)
                                    + alpha[3] * (tp - tm))
                        } else {
                            c1 * if c1 > 0.0 { xm } else { xp }
                                + c2 * if c2 > 0.0 { ym } else { yp }
                                + interval_flux(a3, b3, vm, vp)
                                + interval_flux(a4, b4, tm, tp)
                        };
                        let next = v[i] - dt * flux;
                        out[i] = if next < v[i] { next } else { v[i] };
                    }
                }
            }
        }
        values.copy_from_slice(out);
    }
}

/// Number of equal substeps covering `duration` within the CFL bound.
pub fn substeps(grid: &Grid4, b: &ControlInterval, duration: f64, cfl: f64) -> usize {
    let limit = cfl_limit(grid, b, cfl);
    if limit.is_infinite() {
        1
    } else {
        ((duration / limit).ceil() as usize).max(1)
    }
}

/// One substep of the forward tube equation. The explicit flux schemes
/// reject steps beyond the CFL bound; the semi-Lagrangian scheme accepts any
/// positive step.
pub fn frt_step(v: &ValueGrid, b: &ControlInterval, dt_pde: f64, scheme: Scheme) -> Result<ValueGrid> {
    let limit = DEFAULT_CFL * cfl_limit(&v.grid, b, 1.0);
    let explicit = scheme != Scheme::SemiLagrangian;
    if !(dt_pde > 0.0 && dt_pde.is_finite()) || (explicit && dt_pde > limit * (1.0 + 1e-12)) {
        return Err(Error::CflViolation { dt: dt_pde, limit });
    }
    let mut out = v.clone();
    Propagator::new(v.grid, scheme).step(&mut out.values, b, dt_pde);
    Ok(out)
}

/// Result of propagating an initial ball through a sequence of control boxes.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `reach[k]` holds the states occupied at `k·dt`; `reach[0]` is the
    /// initial ball. The explicit schemes store the frozen tube instead.
    pub reach: Vec<ValueGrid>,
    /// `sets[k − 1]` is the planar tube up to `k·dt`. When obstacles are
    /// given it is the projection of `reach[k]`.
    pub sets: Vec<SpatialSet>,
    /// Sweeps (or explicit substeps) used per interval.
    pub substeps: Vec<usize>,
}

/// Columns of the grid that may not be entered during each interval:
/// `blocked[k − 1]` applies on `((k − 1)·dt, k·dt]`, indexed `ix·ny + iy`.
pub type BlockedColumns = [Vec<bool>];

/// Propagates the ball of `opts.initial_radius` cells around `s0` through
/// `intervals`, each held for `dt` seconds.
pub fn propagate(
    s0: &AgentState,
    intervals: &[ControlInterval],
    grid: Grid4,
    dt: f64,
    opts: &TubeOptions,
    blocked: Option<&BlockedColumns>,
) -> Result<Propagation> {
    if intervals.is_empty() {
        return Err(Error::invalid("intervals", "need at least one control box"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    if let Some(b) = blocked {
        let columns = grid.axes[0].n * grid.axes[1].n;
        if b.len() < intervals.len() || b.iter().any(|m| m.len() != columns) {
            return Err(Error::invalid("blocked", "one column mask per interval is required"));
        }
    }
    let initial = ValueGrid::ball(grid, s0, opts.initial_radius)?;
    match opts.scheme {
        Scheme::SemiLagrangian => propagate_sl(initial, intervals, dt, opts, blocked),
        _ => propagate_explicit(initial, intervals, dt, opts, blocked),
    }
}

fn apply_blocked(grid: &Grid4, values: &mut [f64], blocked: &[bool]) {
    let column = grid.axes[2].n * grid.axes[3].n;
    for (chunk, &b) in values.chunks_exact_mut(column).zip(blocked) {
        if b {
            for v in chunk {
                *v = v.max(1.0);
            }
        }
    }
}

fn propagate_explicit(
    initial: ValueGrid,
    intervals: &[ControlInterval],
    dt: f64,
    opts: &TubeOptions,
    blocked: Option<&BlockedColumns>,
) -> Result<Propagation> {
    let grid = initial.grid;
    let mut prop = Propagator::new(grid, opts.scheme);
    let mut value = initial;
    let mut reach = vec![value.clone()];
    let mut sets = Vec::with_capacity(intervals.len());
    let mut counts = Vec::with_capacity(intervals.len());
    for (k, b) in intervals.iter().enumerate() {
        let n = substeps(&grid, b, dt, opts.cfl);
        for _ in 0..n {
            prop.step(&mut value.values, b, dt / n as f64);
            if let Some(m) = blocked {
                apply_blocked(&grid, &mut value.values, &m[k]);
            }
        }
        counts.push(n);
        sets.push(project_xy(&value));
        reach.push(value.clone());
    }
    Ok(Propagation {
        reach,
        sets,
        substeps: counts,
    })
}

fn propagate_sl(
    initial: ValueGrid,
    intervals: &[ControlInterval],
    dt: f64,
    opts: &TubeOptions,
    blocked: Option<&BlockedColumns>,
) -> Result<Propagation> {
    let grid = initial.grid;
    let d = grid.spacing();
    let planar = d[0].min(d[1]);
    let sl = SemiLagrangian::new(grid);
    let mut tube = initial.values.clone();
    let mut reach = vec![initial];
    let mut sets = Vec::with_capacity(intervals.len());
    let mut counts = Vec::with_capacity(intervals.len());
    for (k, b) in intervals.iter().enumerate() {
        let prev = &reach[k].values;
        let controls = control_samples(b, opts.control_samples);
        let ns = controls.len();
        let umax = b.lower.u1.abs().max(b.upper.u1.abs());
        let mut next = ValueGrid::constant(grid, FAR);
        let Some((_, vmax)) = occupied_band(&grid, prev, 0) else {
            // nothing left to propagate
            counts.push(0);
            sets.push(project_xy(&ValueGrid {
                grid,
                values: tube.clone(),
            }));
            reach.push(next);
            continue;
        };
        let speed = vmax + d[2] + umax * dt;
        let travel = speed * dt / planar;
        let margin = travel.ceil() as usize + 3;
        let (band, _) = occupied_band(&grid, prev, margin).expect("set is nonempty");
        let sweeps = match blocked {
            Some(_) => 1,
            None => ((travel / opts.max_shift_cells).ceil() as usize).max(1),
        };
        for j in 1..=sweeps {
            let s = dt * j as f64 / sweeps as f64;
            let shifts = sl.shifts(&controls, s);
            let lift = opts.dilation * s / dt;
            if j < sweeps {
                sl.backward_min(prev, &shifts, ns, band, None, |i, v| {
                    let v = v - lift;
                    if v < tube[i] {
                        tube[i] = v;
                    }
                });
                continue;
            }
            let checks = ((travel / opts.max_shift_cells).ceil() as usize).max(4);
            let offsets;
            let path = match blocked {
                Some(m) => {
                    offsets = sl.path_offsets(&controls, s, checks);
                    Some((m[k].as_slice(), offsets.as_slice(), checks))
                }
                None => None,
            };
            let out = &mut next.values;
            sl.backward_min(prev, &shifts, ns, band, path, |i, v| {
                let v = if v >= FAR { FAR } else { v - lift };
                out[i] = v;
                if v < tube[i] {
                    tube[i] = v;
                }
            });
        }
        counts.push(sweeps);
        sets.push(match blocked {
            Some(_) => project_xy(&next),
            None => project_xy(&ValueGrid {
                grid,
                values: tube.clone(),
            }),
        });
        reach.push(next);
    }
    Ok(Propagation {
        reach,
        sets,
        substeps: counts,
    })
}

/// Value-function snapshots at every step boundary, starting with the initial
/// ball.
pub fn tube_snapshots(
    s0: &AgentState,
    intervals: &[ControlInterval],
    grid: Grid4,
    dt: f64,
    opts: &TubeOptions,
) -> Result<Vec<ValueGrid>> {
    Ok(propagate(s0, intervals, grid, dt, opts, None)?.reach)
}

/// Planar tubes `S[t + kΔt]`, `k = 1..=h`, for an agent at `s0` whose control
/// during step `k` stays in `intervals[k − 1]`.
pub fn generate_tubes(
    s0: &AgentState,
    intervals: &[ControlInterval],
    grid: Grid4,
    dt: f64,
    opts: &TubeOptions,
) -> Result<Vec<SpatialSet>> {
    Ok(propagate(s0, intervals, grid, dt, opts, None)?.sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::dubins_step;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> Grid4 {
        Grid4::new(
            Axis::new(-10.0, 10.0, 21).unwrap(),
            Axis::new(-10.0, 10.0, 21).unwrap(),
            Axis::new(-1.0, 3.0, 9).unwrap(),
            Axis::heading(16).unwrap(),
        )
        .unwrap()
    }

    fn boxed(lo: (f64, f64), hi: (f64, f64)) -> ControlInterval {
        ControlInterval::new(Control::new(lo.0, lo.1), Control::new(hi.0, hi.1)).unwrap()
    }

    #[test]
    fn axis_basics() {
        let a = Axis::new(0.0, 10.0, 11).unwrap();
        assert_eq!(a.spacing(), 1.0);
        assert_eq!(a.nearest(3.4), Some(3));
        assert_eq!(a.nearest(10.4), Some(10));
        assert_eq!(a.nearest(10.6), None);
        assert!(Axis::new(0.0, 1.0, 2).is_err());
        let h = Axis::heading(8).unwrap();
        assert!((h.spacing() - PI / 4.0).abs() < 1e-15);
        assert_eq!(h.nearest(PI), Some(0));
        assert_eq!(h.nearest(PI - 0.1), Some(0));
        assert_eq!(h.nearest(0.0), Some(4));
    }

    #[test]
    fn hamiltonian_examples() {
        let b = boxed((-1.0, -0.5), (1.0, 0.5));
        let s = AgentState::new(1.0, 2.0, 3.0, 0.7);
        assert_eq!(hamiltonian(&s, [0.0; 4], &b), 0.0);

        let s = AgentState::new(0.0, 0.0, 2.0, 0.0);
        assert!((hamiltonian(&s, [1.0, 0.0, 1.0, 0.0], &b) - 1.0).abs() < 1e-15);

        let s = AgentState::new(0.0, 0.0, 2.0, PI / 2.0);
        assert!(hamiltonian(&s, [1.0, 0.0, 0.0, 0.0], &b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hamiltonian_matches_box_sampling(
            p in proptest::collection::vec(-3.0..3.0f64, 4),
            v in -2.0..10.0f64,
            th in -PI..PI,
            lo in (-2.0..0.0f64, -1.0..0.0f64),
            w in (0.0..3.0f64, 0.0..2.0f64),
        ) {
            let b = boxed(lo, (lo.0 + w.0, lo.1 + w.1));
            let s = AgentState::new(0.0, 0.0, v, th);
            let p = [p[0], p[1], p[2], p[3]];
            let drift = p[0] * v * th.cos() + p[1] * v * th.sin();
            let mut best = f64::INFINITY;
            for i in 0..17 {
                for j in 0..17 {
                    let u1 = lo.0 + w.0 * i as f64 / 16.0;
                    let u2 = lo.1 + w.1 * j as f64 / 16.0;
                    best = best.min(drift + p[2] * u1 + p[3] * u2);
                }
            }
            prop_assert!((hamiltonian(&s, p, &b) - best).abs() < 1e-9);
            let mut top = f64::NEG_INFINITY;
            for i in 0..17 {
                for j in 0..17 {
                    let u1 = lo.0 + w.0 * i as f64 / 16.0;
                    let u2 = lo.1 + w.1 * j as f64 / 16.0;
                    top = top.max(drift + p[2] * u1 + p[3] * u2);
                }
            }
            prop_assert!((growth_hamiltonian(&s, p, &b) - top).abs() < 1e-9);
        }

        #[test]
        fn godunov_flux_is_monotone_and_consistent(
            a in -2.0..2.0f64, w in 0.0..2.0f64,
            pm in -3.0..3.0f64, pp in -3.0..3.0f64, dp in 0.0..1.0f64,
        ) {
            let b = a + w;
            prop_assert!(interval_flux(a, b, pm + dp, pp) >= interval_flux(a, b, pm, pp) - 1e-12);
            prop_assert!(interval_flux(a, b, pm, pp + dp) <= interval_flux(a, b, pm, pp) + 1e-12);
            prop_assert!((interval_flux(a, b, pm, pm) - interval_h(a, b, pm)).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_field_is_unchanged() {
        let g = small_grid();
        let b = boxed((-1.0, -0.3), (1.0, 0.3));
        let v = ValueGrid::constant(g, -0.7);
        let dt = 0.5 * cfl_limit(&g, &b, 1.0);
        for scheme in [Scheme::SemiLagrangian, Scheme::Upwind, Scheme::LaxFriedrichs] {
            let out = frt_step(&v, &b, dt, scheme).unwrap();
            // interpolation weights sum to one up to rounding
            assert!(out.values.iter().all(|x| (x + 0.7).abs() < 1e-12), "{scheme:?}");
        }
    }

    #[test]
    fn cfl_violation_rejected() {
        let g = small_grid();
        let b = boxed((-1.0, -0.3), (1.0, 0.3));
        let v = ValueGrid::constant(g, 1.0);
        let limit = cfl_limit(&g, &b, 1.0);
        assert!(matches!(
            frt_step(&v, &b, limit, Scheme::Upwind),
            Err(Error::CflViolation { .. })
        ));
        assert!(frt_step(&v, &b, 0.8 * limit, Scheme::Upwind).is_ok());
        assert!(frt_step(&v, &b, 10.0 * limit, Scheme::SemiLagrangian).is_ok());
        assert!(frt_step(&v, &b, 0.0, Scheme::SemiLagrangian).is_err());
    }

    #[test]
    fn step_never_raises_values() {
        let g = small_grid();
        let b = boxed((-0.5, -0.2), (0.5, 0.2));
        let s0 = AgentState::new(0.0, 0.0, 1.0, 0.3);
        let v = ValueGrid::ball(g, &s0, 2.0).unwrap();
        let dt = 0.8 * cfl_limit(&g, &b, 1.0);
        for scheme in [Scheme::SemiLagrangian, Scheme::Upwind, Scheme::LaxFriedrichs] {
            let out = frt_step(&v, &b, dt, scheme).unwrap();
            assert!(out.values.iter().zip(&v.values).all(|(n, o)| n <= o));
        }
    }

    #[test]
    fn flowed_seed_point_stays_inside() {
        let g = small_grid();
        let s0 = AgentState::new(-1.0, 0.5, 2.0, 0.4);
        let b = ControlInterval::point(Control::ZERO);
        for scheme in [Scheme::SemiLagrangian, Scheme::Upwind, Scheme::LaxFriedrichs] {
            let opts = TubeOptions::with_scheme(scheme);
            let snaps = tube_snapshots(&s0, &[b], g, 0.5, &opts).unwrap();
            let flowed = dubins_step(&s0, Control::ZERO, 0.5).unwrap();
            assert!(snaps[1].interpolate(&flowed) <= 0.0, "{scheme:?}");
            assert!(project_xy(&snaps[1]).contains(flowed.xy()));
        }
    }

    #[test]
    fn projection_examples() {
        let g = small_grid();
        let empty = project_xy(&ValueGrid::constant(g, 1.0));
        assert_eq!(empty.count(), 0);
        assert_eq!(set_area(&empty), 0.0);

        let mut v = ValueGrid::constant(g, 1.0);
        let i = g.index(4, 7, 2, 5);
        v.values[i] = -0.1;
        let one = project_xy(&v);
        assert_eq!(one.count(), 1);
        assert!(one.get(4, 7));
        assert_eq!(set_area(&one), one.cell_area());

        let mut v = ValueGrid::constant(g, 1.0);
        for ix in 3..6 {
            for iy in 10..14 {
                let i = g.index(ix, iy, 0, 0);
                v.values[i] = 0.0;
            }
        }
        let block = project_xy(&v);
        assert_eq!(set_area(&block), 12.0 * block.cell_area());
    }

    #[test]
    fn spatial_set_json_round_trip() {
        let g = small_grid();
        let sets = generate_tubes(
            &AgentState::new(0.0, 0.0, 1.0, 0.0),
            &[boxed((-0.5, -0.2), (0.5, 0.2)); 2],
            g,
            0.5,
            &TubeOptions::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&sets[1]).unwrap();
        assert!(json.contains("runs"));
        let back: SpatialSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sets[1]);
        let bad = json.replace("\"runs\":[", "\"runs\":[1,");
        assert!(serde_json::from_str::<SpatialSet>(&bad).is_err());
    }

    #[test]
    fn start_outside_grid_rejected() {
        let g = small_grid();
        let b = [ControlInterval::point(Control::ZERO)];
        let far = AgentState::new(50.0, 0.0, 1.0, 0.0);
        assert!(matches!(
            generate_tubes(&far, &b, g, 0.5, &TubeOptions::default()),
            Err(Error::OutsideGrid { .. })
        ));
        let fast = AgentState::new(0.0, 0.0, 9.0, 0.0);
        assert!(generate_tubes(&fast, &b, g, 0.5, &TubeOptions::default()).is_err());
    }

    #[test]
    fn tubes_nest_and_contain_samples() {
        let g = small_grid();
        let s0 = AgentState::new(-2.0, -1.0, 1.5, 0.5);
        let boxes = vec![boxed((-0.4, -0.3), (0.4, 0.2)); 4];
        for scheme in [Scheme::SemiLagrangian, Scheme::Upwind, Scheme::LaxFriedrichs] {
            let opts = TubeOptions::with_scheme(scheme);
            let sets = generate_tubes(&s0, &boxes, g, 0.5, &opts).unwrap();
            for w in sets.windows(2) {
                assert_eq!(w[0].is_subset_of(&w[1]), Some(true));
            }
            if scheme == Scheme::LaxFriedrichs {
                // global dissipation erodes the front, so only nesting holds
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..200 {
                let mut s = s0;
                for (k, b) in boxes.iter().enumerate() {
                    let u = Control::new(
                        rng.gen_range(b.lower.u1..=b.upper.u1),
                        rng.gen_range(b.lower.u2..=b.upper.u2),
                    );
                    s = dubins_step(&s, u, 0.5).unwrap();
                    assert!(sets[k].contains(s.xy()), "{scheme:?} step {k} {s:?}");
                }
            }
        }
    }

    #[test]
    fn fitted_grid_covers_start_and_speeds() {
        let spec = GridSpec::default();
        let s0 = AgentState::new(100.0, -40.0, 6.0, 1.0);
        let boxes = vec![boxed((-1.0, -0.2), (0.5, 0.2)); 6];
        let g = spec.fit(&s0, &boxes, 0.5, 2.0).unwrap();
        assert!(g.contains(&s0));
        let av = g.axes[2];
        assert!(av.min < 6.0 - 3.0 - 2.0 * av.spacing());
        assert!(av.max > 6.0 + 1.5 + 2.0 * av.spacing());
        let fixed = GridSpec {
            fit_speed: false,
            ..Default::default()
        }
        .fit(&s0, &boxes, 0.5, 2.0)
        .unwrap();
        assert_eq!((fixed.axes[2].min, fixed.axes[2].max), (-2.0, 20.0));
    }

    #[test]
    fn heading_window_reads_angles_near_its_centre() {
        let a = Axis::heading_window(2.8, 3.6, 9).unwrap();
        assert!(a.contains(3.0) && a.contains(-2.8) && !a.contains(0.0));
        // −2.8 + 2π ≈ 3.483 lies between nodes 6 and 7
        let (i, j, f) = a.locate(-2.8);
        assert_eq!((i, j), (6, 7));
        assert!((a.value(i) + f * a.spacing() - (-2.8 + 2.0 * PI)).abs() < 1e-12);
        assert!(Axis::heading_window(0.0, 2.0 * PI, 9).is_err());
        let g = Grid4::new(
            Axis::new(0.0, 1.0, 3).unwrap(),
            Axis::new(0.0, 1.0, 3).unwrap(),
            Axis::new(0.0, 1.0, 3).unwrap(),
            a,
        )
        .unwrap();
        assert!(g.node(0, 0, 0, 8).theta < -2.6);
    }

    #[test]
    fn wide_heading_spread_falls_back_to_full_circle() {
        let spec = GridSpec::default();
        let s0 = AgentState::new(0.0, 0.0, 3.0, 3.0);
        let narrow = spec.fit(&s0, &[boxed((0.0, -0.1), (0.0, 0.1)); 6], 0.5, 2.0).unwrap();
        let at = narrow.axes[3];
        assert!(!at.periodic && at.min < 3.0 - 0.3 && at.max > 3.0 + 0.3 && at.max - at.min < 2.0);
        let wide = spec.fit(&s0, &[boxed((0.0, -1.0), (0.0, 1.0)); 6], 0.5, 2.0).unwrap();
        assert!(wide.axes[3].periodic);
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let g = small_grid();
        let mut v = ValueGrid::constant(g, 0.0);
        for (i, val) in v.values.iter_mut().enumerate() {
            let [ix, iy, iv, _] = g.unflatten(i);
            let n = g.node(ix, iy, iv, 0);
            *val = 2.0 * n.x - 0.5 * n.y + 3.0 * n.v;
        }
        let s = AgentState::new(1.3, -2.2, 0.7, 0.1);
        let p = v.gradient(&s);
        assert!((p[0] - 2.0).abs() < 1e-9 && (p[1] + 0.5).abs() < 1e-9);
        assert!((p[2] - 3.0).abs() < 1e-9 && p[3].abs() < 1e-9);
        assert!((v.interpolate(&s) - (2.6 + 1.1 + 2.1)).abs() < 1e-9);
    }
}

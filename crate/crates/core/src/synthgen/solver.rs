//! Implicit-explicit finite-difference stepping of
//! `u_t + div(V u) - div(D grad u) = f` on the unit box.
//!
//! Diffusion is implicit in flux form with `D` at cell midpoints; advection
//! (second-order upwind on `V u`) and the source are explicit. Reflective faces
//! use mirror ghost nodes, held faces pin the nodal value to zero.

use std::sync::Arc;

use super::{FieldSeries, Grid};
use crate::error::{config, Error, Result};
use crate::pdemodel::{face_condition, BoundaryCondition, TruthCase};

type AxisField = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;
type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Coefficients, forcing and boundary conditions for the truth solver.
/// Point arguments are `(x, y[, z], t)`; the initial field takes spatial points.
#[derive(Clone)]
pub struct ForwardProblem {
    pub dims: usize,
    pub velocity: AxisField,
    pub diffusion: AxisField,
    pub source: ScalarField,
    pub initial: Option<ScalarField>,
    /// Indexed `2 * axis + side`.
    pub faces: Vec<BoundaryCondition>,
    /// Diffusion does not depend on time, so the implicit operator is built once.
    pub steady_diffusion: bool,
}

impl std::fmt::Debug for ForwardProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardProblem")
            .field("dims", &self.dims)
            .field("faces", &self.faces)
            .finish_non_exhaustive()
    }
}

impl ForwardProblem {
    pub fn truth(case: TruthCase) -> Self {
        let dims = case.spatial_dims();
        Self {
            dims,
            velocity: Arc::new(move |a, p| case.velocity(a, p)),
            diffusion: Arc::new(move |a, p| case.diffusion(a, p)),
            source: Arc::new(move |p| case.source(p)),
            initial: None,
            faces: (0..2 * dims).map(|k| face_condition(dims, k / 2, k % 2)).collect(),
            steady_diffusion: true,
        }
    }

    fn held(&self, axis: usize, side: usize) -> bool {
        self.faces[2 * axis + side] == BoundaryCondition::Dirichlet
    }
}

struct Layout {
    grid: Grid,
    /// Node is pinned to zero.
    pinned: Vec<bool>,
    /// Row weight making the implicit operator symmetric.
    weight: Vec<f64>,
    ijk: Vec<Vec<usize>>,
    coords: Vec<Vec<f64>>,
}

impl Layout {
    fn new(problem: &ForwardProblem, grid: Grid) -> Self {
        let n = grid.n;
        let mut pinned = Vec::with_capacity(grid.n_nodes());
        let mut weight = Vec::with_capacity(grid.n_nodes());
        let mut ijk = Vec::with_capacity(grid.n_nodes());
        let mut coords = Vec::with_capacity(grid.n_nodes());
        for idx in 0..grid.n_nodes() {
            let m = grid.multi_index(idx);
            let mut pin = false;
            let mut w = 1.0;
            for (a, &i) in m.iter().enumerate() {
                for (side, at) in [(0, 0), (1, n)] {
                    if i == at {
                        if problem.held(a, side) {
                            pin = true;
                        } else {
                            w *= 0.5;
                        }
                    }
                }
            }
            pinned.push(pin);
            weight.push(if pin { 1.0 } else { w });
            coords.push(grid.coords(idx));
            ijk.push(m);
        }
        Self {
            grid,
            pinned,
            weight,
            ijk,
            coords,
        }
    }

    fn stride(&self, axis: usize) -> usize {
        self.grid.nodes_per_axis().pow(axis as u32)
    }

    /// Product of the reflective-face weights over every axis but `axis`.
    fn cross_weight(&self, idx: usize, axis: usize) -> f64 {
        let n = self.grid.n;
        self.ijk[idx]
            .iter()
            .enumerate()
            .filter(|&(a, &i)| a != axis && (i == 0 || i == n))
            .map(|_| 0.5)
            .product()
    }
}

/// Weighted edge coefficients of the implicit diffusion operator at one time level.
struct Operator {
    /// `(i, j, k)` with `j = i + stride`; both ends unpinned unless noted by the flags.
    edges: Vec<(usize, usize, f64, bool, bool)>,
    diag: Vec<f64>,
}

fn build_operator(layout: &Layout, problem: &ForwardProblem, t: f64) -> Operator {
    let g = &layout.grid;
    let h = g.h();
    let scale = g.dt / (h * h);
    let mut edges = Vec::new();
    let mut diag = layout.weight.clone();
    let mut mid = vec![0.0; g.dims + 1];
    for axis in 0..g.dims {
        let stride = layout.stride(axis);
        for i in 0..g.n_nodes() {
            if layout.ijk[i][axis] == g.n {
                continue;
            }
            let j = i + stride;
            let (pi, pj) = (layout.pinned[i], layout.pinned[j]);
            if pi && pj {
                continue;
            }
            for a in 0..g.dims {
                mid[a] = layout.coords[i][a];
            }
            mid[axis] += 0.5 * h;
            mid[g.dims] = t;
            let k = scale * (problem.diffusion)(axis, &mid) * layout.cross_weight(i, axis);
            if !pi {
                diag[i] += k;
            }
            if !pj {
                diag[j] += k;
            }
            edges.push((i, j, k, pi, pj));
        }
    }
    Operator { edges, diag }
}

impl Operator {
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for ((o, d), x) in out.iter_mut().zip(&self.diag).zip(u) {
            *o = d * x;
        }
        for &(i, j, k, pi, pj) in &self.edges {
            if !pi && !pj {
                out[i] -= k * u[j];
                out[j] -= k * u[i];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients; `x` holds the initial guess.
fn pcg(op: &Operator, b: &[f64], x: &mut [f64]) -> Result<()> {
    let n = b.len();
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut z: Vec<f64> = r.iter().zip(&op.diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..10 * n.max(100) {
        if dot(&r, &r).sqrt() <= 1e-13 * b_norm {
            return Ok(());
        }
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / op.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Numeric("conjugate gradients did not converge".into()))
}

/// `d/dx_a (V_a u)` at every unpinned node by second-order upwinding.
fn advection(layout: &Layout, problem: &ForwardProblem, u: &[f64], t: f64, out: &mut [f64]) {
    let g = &layout.grid;
    let n = g.n as isize;
    let h = g.h();
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut p = vec![0.0; g.dims + 1];
    p[g.dims] = t;
    let mut vel = vec![0.0; g.n_nodes()];
    for axis in 0..g.dims {
        for (idx, v) in vel.iter_mut().enumerate() {
            p[..g.dims].copy_from_slice(&layout.coords[idx]);
            *v = (problem.velocity)(axis, &p);
        }
        let stride = layout.stride(axis) as isize;
        let held = [problem.held(axis, 0), problem.held(axis, 1)];
        for idx in 0..g.n_nodes() {
            if layout.pinned[idx] {
                continue;
            }
            let i = layout.ijk[idx][axis] as isize;
            // q = V u at offset `o` along `axis`; across a reflective face u is
            // mirrored and V is taken at the ghost coordinate.
            let mut q = |o: isize| -> Option<f64> {
                let m = i + o;
                if (0..=n).contains(&m) {
                    let node = (idx as isize + o * stride) as usize;
                    return Some(vel[node] * u[node]);
                }
                let mirrored = if m < 0 {
                    if held[0] {
                        return None;
                    }
                    -m
                } else {
                    if held[1] {
                        return None;
                    }
                    2 * n - m
                };
                let node = (idx as isize + (mirrored - i) * stride) as usize;
                p[..g.dims].copy_from_slice(&layout.coords[idx]);
                p[axis] = m as f64 * h;
                Some((problem.velocity)(axis, &p) * u[node])
            };
            let q0 = vel[idx] * u[idx];
            let central = |q: &mut dyn FnMut(isize) -> Option<f64>| {
                (q(1).unwrap_or(0.0) - q(-1).unwrap_or(0.0)) / (2.0 * h)
            };
            out[idx] += if vel[idx] >= 0.0 {
                match (q(-1), q(-2)) {
                    (Some(a), Some(b)) => (3.0 * q0 - 4.0 * a + b) / (2.0 * h),
                    _ => central(&mut q),
                }
            } else {
                match (q(1), q(2)) {
                    (Some(a), Some(b)) => (-3.0 * q0 + 4.0 * a - b) / (2.0 * h),
                    _ => central(&mut q),
                }
            };
        }
    }
}

fn check_cfl(layout: &Layout, problem: &ForwardProblem) -> Result<()> {
    let g = &layout.grid;
    let mut vmax: f64 = 0.0;
    let mut p = vec![0.0; g.dims + 1];
    let probe_steps = g.n_steps.min(64);
    for s in 0..=probe_steps {
        let t = s as f64 / probe_steps as f64;
        for c in &layout.coords {
            p[..g.dims].copy_from_slice(c);
            p[g.dims] = t;
            for a in 0..g.dims {
                vmax = vmax.max((problem.velocity)(a, &p).abs());
            }
        }
    }
    let cfl = vmax * g.dt / g.h();
    if cfl > 1.0 {
        return Err(config(format!(
            "advective CFL number {cfl:.3} exceeds 1 (max |V| = {vmax:.4}, dt = {}, h = {})",
            g.dt,
            g.h()
        )));
    }
    Ok(())
}

/// Runs the truth solver from `t = 0` to `t = 1`.
pub fn solve_forward(problem: &ForwardProblem, grid: Grid) -> Result<FieldSeries> {
    if problem.dims != grid.dims || problem.faces.len() != 2 * grid.dims {
        return Err(config("problem and grid dimensions differ"));
    }
    let layout = Layout::new(problem, grid);
    check_cfl(&layout, problem)?;
    let nn = grid.n_nodes();
    let mut u: Vec<f64> = match &problem.initial {
        Some(f) => layout.coords.iter().map(|x| f(x)).collect(),
        None => vec![0.0; nn],
    };
    for (v, &pin) in u.iter_mut().zip(&layout.pinned) {
        if pin {
            *v = 0.0;
        }
    }
    let mut snapshots = Vec::with_capacity(grid.n_steps + 1);
    snapshots.push(u.clone());
    let mut adv = vec![0.0; nn];
    let mut rhs = vec![0.0; nn];
    let mut p = vec![0.0; grid.dims + 1];
    let steady = problem
        .steady_diffusion
        .then(|| build_operator(&layout, problem, 0.0));
    for step in 0..grid.n_steps {
        let t = grid.time(step);
        let t_next = grid.time(step + 1);
        advection(&layout, problem, &u, t, &mut adv);
        for i in 0..nn {
            if layout.pinned[i] {
                rhs[i] = 0.0;
                continue;
            }
            p[..grid.dims].copy_from_slice(&layout.coords[i]);
            p[grid.dims] = t;
            let explicit = u[i] + grid.dt * ((problem.source)(&p) - adv[i]);
            rhs[i] = layout.weight[i] * explicit;
        }
        match &steady {
            Some(op) => pcg(op, &rhs, &mut u)?,
            None => pcg(&build_operator(&layout, problem, t_next), &rhs, &mut u)?,
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite solution at step {}", step + 1)));
        }
        snapshots.push(u.clone());
    }
    FieldSeries::new(grid, snapshots)
}

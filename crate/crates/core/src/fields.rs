//! Node-centred scalar and vector fields on the unit square.
//!
//! Node `(i, j)` sits at `(i·h_x, j·h_y)` with `h = 1/(n-1)`, so boundary
//! nodes lie on the edges of `[0,1]²`. Values are stored with flat index
//! `i·n_y + j`; every reduction walks that order so results are bit-stable.
//!
//! Derivatives use central differences in the interior and second-order
//! one-sided differences on the boundary. Both are exact on quadratics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SepdaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
}

impl Grid {
    /// Needs at least two nodes per axis so the spacing is defined.
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(SepdaError::InvalidGrid(format!(
                "need at least 2 nodes per axis, got {nx}x{ny}"
            )));
        }
        Ok(Self { nx, ny })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / (self.ny - 1) as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    /// Coordinates of every node in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.nx).flat_map(move |i| (0..self.ny).map(move |j| self.coords(i, j)))
    }

    /// Difference stencils need three nodes per axis.
    pub fn check_stencil(&self) -> Result<()> {
        if self.nx < 3 || self.ny < 3 {
            return Err(SepdaError::InvalidGrid(format!(
                "difference stencils need at least 3 nodes per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        Ok(())
    }

    /// True when `(i, j)` is at least `margin` nodes away from every edge.
    pub fn is_interior(&self, i: usize, j: usize, margin: usize) -> bool {
        i >= margin && j >= margin && i + margin < self.nx && j + margin < self.ny
    }

    fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(SepdaError::ShapeMismatch(format!(
                "grid {}x{} vs {}x{}",
                self.nx, self.ny, other.nx, other.ny
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(SepdaError::ShapeMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SepdaError::NonFinite("scalar field values".into()));
        }
        Ok(Self { grid, data })
    }

    pub(crate) fn from_raw(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Self { grid, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self::from_raw(grid, vec![value; grid.len()])
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_raw(grid, grid.nodes().map(|(x, y)| f(x, y)).collect())
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.index(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self += a·other`
    pub fn axpy(&mut self, a: f64, other: &ScalarField) {
        debug_assert_eq!(self.grid, other.grid);
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn sub(&self, other: &ScalarField) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self::from_raw(
            self.grid,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self::from_raw(
            self.grid,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Arithmetic mean of equally shaped fields, summed in slice order.
    pub fn mean_of(fields: &[ScalarField]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| SepdaError::ShapeMismatch("mean of zero fields".into()))?;
        let mut acc = vec![0.0; first.grid.len()];
        for f in fields {
            first.grid.ensure_same(&f.grid)?;
            for (a, v) in acc.iter_mut().zip(&f.data) {
                *a += v;
            }
        }
        let inv = 1.0 / fields.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(Self::from_raw(first.grid, acc))
    }
}

/// Two-component field; components are stored as separate planes.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    comps: [Vec<f64>; 2],
}

impl VectorField {
    pub fn new(grid: Grid, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != grid.len() || y.len() != grid.len() {
            return Err(SepdaError::ShapeMismatch(format!(
                "expected {} values per component, got {} and {}",
                grid.len(),
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(SepdaError::NonFinite("vector field values".into()));
        }
        Ok(Self { grid, comps: [x, y] })
    }

    pub(crate) fn from_raw(grid: Grid, x: Vec<f64>, y: Vec<f64>) -> Self {
        debug_assert!(x.len() == grid.len() && y.len() == grid.len());
        Self { grid, comps: [x, y] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, [0.0, 0.0])
    }

    pub fn constant(grid: Grid, v: [f64; 2]) -> Self {
        Self::from_raw(grid, vec![v[0]; grid.len()], vec![v[1]; grid.len()])
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let (x, y) = grid.nodes().map(|(x, y)| f(x, y)).map(|v| (v[0], v[1])).unzip();
        Self::from_raw(grid, x, y)
    }

    /// Component `c` is `s`, the other one is zero.
    pub fn along_axis(s: &ScalarField, c: usize) -> Self {
        let mut v = Self::zeros(s.grid);
        v.comps[c].copy_from_slice(&s.data);
        v
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    pub fn component_field(&self, c: usize) -> ScalarField {
        ScalarField::from_raw(self.grid, self.comps[c].clone())
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        let k = self.grid.index(i, j);
        [self.comps[0][k], self.comps[1][k]]
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_raw(
            self.grid,
            self.comps[0].iter().map(|v| c * v).collect(),
            self.comps[1].iter().map(|v| c * v).collect(),
        )
    }

    /// `self += a·other`
    pub fn axpy(&mut self, a: f64, other: &VectorField) {
        debug_assert_eq!(self.grid, other.grid);
        for c in 0..2 {
            for (s, o) in self.comps[c].iter_mut().zip(&other.comps[c]) {
                *s += a * o;
            }
        }
    }

    pub fn sub(&self, other: &VectorField) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let mut out = self.clone();
        out.axpy(-1.0, other);
        Ok(out)
    }

    pub fn add(&self, other: &VectorField) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let mut out = self.clone();
        out.axpy(1.0, other);
        Ok(out)
    }

    /// Pointwise `self · other`.
    pub fn dot(&self, other: &VectorField) -> Result<ScalarField> {
        self.grid.ensure_same(&other.grid)?;
        let (a, b) = (&self.comps, &other.comps);
        Ok(ScalarField::from_raw(
            self.grid,
            (0..self.grid.len())
                .map(|k| a[0][k] * b[0][k] + a[1][k] * b[1][k])
                .collect(),
        ))
    }

    /// Pointwise Euclidean norm.
    pub fn norm(&self) -> ScalarField {
        let (x, y) = (&self.comps[0], &self.comps[1]);
        ScalarField::from_raw(
            self.grid,
            x.iter().zip(y).map(|(a, b)| a.hypot(*b)).collect(),
        )
    }
}

/// Per-node 2×2 matrix field; `entry(r, c)` holds `∂_c v_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField {
    grid: Grid,
    d: [[Vec<f64>; 2]; 2],
}

impl JacobianField {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn entry(&self, row: usize, col: usize) -> &[f64] {
        &self.d[row][col]
    }

    pub fn at(&self, i: usize, j: usize) -> [[f64; 2]; 2] {
        let k = self.grid.index(i, j);
        [
            [self.d[0][0][k], self.d[0][1][k]],
            [self.d[1][0][k], self.d[1][1][k]],
        ]
    }

    pub fn trace(&self) -> ScalarField {
        ScalarField::from_raw(
            self.grid,
            self.d[0][0].iter().zip(&self.d[1][1]).map(|(a, b)| a + b).collect(),
        )
    }
}

/// Derivative of `src` along `axis` (0 = x, 1 = y), written into `out`.
pub(crate) fn diff_axis(src: &[f64], grid: Grid, axis: usize, out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    debug_assert!(nx >= 3 && ny >= 3);
    if axis == 1 {
        let inv = 0.5 / grid.hy();
        for (row, orow) in src.chunks_exact(ny).zip(out.chunks_exact_mut(ny)) {
            orow[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) * inv;
            for j in 1..ny - 1 {
                orow[j] = (row[j + 1] - row[j - 1]) * inv;
            }
            orow[ny - 1] = (3.0 * row[ny - 1] - 4.0 * row[ny - 2] + row[ny - 3]) * inv;
        }
    } else {
        let inv = 0.5 / grid.hx();
        let row = |i: usize| &src[i * ny..(i + 1) * ny];
        for i in 0..nx {
            let orow = &mut out[i * ny..(i + 1) * ny];
            if i == 0 {
                let (r0, r1, r2) = (row(0), row(1), row(2));
                for j in 0..ny {
                    orow[j] = (-3.0 * r0[j] + 4.0 * r1[j] - r2[j]) * inv;
                }
            } else if i == nx - 1 {
                let (r0, r1, r2) = (row(nx - 1), row(nx - 2), row(nx - 3));
                for j in 0..ny {
                    orow[j] = (3.0 * r0[j] - 4.0 * r1[j] + r2[j]) * inv;
                }
            } else {
                let (rp, rm) = (row(i + 1), row(i - 1));
                for j in 0..ny {
                    orow[j] = (rp[j] - rm[j]) * inv;
                }
            }
        }
    }
}

pub(crate) fn diff_axis_vec(src: &[f64], grid: Grid, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    diff_axis(src, grid, axis, &mut out);
    out
}

pub fn gradient(f: &ScalarField) -> Result<VectorField> {
    f.grid.check_stencil()?;
    Ok(VectorField::from_raw(
        f.grid,
        diff_axis_vec(&f.data, f.grid, 0),
        diff_axis_vec(&f.data, f.grid, 1),
    ))
}

pub fn jacobian(v: &VectorField) -> Result<JacobianField> {
    v.grid.check_stencil()?;
    let g = v.grid;
    let row = |c: usize| {
        [
            diff_axis_vec(&v.comps[c], g, 0),
            diff_axis_vec(&v.comps[c], g, 1),
        ]
    };
    Ok(JacobianField { grid: g, d: [row(0), row(1)] })
}

pub fn divergence(v: &VectorField) -> Result<ScalarField> {
    Ok(jacobian(v)?.trace())
}

/// Bilinear interpolation; points outside the unit square are clamped.
pub fn sample_bilinear(f: &ScalarField, points: &[(f64, f64)]) -> Vec<f64> {
    let g = f.grid;
    let locate = |t: f64, n: usize| {
        let s = t.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (s.floor() as usize).min(n - 2);
        (i, s - i as f64)
    };
    points
        .iter()
        .map(|&(x, y)| {
            let (i, fx) = locate(x, g.nx);
            let (j, fy) = locate(y, g.ny);
            let v00 = f.get(i, j);
            let v10 = f.get(i + 1, j);
            let v01 = f.get(i, j + 1);
            let v11 = f.get(i + 1, j + 1);
            (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)
        })
        .collect()
}

fn trapezoid_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n - 1 {
        0.5
    } else {
        1.0
    }
}

fn weighted_sum(grid: Grid, mut term: impl FnMut(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..grid.nx {
        let wx = trapezoid_weight(i, grid.nx);
        let mut row = 0.0;
        for j in 0..grid.ny {
            row += trapezoid_weight(j, grid.ny) * term(grid.index(i, j));
        }
        total += wx * row;
    }
    total * grid.cell_area()
}

/// Trapezoidal L² inner product of two fields on the same grid.
pub trait InnerL2 {
    fn inner_l2(&self, other: &Self) -> Result<f64>;
}

impl InnerL2 for ScalarField {
    fn inner_l2(&self, other: &Self) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(weighted_sum(self.grid, |k| self.data[k] * other.data[k]))
    }
}

impl InnerL2 for VectorField {
    fn inner_l2(&self, other: &Self) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let (a, b) = (&self.comps, &other.comps);
        Ok(weighted_sum(self.grid, |k| a[0][k] * b[0][k] + a[1][k] * b[1][k]))
    }
}

pub fn inner_l2<F: InnerL2>(a: &F, b: &F) -> Result<f64> {
    a.inner_l2(b)
}

/// Trapezoidal integral of a scalar field over the unit square.
pub fn integrate(f: &ScalarField) -> f64 {
    weighted_sum(f.grid, |k| f.data[k])
}

//! Parametric noise-field families.
//!
//! Every family is built from scalar *shapes* (one per lattice centre, or one
//! per sine mode `(n, m)`), each carrying one amplitude. A shape spawns two
//! noise fields, one along each axis, so field `α` is shape `α / 2` along
//! axis `α % 2`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SepdaError};
use crate::fields::{jacobian, Grid, JacobianField, ScalarField, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianLattice,
    BsplineLattice,
    Sinusoidal,
}

/// Centres of the three-field fixture used for misspecification runs.
pub const THREE_FIELD_CENTERS: [[f64; 2]; 3] = [[0.617, 0.447], [0.406, 0.681], [0.314, 0.251]];

/// Default widths: Gaussian hexagonal uses τ² = 0.008.
pub const GAUSSIAN_HEX_WIDTH_SQ: f64 = 0.008;
pub const BSPLINE_WIDTH: f64 = 0.15;
pub const GAUSSIAN_SQUARE_WIDTH: f64 = 0.1;
pub const GAUSSIAN_SQUARE_FIXED_WIDTH_SQ: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    family: Family,
    #[serde(default)]
    centers: Vec<[f64; 2]>,
    #[serde(default)]
    width: f64,
    #[serde(default)]
    max_frequency: usize,
    amplitudes: Vec<f64>,
    /// Multiply Gaussian profiles by `(2π)^{-1/2}` (unit-mass 1D kernel)
    /// instead of using a unit peak.
    #[serde(default)]
    normalized_gaussian: bool,
}

impl NoiseModel {
    pub fn lattice(
        family: Family,
        centers: Vec<[f64; 2]>,
        width: f64,
        amplitudes: Vec<f64>,
    ) -> Result<Self> {
        if family == Family::Sinusoidal {
            return Err(SepdaError::Config("sinusoidal family has no lattice".into()));
        }
        let model = Self {
            family,
            centers,
            width,
            max_frequency: 0,
            amplitudes,
            normalized_gaussian: false,
        };
        model.validate()?;
        Ok(model)
    }

    /// Coefficients `c_nm` in `(n, m)` order, `n, m = 1..=q`.
    pub fn sinusoidal(max_frequency: usize, coefficients: Vec<f64>) -> Result<Self> {
        let model = Self {
            family: Family::Sinusoidal,
            centers: Vec::new(),
            width: 0.0,
            max_frequency,
            amplitudes: coefficients,
            normalized_gaussian: false,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_normalized_gaussian(mut self, on: bool) -> Self {
        self.normalized_gaussian = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Sinusoidal => {
                if self.max_frequency == 0 {
                    return Err(SepdaError::Config("max_frequency must be at least 1".into()));
                }
            }
            _ => {
                if self.centers.is_empty() {
                    return Err(SepdaError::Config("lattice needs at least one centre".into()));
                }
                if !(self.width > 0.0 && self.width.is_finite()) {
                    return Err(SepdaError::Config(format!("width {} must be positive", self.width)));
                }
                if let Some(c) = self
                    .centers
                    .iter()
                    .find(|c| !(c[0] > 0.0 && c[0] < 1.0 && c[1] > 0.0 && c[1] < 1.0))
                {
                    return Err(SepdaError::Config(format!("centre {c:?} outside (0,1)²")));
                }
            }
        }
        if self.amplitudes.len() != self.shape_count() {
            return Err(SepdaError::ShapeMismatch(format!(
                "{} amplitudes for {} shapes",
                self.amplitudes.len(),
                self.shape_count()
            )));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(SepdaError::NonFinite("noise amplitudes".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn max_frequency(&self) -> usize {
        self.max_frequency
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn shape_count(&self) -> usize {
        match self.family {
            Family::Sinusoidal => self.max_frequency * self.max_frequency,
            _ => self.centers.len(),
        }
    }

    pub fn field_count(&self) -> usize {
        2 * self.shape_count()
    }

    /// `(shape, axis)` for field `alpha`.
    pub fn field_index(&self, alpha: usize) -> Result<(usize, usize)> {
        if alpha >= self.field_count() {
            return Err(SepdaError::IndexOutOfRange { index: alpha, len: self.field_count() });
        }
        Ok((alpha / 2, alpha % 2))
    }

    pub fn with_amplitudes(&self, amplitudes: Vec<f64>) -> Result<Self> {
        let model = Self { amplitudes, ..self.clone() };
        model.validate()?;
        Ok(model)
    }

    pub fn with_width(&self, width: f64) -> Result<Self> {
        let model = Self { width, ..self.clone() };
        model.validate()?;
        Ok(model)
    }

    pub fn is_silent(&self) -> bool {
        self.amplitudes.iter().all(|&a| a == 0.0)
    }

    /// Unit-amplitude profile of `shape` at `(x, y)`.
    pub fn profile(&self, shape: usize, x: f64, y: f64) -> f64 {
        match self.family {
            Family::Sinusoidal => {
                let q = self.max_frequency;
                let (n, m) = (shape / q + 1, shape % q + 1);
                (n as f64 * PI * x).sin() * (m as f64 * PI * y).sin()
            }
            Family::GaussianLattice => {
                let [cx, cy] = self.centers[shape];
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                let peak = if self.normalized_gaussian { (2.0 * PI).sqrt().recip() } else { 1.0 };
                peak * (-r2 / (2.0 * self.width * self.width)).exp()
            }
            Family::BsplineLattice => {
                let [cx, cy] = self.centers[shape];
                cubic_bspline(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / self.width)
            }
        }
    }

    pub fn profile_field(&self, shape: usize, grid: Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x, y| self.profile(shape, x, y))
    }

    /// `σ_α` sampled on `grid`.
    pub fn eval_noise_field(&self, alpha: usize, grid: Grid) -> Result<VectorField> {
        let (shape, axis) = self.field_index(alpha)?;
        let a = self.amplitudes[shape];
        Ok(VectorField::along_axis(
            &ScalarField::from_fn(grid, |x, y| a * self.profile(shape, x, y)),
            axis,
        ))
    }

    /// All fields with derivative data, ready for the stochastic and moment
    /// right-hand sides. Each profile is sampled once and shared by its two
    /// axis fields.
    pub fn fields(&self, grid: Grid) -> Result<NoiseFields> {
        let mut out = Vec::with_capacity(self.field_count());
        for shape in 0..self.shape_count() {
            let a = self.amplitudes[shape];
            let p = ScalarField::from_fn(grid, |x, y| a * self.profile(shape, x, y));
            out.push(VectorField::along_axis(&p, 0));
            out.push(VectorField::along_axis(&p, 1));
        }
        NoiseFields::new(grid, out)
    }

    /// `‖Σ_α σ_α‖` pointwise.
    pub fn norm_field(&self, grid: Grid) -> ScalarField {
        let mut sum = VectorField::zeros(grid);
        for alpha in 0..self.field_count() {
            let f = self.eval_noise_field(alpha, grid).expect("alpha in range");
            sum.axpy(1.0, &f);
        }
        sum.norm()
    }
}

/// Cubic B-spline `β₃`, support `|x| < 2`.
pub fn cubic_bspline(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// One evaluated noise field plus its Jacobian. `axis` is set when the
/// field points along a single coordinate axis everywhere, which lets the
/// correction terms skip the vanishing component.
#[derive(Clone, Debug)]
pub struct NoiseField {
    pub(crate) field: VectorField,
    pub(crate) jac: JacobianField,
    pub(crate) axis: Option<usize>,
}

impl NoiseField {
    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn axis(&self) -> Option<usize> {
        self.axis
    }
}

/// The noise fields `σ_1..σ_p` of a model, sampled on one grid.
#[derive(Clone, Debug)]
pub struct NoiseFields {
    grid: Grid,
    items: Vec<NoiseField>,
}

impl NoiseFields {
    pub fn new(grid: Grid, fields: Vec<VectorField>) -> Result<Self> {
        let items = fields
            .into_iter()
            .map(|field| {
                if field.grid() != grid {
                    return Err(SepdaError::ShapeMismatch("noise field grid".into()));
                }
                let zero = |c: usize| field.component(c).iter().all(|&v| v == 0.0);
                let axis = match (zero(0), zero(1)) {
                    (false, true) => Some(0),
                    (true, false) => Some(1),
                    _ => None,
                };
                let jac = jacobian(&field)?;
                Ok(NoiseField { field, jac, axis })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, items })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NoiseField> {
        self.items.iter()
    }

    pub fn get(&self, alpha: usize) -> Result<&NoiseField> {
        self.items
            .get(alpha)
            .ok_or(SepdaError::IndexOutOfRange { index: alpha, len: self.items.len() })
    }

    /// True when every field vanishes identically.
    pub fn is_silent(&self) -> bool {
        self.items.iter().all(|f| f.field.is_zero())
    }

    /// `Σ_α w_α σ_α`
    pub fn combine(&self, weights: &[f64]) -> Result<VectorField> {
        if weights.len() != self.items.len() {
            return Err(SepdaError::ShapeMismatch(format!(
                "{} weights for {} noise fields",
                weights.len(),
                self.items.len()
            )));
        }
        let mut out = VectorField::zeros(self.grid);
        for (f, &w) in self.items.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            match f.axis {
                Some(c) => {
                    for (o, v) in out.component_mut(c).iter_mut().zip(f.field.component(c)) {
                        *o += w * v;
                    }
                }
                None => out.axpy(w, &f.field),
            }
        }
        Ok(out)
    }
}

pub fn square_lattice(rows: usize, cols: usize) -> Result<Vec<[f64; 2]>> {
    if rows == 0 || cols == 0 {
        return Err(SepdaError::Config(format!("square lattice {rows}x{cols} is empty")));
    }
    let (dx, dy) = (1.0 / (cols + 1) as f64, 1.0 / (rows + 1) as f64);
    Ok((1..=cols)
        .flat_map(|i| (1..=rows).map(move |j| [i as f64 * dx, j as f64 * dy]))
        .collect())
}

/// Rows of points with spacing `dx`, consecutive rows `dy` apart, every row
/// centred on `x = 0.5` and the block centred on `y = 0.5`. Rows whose
/// counts differ by one come out shifted by `dx/2` against each other.
pub fn hexagonal_lattice(row_counts: &[usize], dx: f64, dy: f64) -> Vec<[f64; 2]> {
    let rows = row_counts.len() as f64;
    row_counts
        .iter()
        .enumerate()
        .flat_map(|(r, &count)| {
            let y = 0.5 + (r as f64 - (rows - 1.0) / 2.0) * dy;
            (0..count).map(move |c| [0.5 + (c as f64 - (count as f64 - 1.0) / 2.0) * dx, y])
        })
        .collect()
}

/// The 14-point lattice: rows of 3, 4, 4, 3 points.
pub fn hexagonal_lattice_14() -> Vec<[f64; 2]> {
    hexagonal_lattice(&[3, 4, 4, 3], 0.23, 0.2)
}

/// `λᵢ = 0.005 + 0.000625·(i + 2 sin i)` for `i = 1..=p`; B-spline
/// amplitudes are a fifth of that.
pub fn ground_truth_amplitudes(family: Family, p: usize) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(SepdaError::Config("need at least one amplitude".into()));
    }
    let scale = match family {
        Family::GaussianLattice => 1.0,
        Family::BsplineLattice => 0.2,
        Family::Sinusoidal => {
            return Err(SepdaError::Config(
                "sinusoidal ground truth comes from sine_coefficients".into(),
            ))
        }
    };
    Ok((1..=p)
        .map(|i| {
            let i = i as f64;
            scale * (0.005 + 0.000625 * (i + 2.0 * i.sin()))
        })
        .collect())
}

/// `f(x, y) = x y² (1-x)(1-y) cos 5x cos 5y`, the sinusoidal ground truth.
pub fn sine_target(x: f64, y: f64) -> f64 {
    x * y * y * (1.0 - x) * (1.0 - y) * (5.0 * x).cos() * (5.0 * y).cos()
}

/// `c_nm = 4 ∫∫ f sin(nπx) sin(mπy)`, trapezoidal on the field's grid,
/// returned in `(n, m)` order.
pub fn sine_coefficients(f: &ScalarField, q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(SepdaError::Config("max frequency must be at least 1".into()));
    }
    let g = f.grid();
    let sines = |n: usize, count: usize, h: f64| -> Vec<f64> {
        (0..count).map(|i| (n as f64 * PI * i as f64 * h).sin()).collect()
    };
    let mut out = Vec::with_capacity(q * q);
    for n in 1..=q {
        let sx = sines(n, g.nx(), g.hx());
        for m in 1..=q {
            let sy = sines(m, g.ny(), g.hy());
            let weighted = ScalarField::from_raw(
                g,
                (0..g.len())
                    .map(|k| f.values()[k] * sx[k / g.ny()] * sy[k % g.ny()])
                    .collect(),
            );
            out.push(4.0 * crate::fields::integrate(&weighted));
        }
    }
    Ok(out)
}

/// [`sine_coefficients`] of a closed-form function on a 257×257 grid.
pub fn sine_coefficients_of(f: impl Fn(f64, f64) -> f64, q: usize) -> Result<Vec<f64>> {
    let g = Grid::square(257)?;
    sine_coefficients(&ScalarField::from_fn(g, f), q)
}

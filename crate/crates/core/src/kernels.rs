//! Multi-Gaussian smoothing `u = k * m`, the inverse of the metric operator.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SepdaError};
use crate::fields::{Grid, VectorField};

/// `k(x) = Σ wᵢ exp(-|x|²/σᵢ²)` as a list of `(weight, width)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct KernelSpec {
    terms: Vec<(f64, f64)>,
}

impl KernelSpec {
    pub fn new(terms: Vec<(f64, f64)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(SepdaError::Config("kernel needs at least one term".into()));
        }
        for &(w, s) in &terms {
            if !(w > 0.0 && w.is_finite() && s > 0.0 && s.is_finite()) {
                return Err(SepdaError::Config(format!(
                    "kernel term (weight {w}, width {s}) must have positive finite entries"
                )));
            }
        }
        Ok(Self { terms })
    }

    pub fn single(weight: f64, width: f64) -> Result<Self> {
        Self::new(vec![(weight, width)])
    }

    pub fn terms(&self) -> &[(f64, f64)] {
        &self.terms
    }

    /// Continuum integral `∫ k dx = Σ wᵢ π σᵢ²` over the plane.
    pub fn mass(&self) -> f64 {
        self.terms
            .iter()
            .map(|&(w, s)| w * std::f64::consts::PI * s * s)
            .sum()
    }

    #[inline]
    fn eval_unchecked(&self, r2: f64) -> f64 {
        self.terms.iter().map(|&(w, s)| w * (-r2 / (s * s)).exp()).sum()
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            terms: vec![(1.0 / 3.0, 0.05), (1.0 / 3.0, 0.1), (1.0 / 3.0, 0.2)],
        }
    }
}

impl TryFrom<Vec<(f64, f64)>> for KernelSpec {
    type Error = SepdaError;

    fn try_from(terms: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<KernelSpec> for Vec<(f64, f64)> {
    fn from(k: KernelSpec) -> Self {
        k.terms
    }
}

pub fn kernel_eval(spec: &KernelSpec, r2: f64) -> Result<f64> {
    if !(r2 >= 0.0) {
        return Err(SepdaError::Domain(format!("squared distance {r2} is negative")));
    }
    Ok(spec.eval_unchecked(r2))
}

/// Smallest `2^a 3^b` not below `n`.
fn fast_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p3 = 1;
    while p3 < best {
        let mut v = p3;
        while v < n {
            v *= 2;
        }
        best = best.min(v);
        p3 *= 3;
    }
    best
}

/// FFT convolution with a kernel fixed to one grid.
///
/// Plans and the kernel spectrum are built once and only read afterwards,
/// so one `Smoother` can serve any number of threads.
pub struct Smoother {
    spec: KernelSpec,
    grid: Grid,
    px: usize,
    py: usize,
    spectrum: Vec<Complex<f64>>,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Smoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smoother")
            .field("spec", &self.spec)
            .field("grid", &self.grid)
            .field("padded", &(self.px, self.py))
            .finish()
    }
}

impl Smoother {
    pub fn new(spec: &KernelSpec, grid: Grid) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let px = fast_len(2 * nx - 1);
        let py = fast_len(2 * ny - 1);
        let mut planner = FftPlanner::new();
        let fwd_x = planner.plan_fft_forward(px);
        let fwd_y = planner.plan_fft_forward(py);
        let inv_x = planner.plan_fft_inverse(px);
        let inv_y = planner.plan_fft_inverse(py);

        // Kernel sampled at every node offset, wrapped so negative offsets
        // land at the end of each axis. The cell area turns the discrete
        // sum into a quadrature of the continuous convolution.
        let (hx, hy) = (grid.hx(), grid.hy());
        let area = grid.cell_area();
        let mut kern = vec![Complex::new(0.0, 0.0); px * py];
        let offset = |a: usize, n: usize, p: usize| -> Option<f64> {
            if a < n {
                Some(a as f64)
            } else if a > p - n {
                Some(a as f64 - p as f64)
            } else {
                None
            }
        };
        for a in 0..px {
            let Some(dx) = offset(a, nx, px) else { continue };
            for b in 0..py {
                let Some(dy) = offset(b, ny, py) else { continue };
                let r2 = (dx * hx).powi(2) + (dy * hy).powi(2);
                kern[a * py + b] = Complex::new(spec.eval_unchecked(r2) * area, 0.0);
            }
        }
        let mut this = Self {
            spec: spec.clone(),
            grid,
            px,
            py,
            spectrum: Vec::new(),
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
        };
        this.forward(&mut kern, px);
        this.spectrum = kern;
        this
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// 2D forward transform; only the first `rows` rows may be nonzero.
    fn forward(&self, buf: &mut [Complex<f64>], rows: usize) {
        let (px, py) = (self.px, self.py);
        for row in buf.chunks_exact_mut(py).take(rows) {
            self.fwd_y.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); px];
        for b in 0..py {
            for a in 0..px {
                col[a] = buf[a * py + b];
            }
            self.fwd_x.process(&mut col);
            for a in 0..px {
                buf[a * py + b] = col[a];
            }
        }
    }

    /// Convolve both components at once: they ride in the real and
    /// imaginary parts, which the real kernel keeps apart.
    pub fn smooth(&self, m: &VectorField) -> Result<VectorField> {
        if m.grid() != self.grid {
            return Err(SepdaError::ShapeMismatch(format!(
                "smoother built for {}x{}, field is {}x{}",
                self.grid.nx(),
                self.grid.ny(),
                m.grid().nx(),
                m.grid().ny()
            )));
        }
        let (nx, ny, px, py) = (self.grid.nx(), self.grid.ny(), self.px, self.py);
        let (mx, my) = (m.component(0), m.component(1));
        let mut buf = vec![Complex::new(0.0, 0.0); px * py];
        for i in 0..nx {
            let wx = edge_weight(i, nx);
            for j in 0..ny {
                let k = i * ny + j;
                let w = wx * edge_weight(j, ny);
                buf[i * py + j] = Complex::new(w * mx[k], w * my[k]);
            }
        }
        self.forward(&mut buf, nx);
        for (z, s) in buf.iter_mut().zip(&self.spectrum) {
            *z *= s;
        }
        let mut col = vec![Complex::new(0.0, 0.0); px];
        for b in 0..py {
            for a in 0..px {
                col[a] = buf[a * py + b];
            }
            self.inv_x.process(&mut col);
            for a in 0..nx {
                buf[a * py + b] = col[a];
            }
        }
        let norm = 1.0 / (px * py) as f64;
        let mut ux = vec![0.0; nx * ny];
        let mut uy = vec![0.0; nx * ny];
        for (i, row) in buf.chunks_exact_mut(py).take(nx).enumerate() {
            self.inv_y.process(row);
            for j in 0..ny {
                ux[i * ny + j] = row[j].re * norm;
                uy[i * ny + j] = row[j].im * norm;
            }
        }
        Ok(VectorField::from_raw(self.grid, ux, uy))
    }
}

/// Trapezoid weight along one axis. Weighting the source this way makes
/// the discrete convolution self-adjoint in the trapezoidal L² pairing.
#[inline]
fn edge_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// One-off smoothing; builds a fresh [`Smoother`] for the field's grid.
pub fn smooth(spec: &KernelSpec, m: &VectorField) -> Result<VectorField> {
    Smoother::new(spec, m.grid()).smooth(m)
}

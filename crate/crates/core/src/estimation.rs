//! Moment-matching estimation of noise amplitudes, and shooting
//! registration over a handful of control-point momenta.
//!
//! Both problems are small (tens of parameters), so gradients are central
//! finite differences whose probes run concurrently, and the optimizer is
//! Adam on parameters divided by their starting magnitude.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epdiff::{kinetic_energy, shoot, State};
use crate::error::{Result, SepdaError};
use crate::fields::{inner_l2, Grid, ScalarField, VectorField};
use crate::kernels::Smoother;
use crate::moments::{integrate_moments, MomentState};
use crate::noise_models::NoiseModel;
use crate::sepda_sde::SampleSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Ssd,
    #[default]
    Ncc,
}

impl Similarity {
    pub fn eval(self, a: &ScalarField, b: &ScalarField) -> Result<f64> {
        match self {
            Similarity::Ssd => ssd(a, b),
            Similarity::Ncc => ncc_distance(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Similarity::Ssd => "ssd",
            Similarity::Ncc => "ncc",
        }
    }
}

/// `‖a - b‖²` in L².
pub fn ssd(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    let d = a.sub(b)?;
    inner_l2(&d, &d)
}

/// `1 - NCC²` with `NCC = ⟨a,b⟩ / (‖a‖‖b‖)`, no mean removal.
///
/// Evaluated as `‖â - c b̂‖²` for the unit fields `â, b̂` and `c = ⟨â,b̂⟩`,
/// which keeps relative precision when the two images nearly coincide.
pub fn ncc_distance(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    let na = inner_l2(a, a)?.sqrt();
    let nb = inner_l2(b, b)?.sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SepdaError::DegenerateSimilarity("NCC of an all-zero image".into()));
    }
    let ua = a.scaled(1.0 / na);
    let ub = b.scaled(1.0 / nb);
    let c = inner_l2(&ua, &ub)?;
    let mut r = ua;
    r.axpy(-c, &ub);
    inner_l2(&r, &r)
}

/// A scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> Result<f64>;

    /// Box constraints applied when the optimizer config does not set any.
    fn bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

/// Wraps a closure as an [`Objective`]; used for surrogate losses.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        (self.f)(theta)
    }
}

/// Which parts of a [`NoiseModel`] are free.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Append one shared width after the amplitudes.
    #[serde(default)]
    pub free_width: bool,
}

impl ParamLayout {
    pub fn dim(&self, model: &NoiseModel) -> usize {
        model.shape_count() + usize::from(self.free_width)
    }

    pub fn theta_of(&self, model: &NoiseModel) -> Vec<f64> {
        let mut t = model.amplitudes().to_vec();
        if self.free_width {
            t.push(model.width());
        }
        t
    }

    pub fn apply(&self, model: &NoiseModel, theta: &[f64]) -> Result<NoiseModel> {
        if theta.len() != self.dim(model) {
            return Err(SepdaError::ShapeMismatch(format!(
                "theta has {} entries, model expects {}",
                theta.len(),
                self.dim(model)
            )));
        }
        let p = model.shape_count();
        let m = model.with_amplitudes(theta[..p].to_vec())?;
        if self.free_width {
            m.with_width(theta[p])
        } else {
            Ok(m)
        }
    }
}

/// Smallest width the optimizer may propose.
pub const MIN_WIDTH: f64 = 1e-3;

/// Everything the moment loss `ℓ(θ)` needs besides `θ`.
pub struct MomentFixture<'a> {
    pub start: MomentState,
    pub model: NoiseModel,
    pub layout: ParamLayout,
    pub smoother: &'a Smoother,
    pub steps: usize,
    pub target: ScalarField,
    pub similarity: Similarity,
}

impl<'a> MomentFixture<'a> {
    /// Fixture whose target is the empirical mean of `samples`.
    pub fn from_samples(
        start: MomentState,
        model: NoiseModel,
        layout: ParamLayout,
        smoother: &'a Smoother,
        steps: usize,
        samples: &SampleSet,
        similarity: Similarity,
    ) -> Result<Self> {
        let target = samples.mean_image()?;
        if target.grid() != start.mean_image.grid() || smoother.grid() != target.grid() {
            return Err(SepdaError::ShapeMismatch("sample grid differs from the start state".into()));
        }
        Ok(Self { start, model, layout, smoother, steps, target, similarity })
    }

    pub fn grid(&self) -> Grid {
        self.target.grid()
    }

    /// `⟨I₁⟩(θ)`, the predicted mean endpoint image.
    pub fn predicted_mean(&self, theta: &[f64]) -> Result<ScalarField> {
        let model = self.layout.apply(&self.model, theta)?;
        let noise = model.fields(self.grid())?;
        Ok(integrate_moments(&self.start, &noise, self.smoother, self.steps)?.mean_image)
    }
}

impl Objective for MomentFixture<'_> {
    fn dim(&self) -> usize {
        self.layout.dim(&self.model)
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let eval = || {
            let predicted = self.predicted_mean(theta)?;
            self.similarity.eval(&predicted, &self.target)
        };
        eval().map_err(|e| match e {
            SepdaError::ShapeMismatch(_) | SepdaError::Config(_) => e,
            other => SepdaError::Loss { theta: theta.to_vec(), source: Box::new(other) },
        })
    }

    fn bounds(&self) -> Option<Vec<(f64, f64)>> {
        let mut b = vec![(0.0, f64::INFINITY); self.model.shape_count()];
        if self.layout.free_width {
            b.push((MIN_WIDTH, f64::INFINITY));
        }
        Some(b)
    }
}

/// Central differences with `δⱼ = fd_step·max(|θⱼ|, floor)`.
pub fn fd_gradient<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    fd_step: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(obj, theta, fd_step, floor, false)?.1)
}

/// One parallel batch: `ℓ(θ)` (when asked) plus the `2q` gradient probes.
fn loss_and_gradient<O: Objective + ?Sized>(
    obj: &O,
    theta: &[f64],
    fd_step: f64,
    floor: f64,
    with_loss: bool,
) -> Result<(Option<f64>, Vec<f64>)> {
    if !(fd_step > 0.0) || !(floor > 0.0) {
        return Err(SepdaError::Config("fd_step and its floor must be positive".into()));
    }
    if theta.len() != obj.dim() {
        return Err(SepdaError::ShapeMismatch(format!(
            "theta has {} entries, objective expects {}",
            theta.len(),
            obj.dim()
        )));
    }
    let q = theta.len();
    let delta: Vec<f64> = theta.iter().map(|t| fd_step * t.abs().max(floor)).collect();
    // probe 2j is +δⱼ, 2j+1 is -δⱼ, 2q is the centre
    let n_probes = 2 * q + usize::from(with_loss);
    let values = (0..n_probes)
        .into_par_iter()
        .map(|k| {
            let mut t = theta.to_vec();
            if k < 2 * q {
                let j = k / 2;
                t[j] += if k % 2 == 0 { delta[j] } else { -delta[j] };
            }
            obj.loss(&t)
        })
        .collect::<Result<Vec<f64>>>()?;
    let grad = (0..q).map(|j| (values[2 * j] - values[2 * j + 1]) / (2.0 * delta[j])).collect();
    Ok((with_loss.then(|| values[2 * q]), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub similarity: Similarity,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Lower bound on the magnitude used for normalization and FD steps.
    pub scale_floor: f64,
    /// Stop once `‖θ_{k+1} - θ_k‖` stays below this for `patience` steps.
    pub tolerance: f64,
    pub patience: usize,
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Ncc,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iterations: 300,
            fd_step: 1e-3,
            scale_floor: 1e-3,
            tolerance: 1e-7,
            patience: 5,
            bounds: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) {
            return Err(SepdaError::Config("learning_rate must be positive".into()));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(SepdaError::Config("decay rates must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.fd_step > 0.0) || !(self.scale_floor > 0.0) {
            return Err(SepdaError::Config("epsilon, fd_step and scale_floor must be positive".into()));
        }
        if !(self.tolerance >= 0.0) || self.patience == 0 {
            return Err(SepdaError::Config("tolerance must be nonnegative and patience at least 1".into()));
        }
        if let Some(b) = &self.bounds {
            if b.iter().any(|&(lo, hi)| !(lo <= hi)) {
                return Err(SepdaError::Config("every bound needs lo <= hi".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub theta: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    MaxIterations,
    Converged,
    /// Loss or gradient evaluation failed; the report ends at the last good
    /// iterate.
    Aborted(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub similarity: Similarity,
    pub iterations: Vec<Iterate>,
    /// Last accepted iterate.
    pub final_theta: Vec<f64>,
    /// Lowest-loss iterate.
    pub best_theta: Vec<f64>,
    pub best_loss: f64,
    pub relative_error: Option<f64>,
    pub termination: Termination,
}

impl EstimationReport {
    /// Sets `‖truth - θ̂‖ / ‖truth‖` from the final iterate.
    pub fn with_truth(mut self, truth: &[f64]) -> Result<Self> {
        self.relative_error = Some(relative_error(truth, &self.final_theta)?);
        Ok(self)
    }

    /// Best loss seen up to each iteration.
    pub fn running_min(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .scan(f64::INFINITY, |best, it| {
                *best = best.min(it.loss);
                Some(*best)
            })
            .collect()
    }

    /// `iteration,loss,theta_0,...`, one row per recorded iterate.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let q = self.final_theta.len();
        write!(w, "iteration,loss")?;
        for j in 0..q {
            write!(w, ",theta_{j}")?;
        }
        writeln!(w)?;
        for (k, it) in self.iterations.iter().enumerate() {
            write!(w, "{k},{:e}", it.loss)?;
            for t in &it.theta {
                write!(w, ",{t:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn relative_error(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(SepdaError::ShapeMismatch("truth and estimate lengths differ".into()));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let nt = norm(&mut truth.iter().copied());
    if nt == 0.0 {
        return Err(SepdaError::Domain("relative error against a zero truth".into()));
    }
    Ok(norm(&mut truth.iter().zip(estimate).map(|(a, b)| a - b)) / nt)
}

fn project(theta: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (t, &(lo, hi)) in theta.iter_mut().zip(b) {
            *t = t.clamp(lo, hi);
        }
    }
}

/// Adam with bias correction on `z = θ / s`, `s = max(|θ₀|, scale_floor)`,
/// projecting onto the bounds after every step.
pub fn adam_minimize<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    cfg: &EstimatorConfig,
) -> Result<EstimationReport> {
    cfg.validate()?;
    let q = obj.dim();
    if theta0.len() != q {
        return Err(SepdaError::ShapeMismatch(format!(
            "theta0 has {} entries, objective expects {q}",
            theta0.len()
        )));
    }
    let bounds = cfg.bounds.clone().or_else(|| obj.bounds());
    if let Some(b) = &bounds {
        if b.len() != q {
            return Err(SepdaError::Config(format!("{} bounds for {q} parameters", b.len())));
        }
    }
    let scale: Vec<f64> = theta0.iter().map(|t| t.abs().max(cfg.scale_floor)).collect();
    let mut theta = theta0.to_vec();
    project(&mut theta, bounds.as_deref());

    let mut m = vec![0.0; q];
    let mut v = vec![0.0; q];
    let mut iterations = Vec::new();
    let mut quiet = 0;
    let mut termination = Termination::MaxIterations;

    for k in 0..=cfg.max_iterations {
        let last = k == cfg.max_iterations || quiet >= cfg.patience;
        let evaluated = if last {
            obj.loss(&theta).map(|l| (Some(l), Vec::new()))
        } else {
            loss_and_gradient(obj, &theta, cfg.fd_step, cfg.scale_floor, true)
        };
        let (loss, grad) = match evaluated {
            Ok((Some(l), g)) if l.is_finite() => (l, g),
            Ok((l, _)) if k > 0 => {
                termination = Termination::Aborted(format!("non-finite loss {l:?}"));
                break;
            }
            Err(e) if k > 0 => {
                termination = Termination::Aborted(e.to_string());
                break;
            }
            Ok((l, _)) => {
                return Err(SepdaError::NonFinite(format!("initial loss {l:?}")));
            }
            Err(e) => return Err(e),
        };
        iterations.push(Iterate { theta: theta.clone(), loss });
        if last {
            if quiet >= cfg.patience {
                termination = Termination::Converged;
            }
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            termination = Termination::Aborted("non-finite gradient".into());
            break;
        }

        let t = (k + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        let mut next = theta.clone();
        for j in 0..q {
            let g = grad[j] * scale[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let step = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
            next[j] = (theta[j] / scale[j] - step) * scale[j];
        }
        project(&mut next, bounds.as_deref());
        let moved = next.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        quiet = if moved < cfg.tolerance { quiet + 1 } else { 0 };
        theta = next;
    }

    let final_theta = iterations.last().map(|it| it.theta.clone()).unwrap_or_else(|| theta0.to_vec());
    let best = iterations
        .iter()
        .fold(None::<&Iterate>, |b, it| match b {
            Some(b) if b.loss <= it.loss => Some(b),
            _ => Some(it),
        })
        .expect("the initial iterate is always recorded");
    Ok(EstimationReport {
        similarity: cfg.similarity,
        best_theta: best.theta.clone(),
        best_loss: best.loss,
        iterations,
        final_theta,
        relative_error: None,
        termination,
    })
}

/// Adam on a moment fixture, using the fixture's similarity.
pub fn estimate(fixture: &MomentFixture<'_>, theta0: &[f64], cfg: &EstimatorConfig) -> Result<EstimationReport> {
    if fixture.similarity != cfg.similarity {
        return Err(SepdaError::Config("fixture and optimizer disagree on the similarity".into()));
    }
    adam_minimize(fixture, theta0, cfg)
}

/// Point momenta `p_c` at control points `x_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPointMomentum {
    points: Vec<[f64; 2]>,
    momenta: Vec<[f64; 2]>,
}

impl ControlPointMomentum {
    pub fn new(points: Vec<[f64; 2]>, momenta: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() || points.len() != momenta.len() {
            return Err(SepdaError::Config("need equally many control points and momenta, at least one".into()));
        }
        if points.iter().flatten().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(SepdaError::Domain("control points must lie inside the unit square".into()));
        }
        if momenta.iter().flatten().any(|p| !p.is_finite()) {
            return Err(SepdaError::NonFinite("control-point momenta".into()));
        }
        Ok(Self { points, momenta })
    }

    /// Zero momenta on a `rows × cols` lattice strictly inside the square.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let points = crate::noise_models::square_lattice(rows, cols)?;
        let n = points.len();
        Self::new(points, vec![[0.0; 2]; n])
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn momenta(&self) -> &[[f64; 2]] {
        &self.momenta
    }

    /// Momenta flattened as `[p0x, p0y, p1x, ...]`.
    pub fn theta(&self) -> Vec<f64> {
        self.momenta.iter().flatten().copied().collect()
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != 2 * self.points.len() {
            return Err(SepdaError::ShapeMismatch(format!(
                "{} momentum entries for {} control points",
                theta.len(),
                self.points.len()
            )));
        }
        let momenta = theta.chunks(2).map(|c| [c[0], c[1]]).collect();
        Self::new(self.points.clone(), momenta)
    }

    /// Nearest-node impulses of mass `p_c`, i.e. value `p_c / (h_x h_y)`.
    pub fn rasterize(&self, grid: Grid) -> VectorField {
        let mut m = VectorField::zeros(grid);
        let w = 1.0 / grid.cell_area();
        for (pt, p) in self.points.iter().zip(&self.momenta) {
            let i = (pt[0] / grid.hx()).round() as usize;
            let j = (pt[1] / grid.hy()).round() as usize;
            let k = grid.index(i.min(grid.nx() - 1), j.min(grid.ny() - 1));
            for c in 0..2 {
                m.component_mut(c)[k] += p[c] * w;
            }
        }
        m
    }
}

/// `E(m₀) = ½⟨Km₀, m₀⟩ + ‖I₁(m₀) - T‖² / (2λ²)` over control-point momenta.
pub struct RegistrationObjective<'a> {
    pub source: &'a ScalarField,
    pub target: &'a ScalarField,
    pub control: ControlPointMomentum,
    pub smoother: &'a Smoother,
    pub lambda: f64,
    pub steps: usize,
}

impl RegistrationObjective<'_> {
    /// `(kinetic term, matching term)` at `theta`.
    pub fn terms(&self, theta: &[f64]) -> Result<(f64, f64)> {
        let m0 = self.control.with_theta(theta)?.rasterize(self.source.grid());
        let end = shoot(&State::new(m0.clone(), self.source.clone())?, self.smoother, self.steps)?;
        let ke = 0.5 * kinetic_energy(&m0, self.smoother)?;
        let mismatch = ssd(&end.image, self.target)? / (2.0 * self.lambda * self.lambda);
        Ok((ke, mismatch))
    }
}

impl Objective for RegistrationObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.control.points().len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.terms(theta)
            .map(|(a, b)| a + b)
            .map_err(|e| SepdaError::Loss { theta: theta.to_vec(), source: Box::new(e) })
    }
}

/// Shooting registration of `source` onto `target`; returns the rasterized
/// lowest-energy `m₀` and the optimizer report.
pub fn register_shooting(
    source: &ScalarField,
    target: &ScalarField,
    init: &ControlPointMomentum,
    smoother: &Smoother,
    lambda: f64,
    steps: usize,
    cfg: &EstimatorConfig,
) -> Result<(VectorField, EstimationReport)> {
    if source.grid() != target.grid() || smoother.grid() != source.grid() {
        return Err(SepdaError::ShapeMismatch("registration images and kernel grid differ".into()));
    }
    if !(lambda > 0.0) {
        return Err(SepdaError::Config("lambda must be positive".into()));
    }
    let obj = RegistrationObjective { source, target, control: init.clone(), smoother, lambda, steps };
    let report = adam_minimize(&obj, &init.theta(), cfg)?;
    let m0 = init.with_theta(&report.best_theta)?.rasterize(source.grid());
    Ok((m0, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use std::f64::consts::PI;

    fn g65() -> Grid {
        Grid::square(65).unwrap()
    }

    #[test]
    fn ssd_cases() {
        let g = g65();
        let a = ScalarField::from_fn(g, |x, y| x * y + 0.3);
        let b = ScalarField::from_fn(g, |x, _| (3.0 * x).cos());
        assert_eq!(ssd(&a, &a).unwrap(), 0.0);
        assert_eq!(ssd(&a, &b).unwrap(), ssd(&b, &a).unwrap());
        let one = ScalarField::constant(g, 1.0);
        assert!((ssd(&one, &ScalarField::zeros(g)).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssd(&a, &ScalarField::zeros(Grid::square(9).unwrap())).is_err());
    }

    #[test]
    fn ncc_cases() {
        let g = g65();
        let a = ScalarField::from_fn(g, |x, y| (x - 0.3).powi(2) + y);
        assert!(ncc_distance(&a, &a).unwrap().abs() < 1e-15);
        for c in [3.7, -0.2, 1e-3] {
            assert!(ncc_distance(&a.scaled(c), &a).unwrap().abs() < 1e-15);
        }
        let s1 = ScalarField::from_fn(g, |x, _| (PI * x).sin());
        let s2 = ScalarField::from_fn(g, |x, _| (2.0 * PI * x).sin());
        assert!((ncc_distance(&s1, &s2).unwrap() - 1.0).abs() < 1e-3);
        assert!(matches!(
            ncc_distance(&a, &ScalarField::zeros(g)),
            Err(SepdaError::DegenerateSimilarity(_))
        ));
    }

    #[test]
    fn ncc_matches_textbook_formula() {
        let g = g65();
        let a = ScalarField::from_fn(g, |x, y| (2.0 * x + y).sin() + 1.5);
        let b = ScalarField::from_fn(g, |x, y| (x * y * 5.0).cos());
        let ab = inner_l2(&a, &b).unwrap();
        let aa = inner_l2(&a, &a).unwrap();
        let bb = inner_l2(&b, &b).unwrap();
        let direct = 1.0 - ab * ab / (aa * bb);
        assert!((ncc_distance(&a, &b).unwrap() - direct).abs() < 1e-12);
    }

    fn quadratic(theta: &[f64], center: &[f64], a: &[[f64; 4]; 4]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(center).map(|(t, c)| t - c).collect();
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += d[i] * a[i][j] * d[j];
            }
        }
        s
    }

    const A: [[f64; 4]; 4] =
        [[3.0, 0.5, 0.0, 0.2], [0.5, 2.0, 0.1, 0.0], [0.0, 0.1, 1.0, 0.3], [0.2, 0.0, 0.3, 4.0]];

    #[test]
    fn fd_gradient_of_quadratic() {
        let obj = FnObjective::new(4, |t: &[f64]| Ok(quadratic(t, &[0.0; 4], &A)));
        let theta = [0.3, -1.2, 0.7, 2.0];
        let g = fd_gradient(&obj, &theta, 1e-3, 1e-3).unwrap();
        for i in 0..4 {
            let exact: f64 = (0..4).map(|j| 2.0 * A[i][j] * theta[j]).sum();
            assert!((g[i] - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{i}: {} vs {exact}", g[i]);
        }
        let c = [0.4, 0.1, -0.3, 0.25];
        let obj = FnObjective::new(4, move |t: &[f64]| Ok(quadratic(t, &c, &A)));
        let g = fd_gradient(&obj, &c, 1e-3, 1e-3).unwrap();
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn adam_on_quadratic() {
        let c = [0.4, 0.1, -0.3, 0.25];
        let obj = FnObjective::new(4, move |t: &[f64]| Ok(quadratic(t, &c, &A)));
        let cfg = EstimatorConfig { learning_rate: 0.05, max_iterations: 500, scale_floor: 1.0, ..Default::default() };
        let r = adam_minimize(&obj, &[0.0; 4], &cfg).unwrap();
        assert!(r.iterations.len() <= 501);
        for (t, c) in r.final_theta.iter().zip(c) {
            assert!((t - c).abs() < 1e-4, "{:?}", r.final_theta);
        }
        let mins = r.running_min();
        assert!(mins.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*mins.last().unwrap(), r.best_loss);
    }

    #[test]
    fn adam_respects_bounds() {
        let obj = FnObjective::new(2, |t: &[f64]| Ok((t[0] + 1.0).powi(2) + (t[1] - 0.5).powi(2)));
        let cfg = EstimatorConfig {
            learning_rate: 0.05,
            max_iterations: 400,
            scale_floor: 1.0,
            bounds: Some(vec![(0.0, 1.0), (0.0, 0.2)]),
            ..Default::default()
        };
        let r = adam_minimize(&obj, &[0.5, 0.1], &cfg).unwrap();
        assert!(r.iterations.iter().all(|it| it.theta[0] >= 0.0 && it.theta[1] <= 0.2));
        assert!(r.final_theta[0].abs() < 1e-6 && (r.final_theta[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn adam_aborts_on_nonfinite_loss() {
        let obj = FnObjective::new(1, |t: &[f64]| Ok(if t[0] < 0.8 { f64::NAN } else { (t[0] - 0.0).powi(2) }));
        let cfg = EstimatorConfig { learning_rate: 0.1, max_iterations: 50, scale_floor: 1.0, ..Default::default() };
        let r = adam_minimize(&obj, &[1.0], &cfg).unwrap();
        assert!(matches!(r.termination, Termination::Aborted(_)));
        assert!(r.final_theta[0] >= 0.8);
        assert!(r.iterations.iter().all(|it| it.loss.is_finite()));
    }

    #[test]
    fn adam_rejects_bad_config() {
        let obj = FnObjective::new(1, |t: &[f64]| Ok(t[0] * t[0]));
        for cfg in [
            EstimatorConfig { learning_rate: 0.0, ..Default::default() },
            EstimatorConfig { beta1: 1.0, ..Default::default() },
            EstimatorConfig { fd_step: -1.0, ..Default::default() },
        ] {
            assert!(adam_minimize(&obj, &[1.0], &cfg).is_err());
        }
    }

    #[test]
    fn converged_run_stops_early() {
        let obj = FnObjective::new(1, |t: &[f64]| Ok(t[0] * t[0]));
        let cfg = EstimatorConfig {
            learning_rate: 0.1,
            max_iterations: 10_000,
            tolerance: 1e-6,
            scale_floor: 1.0,
            ..Default::default()
        };
        let r = adam_minimize(&obj, &[1.0], &cfg).unwrap();
        assert_eq!(r.termination, Termination::Converged);
        assert!(r.iterations.len() < 10_000);
    }

    #[test]
    fn csv_layout() {
        let obj = FnObjective::new(2, |t: &[f64]| Ok(t[0] * t[0] + t[1] * t[1]));
        let cfg = EstimatorConfig { max_iterations: 3, scale_floor: 1.0, ..Default::default() };
        let r = adam_minimize(&obj, &[1.0, -2.0], &cfg).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "iteration,loss,theta_0,theta_1");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,5e0,1e0,-2e0"));
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_error(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn control_points() {
        let g = Grid::square(21).unwrap();
        let cp = ControlPointMomentum::new(vec![[0.5, 0.5], [0.26, 0.74]], vec![[1.0, -2.0], [0.5, 0.0]]).unwrap();
        let m = cp.rasterize(g);
        let h2 = g.cell_area();
        assert!((m.get(10, 10)[0] * h2 - 1.0).abs() < 1e-12);
        assert!((m.get(10, 10)[1] * h2 + 2.0).abs() < 1e-12);
        assert!((m.get(5, 15)[0] * h2 - 0.5).abs() < 1e-12);
        assert_eq!(cp.theta(), vec![1.0, -2.0, 0.5, 0.0]);
        assert_eq!(cp.with_theta(&cp.theta()).unwrap(), cp);
        assert!(ControlPointMomentum::new(vec![[0.0, 0.5]], vec![[0.0; 2]]).is_err());
        assert!(ControlPointMomentum::new(vec![[0.5, 0.5]], vec![]).is_err());
        assert_eq!(ControlPointMomentum::lattice(3, 3).unwrap().points().len(), 9);
    }

    #[test]
    fn registration_objective_at_zero_momenta() {
        let g = Grid::square(24).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let src = ScalarField::from_fn(g, |x, y| (-((x - 0.4).powi(2) + (y - 0.5).powi(2)) / 0.02).exp());
        let tgt = ScalarField::from_fn(g, |x, y| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp());
        let lambda = 0.1;
        let obj = RegistrationObjective {
            source: &src,
            target: &tgt,
            control: ControlPointMomentum::lattice(3, 3).unwrap(),
            smoother: &sm,
            lambda,
            steps: 8,
        };
        let e = obj.loss(&[0.0; 18]).unwrap();
        assert_eq!(e, ssd(&src, &tgt).unwrap() / (2.0 * lambda * lambda));
    }
}

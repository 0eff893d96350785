//! Stratonovich simulation of the stochastic EPDiff/advection system.
//!
//! The Heun scheme is written against [`StratonovichSystem`], so the same
//! code drives the image system and the scalar test equation
//! `dX = aX dt + bX∘dW`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epdiff::{advection_with_velocity, coadjoint, deterministic_tendency, State, Tendency};
use crate::error::{Result, SepdaError};
use crate::fields::{ScalarField, VectorField};
use crate::kernels::Smoother;
use crate::noise_models::NoiseFields;

/// `dX = a(X) dt + Σ_α b_α(X) ∘ dW^α`
pub trait StratonovichSystem: Sync {
    type State: Clone + Send;
    type Delta;

    fn noise_dim(&self) -> usize;

    fn drift(&self, s: &Self::State) -> Result<Self::Delta>;

    /// `Σ_α b_α(s)·dw_α`.
    fn diffusion(&self, s: &Self::State, dw: &[f64]) -> Result<Self::Delta>;

    /// `s + Σ cᵢ·δᵢ`
    fn update(&self, s: &Self::State, terms: &[(f64, &Self::Delta)]) -> Self::State;

    fn is_finite(&self, s: &Self::State) -> bool;

    /// True when every `b_α` vanishes identically.
    fn is_silent(&self) -> bool {
        false
    }

    fn advance_clock(&self, _s: &mut Self::State, _dt: f64) {}
}

/// One Heun predictor-corrector step, consistent with Stratonovich calculus.
///
/// ```text
/// s̃  = s + a(s) dt + Σ b_α(s) dW^α
/// s⁺ = s + ½(a(s) + a(s̃)) dt + ½ Σ (b_α(s) + b_α(s̃)) dW^α
/// ```
/// With no noise this is the explicit trapezoidal (RK2) step, computed by
/// the same instructions whether the increments or the fields are zero.
pub fn heun<S: StratonovichSystem>(sys: &S, s: &S::State, dt: f64, dw: &[f64]) -> Result<S::State> {
    let a0 = sys.drift(s)?;
    let noisy = !sys.is_silent() && dw.iter().any(|&w| w != 0.0);
    let mut next = if noisy {
        let b0 = sys.diffusion(s, dw)?;
        let pred = sys.update(s, &[(dt, &a0), (1.0, &b0)]);
        let a1 = sys.drift(&pred)?;
        let b1 = sys.diffusion(&pred, dw)?;
        sys.update(s, &[(0.5 * dt, &a0), (0.5 * dt, &a1), (0.5, &b0), (0.5, &b1)])
    } else {
        let pred = sys.update(s, &[(dt, &a0)]);
        let a1 = sys.drift(&pred)?;
        sys.update(s, &[(0.5 * dt, &a0), (0.5 * dt, &a1)])
    };
    sys.advance_clock(&mut next, dt);
    Ok(next)
}

/// Euler–Maruyama step `s + a dt + Σ b_α dW^α`. Converges to the Itô
/// solution; kept for comparison against [`heun`].
pub fn euler_maruyama<S: StratonovichSystem>(
    sys: &S,
    s: &S::State,
    dt: f64,
    dw: &[f64],
) -> Result<S::State> {
    let a = sys.drift(s)?;
    let b = sys.diffusion(s, dw)?;
    let mut next = sys.update(s, &[(dt, &a), (1.0, &b)]);
    sys.advance_clock(&mut next, dt);
    Ok(next)
}

/// Linear scalar test equation `dX = drift·X dt + noise·X ∘ dW`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarLinearSde {
    pub drift: f64,
    pub noise: f64,
}

impl StratonovichSystem for ScalarLinearSde {
    type State = f64;
    type Delta = f64;

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, s: &f64) -> Result<f64> {
        Ok(self.drift * s)
    }

    fn diffusion(&self, s: &f64, dw: &[f64]) -> Result<f64> {
        Ok(self.noise * s * dw[0])
    }

    fn update(&self, s: &f64, terms: &[(f64, &f64)]) -> f64 {
        terms.iter().fold(*s, |acc, (c, d)| acc + c * *d)
    }

    fn is_finite(&self, s: &f64) -> bool {
        s.is_finite()
    }

    fn is_silent(&self) -> bool {
        self.noise == 0.0
    }
}

/// `(b_m, b_I) = (-ad*_σ m, -∇I·σ)` for one noise field.
pub fn diffusion_term(s: &State, noise: &NoiseFields, alpha: usize) -> Result<Tendency> {
    let sigma = noise.get(alpha)?.field();
    diffusion_for(s, sigma)
}

fn diffusion_for(s: &State, sigma: &VectorField) -> Result<Tendency> {
    Ok(Tendency {
        dm: coadjoint(&s.m, sigma)?.scaled(-1.0),
        di: advection_with_velocity(&s.image, sigma)?,
    })
}

/// The coupled stochastic EPDiff + advection system.
pub struct Sepda<'a> {
    smoother: &'a Smoother,
    noise: &'a NoiseFields,
}

impl<'a> Sepda<'a> {
    pub fn new(smoother: &'a Smoother, noise: &'a NoiseFields) -> Result<Self> {
        if smoother.grid() != noise.grid() {
            return Err(SepdaError::ShapeMismatch("kernel and noise fields differ in grid".into()));
        }
        Ok(Self { smoother, noise })
    }
}

impl StratonovichSystem for Sepda<'_> {
    type State = State;
    type Delta = Tendency;

    fn noise_dim(&self) -> usize {
        self.noise.len()
    }

    fn drift(&self, s: &State) -> Result<Tendency> {
        stratonovich_drift(s, self.smoother)
    }

    // Both noise terms are linear in σ, so Σ_α b_α dW^α is the single term
    // for the combined field Σ_α σ_α dW^α.
    fn diffusion(&self, s: &State, dw: &[f64]) -> Result<Tendency> {
        diffusion_for(s, &self.noise.combine(dw)?)
    }

    fn update(&self, s: &State, terms: &[(f64, &Tendency)]) -> State {
        let mut out = s.clone();
        for (c, d) in terms {
            out.m.axpy(*c, &d.dm);
            out.image.axpy(*c, &d.di);
        }
        out
    }

    fn is_finite(&self, s: &State) -> bool {
        s.is_finite()
    }

    fn is_silent(&self) -> bool {
        self.noise.is_silent()
    }

    fn advance_clock(&self, s: &mut State, dt: f64) {
        s.t += dt;
    }
}

/// Stratonovich drift: the deterministic EPDiff and advection right-hand
/// sides, evaluated by the same code.
pub fn stratonovich_drift(s: &State, smoother: &Smoother) -> Result<Tendency> {
    deterministic_tendency(&s.m, &s.image, smoother)
}

pub fn heun_step(
    s: &State,
    noise: &NoiseFields,
    smoother: &Smoother,
    dt: f64,
    dw: &[f64],
) -> Result<State> {
    if dw.len() != noise.len() {
        return Err(SepdaError::ShapeMismatch(format!(
            "{} increments for {} noise fields",
            dw.len(),
            noise.len()
        )));
    }
    heun(&Sepda::new(smoother, noise)?, s, dt, dw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub steps: usize,
    pub base_seed: u64,
    pub n_samples: usize,
    /// Keep endpoint momenta alongside endpoint images.
    #[serde(default)]
    pub keep_momenta: bool,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { steps: 128, base_seed: 0, n_samples: 500, keep_momenta: false }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_samples == 0 {
            return Err(SepdaError::Config("sde steps and n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Endpoint images of independent SEPDA paths, in sample-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub images: Vec<ScalarField>,
    pub momenta: Option<Vec<VectorField>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Empirical mean image, summed in sample order.
    pub fn mean_image(&self) -> Result<ScalarField> {
        ScalarField::mean_of(&self.images)
    }
}

/// Independent generator for sample `index`: one ChaCha key per run, one
/// stream per sample, so draws never depend on scheduling.
pub fn sample_rng(base_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng
}

/// Standard-normal increments scaled to variance `dt`.
pub fn draw_increments(rng: &mut ChaCha8Rng, dt: f64, out: &mut [f64]) {
    let sd = dt.sqrt();
    for w in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *w = sd * z;
    }
}

/// Run one path of `sys` over `[0, 1]` using the stream for `index`.
pub fn simulate_path<S: StratonovichSystem>(
    sys: &S,
    s0: &S::State,
    steps: usize,
    base_seed: u64,
    index: usize,
    keep_path: bool,
) -> Result<Vec<S::State>> {
    let dt = 1.0 / steps as f64;
    let mut rng = sample_rng(base_seed, index);
    let mut dw = vec![0.0; sys.noise_dim()];
    let mut cur = s0.clone();
    let mut path = Vec::new();
    for step in 0..steps {
        if keep_path {
            path.push(cur.clone());
        }
        draw_increments(&mut rng, dt, &mut dw);
        cur = heun(sys, &cur, dt, &dw)?;
        if !sys.is_finite(&cur) {
            return Err(SepdaError::BlowUp { step, sample: Some(index) });
        }
    }
    path.push(cur);
    Ok(path)
}

/// Endpoints of `cfg.n_samples` paths, fanned out over the current rayon
/// pool. Output order is sample order whatever the scheduling.
pub fn sample_endpoints(
    s0: &State,
    noise: &NoiseFields,
    smoother: &Smoother,
    cfg: &SdeConfig,
) -> Result<SampleSet> {
    cfg.validate()?;
    let sys = Sepda::new(smoother, noise)?;
    let ends = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            simulate_path(&sys, s0, cfg.steps, cfg.base_seed, i, false)
                .map(|mut p| p.pop().expect("path has an endpoint"))
                .map_err(|e| match e {
                    SepdaError::BlowUp { step, .. } => SepdaError::BlowUp { step, sample: Some(i) },
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, momenta): (Vec<_>, Vec<_>) = ends.into_iter().map(|s| (s.image, s.m)).unzip();
    Ok(SampleSet { images, momenta: cfg.keep_momenta.then_some(momenta) })
}

/// Heun integration with every increment zero: the endpoint that zero-noise
/// samples reproduce exactly.
pub fn deterministic_endpoint(s0: &State, smoother: &Smoother, steps: usize) -> Result<State> {
    if steps == 0 {
        return Err(SepdaError::Config("integration needs at least one step".into()));
    }
    let silent = NoiseFields::new(smoother.grid(), Vec::new())?;
    let sys = Sepda::new(smoother, &silent)?;
    let dt = 1.0 / steps as f64;
    let mut cur = s0.clone();
    for step in 0..steps {
        cur = heun(&sys, &cur, dt, &[])?;
        if !cur.is_finite() {
            return Err(SepdaError::BlowUp { step, sample: None });
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid;
    use crate::kernels::KernelSpec;
    use crate::noise_models::{hexagonal_lattice_14, Family, NoiseModel};

    fn blob_state(g: Grid, momentum: f64) -> State {
        let img = ScalarField::from_fn(g, |x, y| {
            (-((x - 0.5).powi(2) + (y - 0.45).powi(2)) / (2.0 * 0.12f64.powi(2))).exp()
        });
        let m = VectorField::from_fn(g, |x, y| {
            let e = (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp();
            [momentum * e, 0.5 * momentum * e]
        });
        State::new(m, img).unwrap()
    }

    #[test]
    fn scalar_step_expands_exactly() {
        let sys = ScalarLinearSde { drift: 0.0, noise: 0.3 };
        for &(x, dw) in &[(1.0, 0.1), (2.5, -0.37), (-0.4, 0.8)] {
            let got = heun(&sys, &x, 0.01, &[dw]).unwrap();
            let b: f64 = 0.3;
            let expected = x * (1.0 + b * dw + 0.5 * b * b * dw * dw);
            assert!((got - expected).abs() < 1e-15 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn drift_is_the_deterministic_rhs() {
        let g = Grid::square(17).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let s = blob_state(g, 0.3);
        let d = stratonovich_drift(&s, &sm).unwrap();
        assert_eq!(d.dm, crate::epdiff::epdiff_rhs(&s, &sm).unwrap());
        assert_eq!(d.di, crate::epdiff::advection_rhs(&s, &sm).unwrap());
        let z = State::new(VectorField::zeros(g), ScalarField::zeros(g)).unwrap();
        let d = stratonovich_drift(&z, &sm).unwrap();
        assert_eq!(d.dm.max_abs() + d.di.max_abs(), 0.0);
    }

    #[test]
    fn diffusion_term_cases() {
        let g = Grid::square(17).unwrap();
        let zero = NoiseFields::new(g, vec![VectorField::zeros(g)]).unwrap();
        let s = blob_state(g, 0.3);
        let b = diffusion_term(&s, &zero, 0).unwrap();
        assert_eq!(b.dm.max_abs() + b.di.max_abs(), 0.0);

        let e1 = NoiseFields::new(g, vec![VectorField::constant(g, [1.0, 0.0])]).unwrap();
        let flat = State::new(VectorField::zeros(g), ScalarField::constant(g, 4.0)).unwrap();
        let b = diffusion_term(&flat, &e1, 0).unwrap();
        assert_eq!(b.dm.max_abs() + b.di.max_abs(), 0.0);

        let ramp = State::new(VectorField::zeros(g), ScalarField::from_fn(g, |x, _| x)).unwrap();
        let b = diffusion_term(&ramp, &e1, 0).unwrap();
        assert!(b.di.values().iter().all(|v| (v + 1.0).abs() < 1e-12));
        assert!(diffusion_term(&ramp, &e1, 1).is_err());
    }

    #[test]
    fn combined_noise_equals_sum_of_terms() {
        let g = Grid::square(21).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let model = NoiseModel::lattice(
            Family::GaussianLattice,
            hexagonal_lattice_14(),
            0.09,
            (0..14).map(|i| 0.01 + 0.001 * i as f64).collect(),
        )
        .unwrap();
        let nf = model.fields(g).unwrap();
        let sys = Sepda::new(&sm, &nf).unwrap();
        let s = blob_state(g, 0.2);
        let dw: Vec<f64> = (0..28).map(|a| ((a * 37 % 11) as f64 - 5.0) * 0.03).collect();
        let combined = sys.diffusion(&s, &dw).unwrap();
        let mut dm = VectorField::zeros(g);
        let mut di = ScalarField::zeros(g);
        for (alpha, &w) in dw.iter().enumerate() {
            let t = diffusion_term(&s, &nf, alpha).unwrap();
            dm.axpy(w, &t.dm);
            di.axpy(w, &t.di);
        }
        assert!(combined.dm.sub(&dm).unwrap().max_abs() < 1e-12 * dm.max_abs().max(1.0));
        assert!(combined.di.sub(&di).unwrap().max_abs() < 1e-12 * di.max_abs().max(1.0));
    }

    #[test]
    fn zero_noise_heun_is_trapezoidal_rk2() {
        let g = Grid::square(17).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let nf = NoiseFields::new(g, vec![VectorField::zeros(g); 2]).unwrap();
        let s = blob_state(g, 0.3);
        let dt = 0.1;
        let got = heun_step(&s, &nf, &sm, dt, &[0.0, 0.0]).unwrap();
        let a0 = stratonovich_drift(&s, &sm).unwrap();
        let mut pred = s.clone();
        pred.m.axpy(dt, &a0.dm);
        pred.image.axpy(dt, &a0.di);
        let a1 = stratonovich_drift(&pred, &sm).unwrap();
        let mut m = s.m.clone();
        m.axpy(0.5 * dt, &a0.dm);
        m.axpy(0.5 * dt, &a1.dm);
        assert_eq!(got.m, m);
        assert!((got.t - dt).abs() < 1e-15);
    }

    #[test]
    fn zero_amplitudes_reproduce_deterministic_endpoint() {
        let g = Grid::square(17).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let model = NoiseModel::lattice(Family::GaussianLattice, hexagonal_lattice_14(), 0.09, vec![0.0; 14])
            .unwrap();
        let nf = model.fields(g).unwrap();
        let s = blob_state(g, 0.3);
        let cfg = SdeConfig { steps: 8, base_seed: 7, n_samples: 3, keep_momenta: true };
        let set = sample_endpoints(&s, &nf, &sm, &cfg).unwrap();
        let det = deterministic_endpoint(&s, &sm, 8).unwrap();
        for (img, m) in set.images.iter().zip(set.momenta.as_ref().unwrap()) {
            assert_eq!(img.values(), det.image.values());
            assert_eq!(m, &det.m);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_order_stable() {
        let g = Grid::square(13).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let model = NoiseModel::lattice(Family::GaussianLattice, hexagonal_lattice_14(), 0.09, vec![0.02; 14])
            .unwrap();
        let nf = model.fields(g).unwrap();
        let s = blob_state(g, 0.2);
        let cfg = SdeConfig { steps: 4, base_seed: 11, n_samples: 6, keep_momenta: false };
        let a = sample_endpoints(&s, &nf, &sm, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_endpoints(&s, &nf, &sm, &cfg)).unwrap();
        assert_eq!(a, b);
        // sample i only depends on its own stream
        let sys = Sepda::new(&sm, &nf).unwrap();
        let p4 = simulate_path(&sys, &s, 4, 11, 4, false).unwrap();
        assert_eq!(p4[0].image, a.images[4]);
        assert_ne!(a.images[0], a.images[1]);
    }

    #[test]
    fn endpoint_variance_scales_quadratically() {
        let g = Grid::square(17).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let s = blob_state(g, 0.1);
        let variance = |amp: f64| {
            let model =
                NoiseModel::lattice(Family::GaussianLattice, hexagonal_lattice_14(), 0.09, vec![amp; 14]).unwrap();
            let nf = model.fields(g).unwrap();
            let cfg = SdeConfig { steps: 8, base_seed: 3, n_samples: 200, keep_momenta: false };
            let set = sample_endpoints(&s, &nf, &sm, &cfg).unwrap();
            let mean = set.mean_image().unwrap();
            set.images
                .iter()
                .map(|im| im.sub(&mean).unwrap().values().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / set.len() as f64
        };
        let ratio = variance(0.01) / variance(0.005);
        assert!((3.2..=4.8).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn blow_up_reports_sample() {
        let g = Grid::square(9).unwrap();
        let sm = Smoother::new(&KernelSpec::default(), g);
        let nf = NoiseFields::new(g, vec![VectorField::constant(g, [1e200, 0.0])]).unwrap();
        let s = State::new(VectorField::zeros(g), ScalarField::from_fn(g, |x, y| (x * 9.0).sin() * y)).unwrap();
        let cfg = SdeConfig { steps: 50, base_seed: 1, n_samples: 2, keep_momenta: false };
        match sample_endpoints(&s, &nf, &sm, &cfg) {
            Err(SepdaError::BlowUp { sample: Some(0), .. }) => {}
            other => panic!("expected blow-up in sample 0, got {other:?}"),
        }
    }
}

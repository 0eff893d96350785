//! First-order moment equations of the stochastic system.
//!
//! Taking expectations of the Itô form and replacing product moments by
//! products of moments gives
//!
//! ```text
//! ∂⟨m⟩ = -ad*_{k*⟨m⟩}⟨m⟩ + ½ Σ_α ad*_σα(ad*_σα ⟨m⟩)
//! ∂⟨I⟩ = -∇⟨I⟩·(k*⟨m⟩)  + ½ Σ_α ∇(∇⟨I⟩·σα)·σα
//! ```
//!
//! The exact equations contain `⟨ad*_u m⟩` and `⟨∇I·u⟩`, which do not close;
//! only the approximation above is integrated.

use crate::epdiff::{coadjoint_from_parts, rk4, State, Storage, Tendency};
use crate::error::{Result, SepdaError};
use crate::fields::{diff_axis, diff_axis_vec, gradient, jacobian, JacobianField, ScalarField, VectorField};
use crate::kernels::Smoother;
use crate::noise_models::{NoiseField, NoiseFields};

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub mean_m: VectorField,
    pub mean_image: ScalarField,
    pub t: f64,
}

impl MomentState {
    pub fn new(mean_m: VectorField, mean_image: ScalarField) -> Result<Self> {
        if mean_m.grid() != mean_image.grid() {
            return Err(SepdaError::ShapeMismatch("moment fields differ in grid".into()));
        }
        Ok(Self { mean_m, mean_image, t: 0.0 })
    }
}

impl From<&State> for MomentState {
    fn from(s: &State) -> Self {
        Self { mean_m: s.m.clone(), mean_image: s.image.clone(), t: s.t }
    }
}

/// `ad*_σ w` accumulated into `out` with weight `c`, given `∂_k w` along
/// the field's axis `k` (or the full Jacobian of `w` for general fields).
fn add_coadjoint_noise(
    out: &mut VectorField,
    c: f64,
    w: &VectorField,
    jw: WJac<'_>,
    sigma: &NoiseField,
) {
    match (sigma.axis, jw) {
        (Some(k), WJac::Axis(dk)) => {
            let f = sigma.field.component(k);
            let df = [sigma.jac.entry(k, 0), sigma.jac.entry(k, 1)];
            let wk = w.component(k);
            for r in 0..2 {
                let wr = w.component(r);
                let dkw = dk[r];
                let dfr = df[r];
                let dfk = df[k];
                let o = out.component_mut(r);
                for i in 0..o.len() {
                    o[i] += c * (f[i] * dkw[i] + wk[i] * dfr[i] + dfk[i] * wr[i]);
                }
            }
        }
        (_, WJac::Full(j)) => {
            let v = coadjoint_from_parts(j, w, &sigma.jac, &sigma.field);
            out.axpy(c, &v);
        }
        (None, WJac::Axis(_)) => unreachable!("axis derivatives only for axis fields"),
    }
}

#[derive(Clone, Copy)]
enum WJac<'a> {
    Axis([&'a [f64]; 2]),
    Full(&'a JacobianField),
}

/// `Σ_α ad*_σα(ad*_σα m)`
pub fn correction_epdiff(m: &VectorField, noise: &NoiseFields) -> Result<VectorField> {
    if m.grid() != noise.grid() {
        return Err(SepdaError::ShapeMismatch("momentum and noise fields differ in grid".into()));
    }
    let jm = jacobian(m)?;
    Ok(correction_epdiff_with(m, &jm, noise))
}

fn correction_epdiff_with(m: &VectorField, jm: &JacobianField, noise: &NoiseFields) -> VectorField {
    let g = m.grid();
    let mut total = VectorField::zeros(g);
    let mut inner = VectorField::zeros(g);
    for sigma in noise.iter() {
        inner.component_mut(0).fill(0.0);
        inner.component_mut(1).fill(0.0);
        match sigma.axis {
            Some(k) => {
                add_coadjoint_noise(&mut inner, 1.0, m, WJac::Axis([jm.entry(0, k), jm.entry(1, k)]), sigma);
                let d0 = diff_axis_vec(inner.component(0), g, k);
                let d1 = diff_axis_vec(inner.component(1), g, k);
                add_coadjoint_noise(&mut total, 1.0, &inner, WJac::Axis([&d0, &d1]), sigma);
            }
            None => {
                add_coadjoint_noise(&mut inner, 1.0, m, WJac::Full(jm), sigma);
                let ji = jacobian(&inner).expect("grid checked by caller");
                add_coadjoint_noise(&mut total, 1.0, &inner, WJac::Full(&ji), sigma);
            }
        }
    }
    total
}

/// `Σ_α ∇(∇I·σα)·σα`
pub fn correction_advect(image: &ScalarField, noise: &NoiseFields) -> Result<ScalarField> {
    if image.grid() != noise.grid() {
        return Err(SepdaError::ShapeMismatch("image and noise fields differ in grid".into()));
    }
    let gi = gradient(image)?;
    Ok(correction_advect_with(&gi, noise))
}

fn correction_advect_with(grad_image: &VectorField, noise: &NoiseFields) -> ScalarField {
    let g = grad_image.grid();
    let n = g.len();
    let mut total = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut d = vec![0.0; n];
    for sigma in noise.iter() {
        match sigma.axis {
            Some(k) => {
                let f = sigma.field.component(k);
                let gk = grad_image.component(k);
                for i in 0..n {
                    tmp[i] = f[i] * gk[i];
                }
                diff_axis(&tmp, g, k, &mut d);
                for i in 0..n {
                    total[i] += f[i] * d[i];
                }
            }
            None => {
                let (s0, s1) = (sigma.field.component(0), sigma.field.component(1));
                let (g0, g1) = (grad_image.component(0), grad_image.component(1));
                for i in 0..n {
                    tmp[i] = g0[i] * s0[i] + g1[i] * s1[i];
                }
                diff_axis(&tmp, g, 0, &mut d);
                for i in 0..n {
                    total[i] += d[i] * s0[i];
                }
                diff_axis(&tmp, g, 1, &mut d);
                for i in 0..n {
                    total[i] += d[i] * s1[i];
                }
            }
        }
    }
    ScalarField::from_raw(g, total)
}

fn moment_tendency(
    m: &VectorField,
    image: &ScalarField,
    noise: &NoiseFields,
    smoother: &Smoother,
) -> Result<Tendency> {
    let u = smoother.smooth(m)?;
    let jm = jacobian(m)?;
    let ju = jacobian(&u)?;
    let mut dm = coadjoint_from_parts(&jm, m, &ju, &u).scaled(-1.0);
    let gi = gradient(image)?;
    let mut di = gi.dot(&u)?.scaled(-1.0);
    if !noise.is_silent() {
        dm.axpy(0.5, &correction_epdiff_with(m, &jm, noise));
        di.axpy(0.5, &correction_advect_with(&gi, noise));
    }
    Ok(Tendency { dm, di })
}

/// `(∂⟨m⟩, ∂⟨I⟩)` under the product-of-moments closure.
pub fn moment_rhs(ms: &MomentState, noise: &NoiseFields, smoother: &Smoother) -> Result<Tendency> {
    if ms.mean_m.grid() != noise.grid() || smoother.grid() != noise.grid() {
        return Err(SepdaError::ShapeMismatch("moment state, kernel and noise grids differ".into()));
    }
    moment_tendency(&ms.mean_m, &ms.mean_image, noise, smoother)
}

/// RK4 with `dt = 1/steps`; the endpoint `⟨I₁⟩` is the estimator's forward
/// model.
pub fn integrate_moments(
    ms0: &MomentState,
    noise: &NoiseFields,
    smoother: &Smoother,
    steps: usize,
) -> Result<MomentState> {
    if ms0.mean_m.grid() != noise.grid() || smoother.grid() != noise.grid() {
        return Err(SepdaError::ShapeMismatch("moment state, kernel and noise grids differ".into()));
    }
    let s0 = State { m: ms0.mean_m.clone(), image: ms0.mean_image.clone(), t: ms0.t };
    let mut path = rk4(&s0, steps, Storage::Economy, |m, i| moment_tendency(m, i, noise, smoother))?;
    let end = path.pop().expect("rk4 returns the final state");
    Ok(MomentState { mean_m: end.m, mean_image: end.image, t: end.t })
}

//! Deterministic EPDiff shooting and image advection.
//!
//! The velocity is never stored: every right-hand side recomputes
//! `u = k * m` from the momentum it is handed.

use crate::error::{Result, SepdaError};
use crate::fields::{gradient, inner_l2, jacobian, JacobianField, ScalarField, VectorField};
use crate::kernels::Smoother;

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub m: VectorField,
    pub image: ScalarField,
    pub t: f64,
}

impl State {
    pub fn new(m: VectorField, image: ScalarField) -> Result<Self> {
        if m.grid() != image.grid() {
            return Err(SepdaError::ShapeMismatch(
                "momentum and image live on different grids".into(),
            ));
        }
        Ok(Self { m, image, t: 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.image.is_finite()
    }
}

/// Time derivative of a `(momentum, image)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Tendency {
    pub dm: VectorField,
    pub di: ScalarField,
}

/// `ad*_v m = Dm·v + (Dv)ᵀ·m + div(v)·m`
pub fn coadjoint(m: &VectorField, v: &VectorField) -> Result<VectorField> {
    if m.grid() != v.grid() {
        return Err(SepdaError::ShapeMismatch("coadjoint operands differ in grid".into()));
    }
    let jm = jacobian(m)?;
    let jv = jacobian(v)?;
    Ok(coadjoint_from_parts(&jm, m, &jv, v))
}

pub(crate) fn coadjoint_from_parts(
    jm: &JacobianField,
    m: &VectorField,
    jv: &JacobianField,
    v: &VectorField,
) -> VectorField {
    let n = m.grid().len();
    let (m0, m1) = (m.component(0), m.component(1));
    let (v0, v1) = (v.component(0), v.component(1));
    let (a00, a01, a10, a11) = (jm.entry(0, 0), jm.entry(0, 1), jm.entry(1, 0), jm.entry(1, 1));
    let (b00, b01, b10, b11) = (jv.entry(0, 0), jv.entry(0, 1), jv.entry(1, 0), jv.entry(1, 1));
    let mut out0 = vec![0.0; n];
    let mut out1 = vec![0.0; n];
    for k in 0..n {
        let div = b00[k] + b11[k];
        out0[k] = a00[k] * v0[k] + a01[k] * v1[k] + b00[k] * m0[k] + b10[k] * m1[k] + div * m0[k];
        out1[k] = a10[k] * v0[k] + a11[k] * v1[k] + b01[k] * m0[k] + b11[k] * m1[k] + div * m1[k];
    }
    VectorField::from_raw(m.grid(), out0, out1)
}

pub fn epdiff_rhs(s: &State, smoother: &Smoother) -> Result<VectorField> {
    let u = smoother.smooth(&s.m)?;
    Ok(coadjoint(&s.m, &u)?.scaled(-1.0))
}

/// `-∇I·u` for an explicit velocity.
pub fn advection_with_velocity(image: &ScalarField, u: &VectorField) -> Result<ScalarField> {
    Ok(gradient(image)?.dot(u)?.scaled(-1.0))
}

pub fn advection_rhs(s: &State, smoother: &Smoother) -> Result<ScalarField> {
    let u = smoother.smooth(&s.m)?;
    advection_with_velocity(&s.image, &u)
}

/// Joint EPDiff/advection tendency sharing one smoothing pass.
pub fn deterministic_tendency(
    m: &VectorField,
    image: &ScalarField,
    smoother: &Smoother,
) -> Result<Tendency> {
    let u = smoother.smooth(m)?;
    Ok(Tendency {
        dm: coadjoint(m, &u)?.scaled(-1.0),
        di: advection_with_velocity(image, &u)?,
    })
}

/// `⟨k * m, m⟩`, the squared velocity norm.
pub fn kinetic_energy(m: &VectorField, smoother: &Smoother) -> Result<f64> {
    inner_l2(&smoother.smooth(m)?, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Storage {
    /// Keep every state, `steps + 1` in total.
    #[default]
    Full,
    /// Keep only the final state.
    Economy,
}

/// Classical RK4 on a `(momentum, image)` system with `dt = 1/steps`.
pub(crate) fn rk4<F>(s0: &State, steps: usize, storage: Storage, rhs: F) -> Result<Vec<State>>
where
    F: Fn(&VectorField, &ScalarField) -> Result<Tendency>,
{
    if steps == 0 {
        return Err(SepdaError::Config("integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut path = Vec::with_capacity(if storage == Storage::Full { steps + 1 } else { 1 });
    let mut cur = s0.clone();
    for step in 0..steps {
        if storage == Storage::Full {
            path.push(cur.clone());
        }
        let stage = |k: &Tendency, c: f64| {
            let mut m = cur.m.clone();
            m.axpy(c * dt, &k.dm);
            let mut i = cur.image.clone();
            i.axpy(c * dt, &k.di);
            (m, i)
        };
        let k1 = rhs(&cur.m, &cur.image)?;
        let (m2, i2) = stage(&k1, 0.5);
        let k2 = rhs(&m2, &i2)?;
        let (m3, i3) = stage(&k2, 0.5);
        let k3 = rhs(&m3, &i3)?;
        let (m4, i4) = stage(&k3, 1.0);
        let k4 = rhs(&m4, &i4)?;
        let w = dt / 6.0;
        for (k, c) in [(&k1, w), (&k2, 2.0 * w), (&k3, 2.0 * w), (&k4, w)] {
            cur.m.axpy(c, &k.dm);
            cur.image.axpy(c, &k.di);
        }
        cur.t = s0.t + (step + 1) as f64 * dt;
        if !cur.is_finite() {
            return Err(SepdaError::BlowUp { step, sample: None });
        }
    }
    path.push(cur);
    Ok(path)
}

/// RK4 shooting of EPDiff together with image advection.
pub fn integrate_deterministic(
    s0: &State,
    smoother: &Smoother,
    steps: usize,
    storage: Storage,
) -> Result<Vec<State>> {
    rk4(s0, steps, storage, |m, i| deterministic_tendency(m, i, smoother))
}

/// Final state of [`integrate_deterministic`].
pub fn shoot(s0: &State, smoother: &Smoother, steps: usize) -> Result<State> {
    let mut path = integrate_deterministic(s0, smoother, steps, Storage::Economy)?;
    Ok(path.pop().expect("rk4 always returns the final state"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid;
    use crate::kernels::KernelSpec;

    fn grid(n: usize) -> Grid {
        Grid::square(n).unwrap()
    }

    fn bump(g: Grid, cx: f64, cy: f64, w: f64, amp: [f64; 2]) -> VectorField {
        VectorField::from_fn(g, |x, y| {
            let e = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp();
            [amp[0] * e, amp[1] * e]
        })
    }

    #[test]
    fn coadjoint_simple_cases() {
        let g = grid(17);
        let m = VectorField::from_fn(g, |x, y| [x * y, y]);
        assert_eq!(coadjoint(&m, &VectorField::zeros(g)).unwrap().max_abs(), 0.0);
        let c = coadjoint(&VectorField::constant(g, [2.0, 0.0]), &VectorField::constant(g, [0.3, -0.7]))
            .unwrap();
        assert!(c.max_abs() < 1e-12);
        let c = coadjoint(&VectorField::from_fn(g, |x, _| [x, 0.0]), &VectorField::constant(g, [1.0, 0.0]))
            .unwrap();
        for i in 1..16 {
            for j in 1..16 {
                let v = c.get(i, j);
                assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_momentum_is_stationary() {
        let g = grid(17);
        let sm = Smoother::new(&KernelSpec::default(), g);
        let img = ScalarField::from_fn(g, |x, y| (3.0 * x).sin() * y);
        let s = State::new(VectorField::zeros(g), img.clone()).unwrap();
        assert_eq!(epdiff_rhs(&s, &sm).unwrap().max_abs(), 0.0);
        let path = integrate_deterministic(&s, &sm, 8, Storage::Full).unwrap();
        assert_eq!(path.len(), 9);
        assert!(path.iter().all(|st| st.image == img));
        assert!((path[8].t - 1.0).abs() < 1e-15);
    }

    #[test]
    fn epdiff_rhs_matches_straight_line_composition() {
        let g = grid(33);
        let spec = KernelSpec::default();
        let sm = Smoother::new(&spec, g);
        let m = bump(g, 0.45, 0.55, 0.1, [0.4, -0.2]);
        let s = State::new(m.clone(), ScalarField::zeros(g)).unwrap();
        let got = epdiff_rhs(&s, &sm).unwrap();

        // Independent composition: each term from the field operators.
        let u = crate::kernels::smooth(&spec, &m).unwrap();
        let jm = jacobian(&m).unwrap();
        let ju = jacobian(&u).unwrap();
        let div = ju.trace();
        let mut max_err: f64 = 0.0;
        for i in 0..33 {
            for j in 0..33 {
                let (a, b) = (jm.at(i, j), ju.at(i, j));
                let (mv, uv) = (m.get(i, j), u.get(i, j));
                for r in 0..2 {
                    let term1 = a[r][0] * uv[0] + a[r][1] * uv[1];
                    let term2 = b[0][r] * mv[0] + b[1][r] * mv[1];
                    let expected = -(term1 + term2 + div.get(i, j) * mv[r]);
                    max_err = max_err.max((got.get(i, j)[r] - expected).abs());
                }
            }
        }
        assert!(max_err < 1e-12, "{max_err}");
    }

    #[test]
    fn advection_cases() {
        let g = grid(17);
        let sm = Smoother::new(&KernelSpec::default(), g);
        let m = bump(g, 0.5, 0.5, 0.1, [0.3, 0.1]);
        let s = State::new(m, ScalarField::constant(g, 2.0)).unwrap();
        assert_eq!(advection_rhs(&s, &sm).unwrap().max_abs(), 0.0);

        let img = ScalarField::from_fn(g, |x, _| x * x);
        let u = VectorField::from_fn(g, |x, y| [0.0, x + y]);
        assert!(advection_with_velocity(&img, &u).unwrap().max_abs() < 1e-12);

        let img = ScalarField::from_fn(g, |x, _| x);
        let u = VectorField::constant(g, [1.0, 0.0]);
        let a = advection_with_velocity(&img, &u).unwrap();
        assert!(a.values().iter().all(|v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn kinetic_energy_cases() {
        let g = grid(21);
        let spec = KernelSpec::default();
        let sm = Smoother::new(&spec, g);
        assert_eq!(kinetic_energy(&VectorField::zeros(g), &sm).unwrap(), 0.0);
        let m = bump(g, 0.4, 0.6, 0.08, [1.0, 0.5]);
        let e = kinetic_energy(&m, &sm).unwrap();
        let e3 = kinetic_energy(&m.scaled(3.0), &sm).unwrap();
        assert!(e > 0.0);
        assert!((e3 - 9.0 * e).abs() < 1e-12 * e3);

        // impulse p at an interior node: ⟨k*m, m⟩ = k(0)|p|² exactly
        let mut m = VectorField::zeros(g);
        let c = g.index(7, 12);
        let p = [0.3, -0.4];
        m.component_mut(0)[c] = p[0] / g.cell_area();
        m.component_mut(1)[c] = p[1] / g.cell_area();
        let e = kinetic_energy(&m, &sm).unwrap();
        let oracle = crate::kernels::kernel_eval(&spec, 0.0).unwrap() * (p[0] * p[0] + p[1] * p[1]);
        assert!((e - oracle).abs() < 1e-10);
    }

    #[test]
    fn storage_mode_does_not_change_result() {
        let g = grid(17);
        let sm = Smoother::new(&KernelSpec::default(), g);
        let img = ScalarField::from_fn(g, |x, y| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp());
        let s = State::new(bump(g, 0.5, 0.5, 0.1, [0.2, 0.0]), img).unwrap();
        let full = integrate_deterministic(&s, &sm, 6, Storage::Full).unwrap();
        let eco = integrate_deterministic(&s, &sm, 6, Storage::Economy).unwrap();
        assert_eq!(eco.len(), 1);
        assert_eq!(full.last().unwrap(), &eco[0]);
    }

    #[test]
    fn blow_up_names_step() {
        let g = grid(9);
        let sm = Smoother::new(&KernelSpec::default(), g);
        let mut m = VectorField::zeros(g);
        m.component_mut(0)[g.index(4, 4)] = 1e300;
        let s = State::new(m, ScalarField::zeros(g)).unwrap();
        match integrate_deterministic(&s, &sm, 4, Storage::Economy) {
            Err(SepdaError::BlowUp { step, sample: None }) => assert_eq!(step, 0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}

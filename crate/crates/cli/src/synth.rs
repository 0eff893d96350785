//! Closed-form synthetic test images with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use sepda::fields::{Grid, ScalarField};
use sepda::{Result, SepdaError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 2],
    pub width: f64,
    /// Peak contribution in `[0, 1]`.
    pub amplitude: f64,
}

impl Blob {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.center[0]).powi(2) + (y - self.center[1]).powi(2);
        self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticImageSpec {
    /// `1 - Π(1 - a_k g_k)`: overlapping blobs saturate below 1.
    BlobSum { blobs: Vec<Blob> },
    /// `exp(-(r - R)² / 2w²)` around `center`.
    Ring { center: [f64; 2], radius: f64, thickness: f64 },
    /// `½(1 + c sin(2π p_x x) sin(2π p_y y))`.
    CheckerSmooth { periods: [f64; 2], contrast: f64 },
}

impl SyntheticImageSpec {
    /// Ten-blob test image: a broad body with smaller features spread over
    /// the centre of the square, shifted by `dx` along `x`.
    pub fn phantom(dx: f64) -> Self {
        let blobs = [
            ([0.5, 0.5], 0.2, 0.5),
            ([0.35, 0.35], 0.07, 0.8),
            ([0.65, 0.4], 0.06, 0.7),
            ([0.45, 0.68], 0.08, 0.9),
            ([0.7, 0.7], 0.05, 0.6),
            ([0.28, 0.6], 0.05, 0.7),
            ([0.55, 0.25], 0.05, 0.6),
            ([0.8, 0.58], 0.05, 0.7),
            ([0.3, 0.8], 0.05, 0.7),
            ([0.75, 0.22], 0.05, 0.6),
        ];
        SyntheticImageSpec::BlobSum {
            blobs: blobs
                .iter()
                .map(|&(c, width, amplitude)| Blob { center: [c[0] + dx, c[1]], width, amplitude })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SepdaError::Config(m.into()));
        match self {
            SyntheticImageSpec::BlobSum { blobs } => {
                for b in blobs {
                    if !(b.width > 0.0) || !(0.0..=1.0).contains(&b.amplitude) || !b.center.iter().all(|c| c.is_finite()) {
                        return bad("blobs need positive width, amplitude in [0, 1] and a finite centre");
                    }
                }
            }
            SyntheticImageSpec::Ring { center, radius, thickness } => {
                if !(*thickness > 0.0) || !(*radius >= 0.0) || !center.iter().all(|c| c.is_finite()) {
                    return bad("ring needs nonnegative radius and positive thickness");
                }
            }
            SyntheticImageSpec::CheckerSmooth { periods, contrast } => {
                if !periods.iter().all(|p| p.is_finite()) || !(0.0..=1.0).contains(contrast) {
                    return bad("checker needs finite periods and contrast in [0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::TAU;
        let v = match self {
            SyntheticImageSpec::BlobSum { blobs } => {
                1.0 - blobs.iter().map(|b| 1.0 - b.eval(x, y)).product::<f64>()
            }
            SyntheticImageSpec::Ring { center, radius, thickness } => {
                let r = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
                (-(r - radius).powi(2) / (2.0 * thickness * thickness)).exp()
            }
            SyntheticImageSpec::CheckerSmooth { periods, contrast } => {
                0.5 * (1.0 + contrast * (TAU * periods[0] * x).sin() * (TAU * periods[1] * y).sin())
            }
        };
        v.clamp(0.0, 1.0)
    }
}

pub fn synth_image(spec: &SyntheticImageSpec, grid: Grid) -> Result<ScalarField> {
    spec.validate()?;
    Ok(ScalarField::from_fn(grid, |x, y| spec.eval(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Grid {
        Grid::square(33).unwrap()
    }

    #[test]
    fn no_blobs_is_black() {
        let f = synth_image(&SyntheticImageSpec::BlobSum { blobs: vec![] }, grid()).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centred_blob_peaks_at_centre() {
        let spec = SyntheticImageSpec::BlobSum {
            blobs: vec![Blob { center: [0.5, 0.5], width: 0.1, amplitude: 0.9 }],
        };
        let f = synth_image(&spec, grid()).unwrap();
        let (_, hi) = f.min_max();
        assert_eq!(f.get(16, 16), hi);
        assert!((hi - 0.9).abs() < 1e-15);
    }

    #[test]
    fn phantom_shift_moves_the_image() {
        let g = grid();
        let a = synth_image(&SyntheticImageSpec::phantom(0.0), g).unwrap();
        let b = synth_image(&SyntheticImageSpec::phantom(0.25), g).unwrap();
        // x = 0.25 in a matches x = 0.5 in b
        for j in 0..33 {
            assert!((a.get(8, j) - b.get(16, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SyntheticImageSpec::BlobSum { blobs: vec![Blob { center: [0.5, 0.5], width: 0.0, amplitude: 0.5 }] },
            SyntheticImageSpec::BlobSum { blobs: vec![Blob { center: [0.5, 0.5], width: 0.1, amplitude: 1.5 }] },
            SyntheticImageSpec::Ring { center: [0.5, 0.5], radius: 0.2, thickness: -0.1 },
            SyntheticImageSpec::CheckerSmooth { periods: [1.0, 2.0], contrast: 2.0 },
        ];
        for s in bad {
            assert!(synth_image(&s, grid()).is_err());
        }
    }

    fn blob() -> impl Strategy<Value = Blob> {
        (-0.2..1.2f64, -0.2..1.2f64, 0.01..0.5f64, 0.0..=1.0f64)
            .prop_map(|(x, y, width, amplitude)| Blob { center: [x, y], width, amplitude })
    }

    fn spec() -> impl Strategy<Value = SyntheticImageSpec> {
        prop_oneof![
            prop::collection::vec(blob(), 0..12).prop_map(|blobs| SyntheticImageSpec::BlobSum { blobs }),
            (-0.5..1.5f64, -0.5..1.5f64, 0.0..0.8f64, 0.005..0.3f64).prop_map(|(x, y, radius, thickness)| {
                SyntheticImageSpec::Ring { center: [x, y], radius, thickness }
            }),
            (-6.0..6.0f64, -6.0..6.0f64, 0.0..=1.0f64).prop_map(|(px, py, contrast)| {
                SyntheticImageSpec::CheckerSmooth { periods: [px, py], contrast }
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn values_stay_in_unit_interval(s in spec()) {
            let f = synth_image(&s, Grid::square(17).unwrap()).unwrap();
            prop_assert!(f.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

//! Run configuration.
//!
//! A config file is TOML. The optional top-level `profile` key picks the
//! defaults (`paper` or `desk`); every other key overrides them. Relative
//! paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sepda::estimation::{EstimatorConfig, ParamLayout};
use sepda::fields::Grid;
use sepda::kernels::KernelSpec;
use sepda::noise_models::{
    ground_truth_amplitudes, hexagonal_lattice_14, sine_coefficients_of, sine_target, square_lattice, Family,
    NoiseModel, BSPLINE_WIDTH, GAUSSIAN_HEX_WIDTH_SQ, GAUSSIAN_SQUARE_FIXED_WIDTH_SQ,
};
use sepda::sepda_sde::SdeConfig;

use crate::synth::SyntheticImageSpec;

pub const MIN_GRID: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageSource {
    Synthetic { spec: SyntheticImageSpec },
    /// A scalar SEPDA-F32 file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Lattice {
    /// The 14-point lattice with rows of 3, 4, 4, 3.
    Hexagonal14,
    Square { rows: usize, cols: usize },
    Centers { centers: Vec<[f64; 2]> },
    /// No centres; for the sinusoidal family.
    None,
}

impl Lattice {
    pub fn centers(&self) -> anyhow::Result<Vec<[f64; 2]>> {
        Ok(match self {
            Lattice::Hexagonal14 => hexagonal_lattice_14(),
            Lattice::Square { rows, cols } => square_lattice(*rows, *cols)?,
            Lattice::Centers { centers } => centers.clone(),
            Lattice::None => Vec::new(),
        })
    }
}

/// A noise model as written in the config: structure plus amplitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDecl {
    pub family: Family,
    pub lattice: Lattice,
    /// Gaussian `τ` or B-spline radius scale; unused by sinusoids.
    #[serde(default)]
    pub width: f64,
    #[serde(default)]
    pub max_frequency: usize,
    /// Amplitudes used for sampling and forward moments.
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub normalized_gaussian: bool,
    /// Estimate the shared width along with the amplitudes.
    #[serde(default)]
    pub free_width: bool,
}

impl NoiseDecl {
    pub fn model(&self) -> anyhow::Result<NoiseModel> {
        let m = match self.family {
            Family::Sinusoidal => NoiseModel::sinusoidal(self.max_frequency, self.amplitudes.clone())?,
            f => NoiseModel::lattice(f, self.lattice.centers()?, self.width, self.amplitudes.clone())?,
        };
        Ok(m.with_normalized_gaussian(self.normalized_gaussian))
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout { free_width: self.free_width }
    }
}

/// The parametrizations compared in the recovery experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    GaussianSquare,
    GaussianHexagonal,
    BsplineHexagonal,
    Sinusoidal,
}

impl Parametrization {
    pub fn label(self) -> &'static str {
        match self {
            Parametrization::GaussianSquare => "Gaussian square",
            Parametrization::GaussianHexagonal => "Gaussian hexagonal",
            Parametrization::BsplineHexagonal => "B-spline hexagonal",
            Parametrization::Sinusoidal => "Sinusoidal",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Parametrization::GaussianSquare => "gaussian-square",
            Parametrization::GaussianHexagonal => "gaussian-hexagonal",
            Parametrization::BsplineHexagonal => "bspline-hexagonal",
            Parametrization::Sinusoidal => "sinusoidal",
        }
    }

    /// Structure with the reference ground-truth amplitudes (before any
    /// rescaling to the image).
    pub fn reference(self) -> anyhow::Result<NoiseDecl> {
        let (family, lattice, width, max_frequency) = match self {
            Parametrization::GaussianSquare => {
                (Family::GaussianLattice, Lattice::Square { rows: 4, cols: 4 }, GAUSSIAN_SQUARE_FIXED_WIDTH_SQ.sqrt(), 0)
            }
            Parametrization::GaussianHexagonal => {
                (Family::GaussianLattice, Lattice::Hexagonal14, GAUSSIAN_HEX_WIDTH_SQ.sqrt(), 0)
            }
            Parametrization::BsplineHexagonal => (Family::BsplineLattice, Lattice::Hexagonal14, BSPLINE_WIDTH, 0),
            Parametrization::Sinusoidal => (Family::Sinusoidal, Lattice::None, 0.0, 4),
        };
        let amplitudes = match family {
            Family::Sinusoidal => sine_coefficients_of(sine_target, max_frequency)?,
            f => ground_truth_amplitudes(f, lattice.centers()?.len())?,
        };
        Ok(NoiseDecl {
            family,
            lattice,
            width,
            max_frequency,
            amplitudes,
            normalized_gaussian: false,
            free_width: false,
        })
    }
}

/// Misspecified ground truths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundTruth {
    SingleGaussian,
    ThreeGaussians,
}

impl GroundTruth {
    pub fn label(self) -> &'static str {
        match self {
            GroundTruth::SingleGaussian => "Single Gaussian",
            GroundTruth::ThreeGaussians => "Three Gaussian",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            GroundTruth::SingleGaussian => "single",
            GroundTruth::ThreeGaussians => "three",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Recovery runs: peak of the truth norm field times `max|∇I₀|`.
    pub noise_level: f64,
    /// Misspecification runs: the same measure for the single-field truth;
    /// the three-field truth matches its norm-field energy.
    pub truth_level: f64,
    /// Recovery runs: parametrizations to sample from and fit.
    pub parametrizations: Vec<Parametrization>,
    /// Recovery runs start at this fraction of the mean true amplitude.
    pub init_fraction: f64,
    /// Misspecification runs.
    pub truths: Vec<GroundTruth>,
    pub fits: Vec<Parametrization>,
    pub single_width: f64,
    pub three_width: f64,
    /// Starting norm-field level of the fits, on the `noise_level` scale.
    pub fit_init_level: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::A,
            noise_level: 0.5,
            truth_level: 0.35,
            parametrizations: vec![
                Parametrization::GaussianSquare,
                Parametrization::GaussianHexagonal,
                Parametrization::BsplineHexagonal,
                Parametrization::Sinusoidal,
            ],
            init_fraction: 0.5,
            truths: vec![GroundTruth::SingleGaussian, GroundTruth::ThreeGaussians],
            fits: vec![
                Parametrization::GaussianSquare,
                Parametrization::GaussianHexagonal,
                Parametrization::BsplineHexagonal,
            ],
            single_width: 0.2,
            three_width: 0.08,
            fit_init_level: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    pub lambda: f64,
    pub steps: usize,
    /// Control points on a `rows × cols` lattice.
    pub control: [usize; 2],
    pub optimizer: EstimatorConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            steps: 64,
            control: [3, 3],
            optimizer: EstimatorConfig {
                similarity: sepda::estimation::Similarity::Ssd,
                learning_rate: 0.05,
                max_iterations: 60,
                scale_floor: 0.05,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub optimizer: EstimatorConfig,
    /// Starting θ; defaults to `init_fraction` of the mean sampling amplitude.
    pub init: Option<Vec<f64>>,
    /// Known θ₀ for the relative error.
    pub truth: Option<Vec<f64>>,
    pub moment_steps: Option<usize>,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            optimizer: EstimatorConfig { max_iterations: 300, ..Default::default() },
            init: None,
            truth: None,
            moment_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Initial momentum (vector SEPDA-F32); zero when absent.
    pub momentum: Option<PathBuf>,
    /// A sample directory written by `sample`.
    pub samples: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub grid: usize,
    pub kernel: KernelSpec,
    pub image: ImageSource,
    pub target: ImageSource,
    pub noise: NoiseDecl,
    pub sde: SdeConfig,
    pub estimate: EstimateSection,
    pub registration: RegistrationConfig,
    pub inputs: Inputs,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let noise = Parametrization::GaussianHexagonal.reference().expect("reference model is valid");
        let mut cfg = Self {
            profile,
            grid: 128,
            kernel: KernelSpec::default(),
            image: ImageSource::Synthetic { spec: SyntheticImageSpec::phantom(0.0) },
            target: ImageSource::Synthetic { spec: SyntheticImageSpec::phantom(0.03) },
            noise,
            sde: SdeConfig { steps: 128, base_seed: 0, n_samples: 500, keep_momenta: false },
            estimate: EstimateSection::default(),
            registration: RegistrationConfig::default(),
            inputs: Inputs::default(),
            experiment: ExperimentConfig::default(),
        };
        if profile == Profile::Desk {
            cfg.grid = 64;
            cfg.sde.steps = 32;
            cfg.sde.n_samples = 200;
            cfg.registration.steps = 32;
            cfg.registration.optimizer.max_iterations = 30;
            cfg.estimate.optimizer.learning_rate = 0.05;
            cfg.estimate.optimizer.max_iterations = 60;
            cfg.estimate.optimizer.scale_floor = 1e-6;
            cfg.estimate.optimizer.tolerance = 1e-9;
            cfg.experiment.parametrizations =
                vec![Parametrization::GaussianHexagonal, Parametrization::BsplineHexagonal];
            cfg.experiment.fits = vec![Parametrization::GaussianHexagonal];
        }
        cfg
    }

    /// Parses `text`, filling unset keys from the selected profile.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let profile = match user.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).context("unknown profile")?,
            None => Profile::default(),
        };
        let mut base = toml::Table::try_from(Self::defaults(profile)).context("serializing defaults")?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for src in [&mut self.image, &mut self.target] {
            if let ImageSource::File { path } = src {
                fix(path);
            }
        }
        if let Some(p) = &mut self.inputs.momentum {
            fix(p);
        }
        if let Some(p) = &mut self.inputs.samples {
            fix(p);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.grid < MIN_GRID {
            bail!("grid must have at least {MIN_GRID} nodes per axis, got {}", self.grid);
        }
        self.sde.validate()?;
        self.estimate.optimizer.validate()?;
        self.registration.optimizer.validate()?;
        self.noise.model()?;
        if self.registration.lambda <= 0.0 || self.registration.steps == 0 {
            bail!("registration needs lambda > 0 and at least one step");
        }
        if self.estimate.moment_steps == Some(0) {
            bail!("moment_steps must be at least 1");
        }
        for src in [&self.image, &self.target] {
            if let ImageSource::Synthetic { spec } = src {
                spec.validate()?;
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> anyhow::Result<Grid> {
        Ok(Grid::square(self.grid)?)
    }

    pub fn moment_steps(&self) -> usize {
        self.estimate.moment_steps.unwrap_or(self.sde.steps)
    }

    /// Fully resolved config as TOML, the input to the config digest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Deep merge: tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sepda::noise_models::THREE_FIELD_CENTERS;

    #[test]
    fn empty_config_is_paper_scale() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!((c.grid, c.sde.steps, c.sde.n_samples), (128, 128, 500));
        assert_eq!(c.noise.amplitudes.len(), 14);
        assert_eq!(c.kernel, KernelSpec::default());
    }

    #[test]
    fn desk_profile_and_overrides() {
        let c = RunConfig::from_toml("profile = \"desk\"\n[sde]\nn_samples = 7\n").unwrap();
        assert_eq!((c.grid, c.sde.steps, c.sde.n_samples), (64, 32, 7));
        assert_eq!(c.moment_steps(), 32);
        let c = RunConfig::from_toml("grid = 16\nkernel = [[1.0, 0.1]]\n[estimate.optimizer]\nsimilarity = \"ssd\"\n").unwrap();
        assert_eq!(c.grid, 16);
        assert_eq!(c.kernel.terms(), &[(1.0, 0.1)]);
        assert_eq!(c.estimate.optimizer.similarity, sepda::estimation::Similarity::Ssd);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "grid = 7",
            "nonsense = 1",
            "profile = \"huge\"",
            "[sde]\nsteps = 0",
            "[estimate.optimizer]\nlearning_rate = -1.0",
            "kernel = [[1.0, -0.1]]",
            "[noise]\namplitudes = [1.0]",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = RunConfig::defaults(Profile::Desk);
        let back = RunConfig::from_toml(&c.canonical()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn reference_models_build() {
        for p in [
            Parametrization::GaussianSquare,
            Parametrization::GaussianHexagonal,
            Parametrization::BsplineHexagonal,
            Parametrization::Sinusoidal,
        ] {
            let d = p.reference().unwrap();
            let m = d.model().unwrap();
            assert_eq!(m.amplitudes().len(), m.shape_count());
        }
        assert_eq!(THREE_FIELD_CENTERS.len(), 3);
    }
}

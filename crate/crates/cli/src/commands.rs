//! `register`, `sample`, `moments`, `estimate` and `experiment`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use sepda::epdiff::{shoot, State};
use sepda::estimation::{
    estimate, register_shooting, relative_error, ssd, ControlPointMomentum, EstimationReport, MomentFixture,
    ParamLayout,
};
use sepda::fields::{gradient, Grid, ScalarField, VectorField};
use sepda::io::{load_scalar, load_vector};
use sepda::kernels::Smoother;
use sepda::moments::{integrate_moments, MomentState};
use sepda::noise_models::{Family, NoiseModel, THREE_FIELD_CENTERS};
use sepda::sepda_sde::{deterministic_endpoint, sample_endpoints, SampleSet};

use crate::artifacts::{join_floats, sha256_hex, Artifacts};
use crate::config::{ExperimentKind, GroundTruth, ImageSource, RunConfig};
use crate::synth::synth_image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Register,
    Sample,
    Moments,
    Estimate,
    Experiment,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Register => "register",
            Command::Sample => "sample",
            Command::Moments => "moments",
            Command::Estimate => "estimate",
            Command::Experiment => "experiment",
        }
    }
}

/// Runs `cmd`, always leaving a manifest in `out`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let mut art = Artifacts::create(out, cmd.name())?;
    art.note("config_sha256", sha256_hex(cfg.canonical().as_bytes()));
    let result = match cmd {
        Command::Register => cmd_register(cfg, &mut art),
        Command::Sample => cmd_sample(cfg, &mut art),
        Command::Moments => cmd_moments(cfg, &mut art),
        Command::Estimate => cmd_estimate(cfg, &mut art),
        Command::Experiment => cmd_experiment(cfg, &mut art),
    };
    let stage = art.current_stage();
    art.finish(result.as_ref().map(|_| ()))?;
    result.with_context(|| format!("{} failed during stage `{stage}`", cmd.name()))
}

struct Setup {
    grid: Grid,
    smoother: Smoother,
    image: ScalarField,
}

fn load_image(src: &ImageSource, grid: Grid) -> anyhow::Result<ScalarField> {
    let f = match src {
        ImageSource::Synthetic { spec } => synth_image(spec, grid)?,
        ImageSource::File { path } => load_scalar(path).with_context(|| format!("reading {}", path.display()))?,
    };
    if f.grid() != grid {
        bail!("image is {}×{}, config grid is {}", f.grid().nx(), f.grid().ny(), grid.nx());
    }
    Ok(f)
}

fn setup(cfg: &RunConfig) -> anyhow::Result<Setup> {
    let grid = cfg.grid()?;
    Ok(Setup { grid, smoother: Smoother::new(&cfg.kernel, grid), image: load_image(&cfg.image, grid)? })
}

fn initial_momentum(cfg: &RunConfig, grid: Grid) -> anyhow::Result<VectorField> {
    match &cfg.inputs.momentum {
        None => Ok(VectorField::zeros(grid)),
        Some(p) => {
            let m = load_vector(p).with_context(|| format!("reading {}", p.display()))?;
            if m.grid() != grid {
                bail!("momentum file grid differs from the config grid");
            }
            Ok(m)
        }
    }
}

fn model_digest(model: &NoiseModel) -> String {
    sha256_hex(serde_json::to_string(model).expect("model serializes").as_bytes())
}

fn register(cfg: &RunConfig, s: &Setup, art: &mut Artifacts) -> anyhow::Result<VectorField> {
    art.stage("register");
    let target = load_image(&cfg.target, s.grid)?;
    let r = &cfg.registration;
    let cp = ControlPointMomentum::lattice(r.control[0], r.control[1])?;
    let (m0, report) = register_shooting(&s.image, &target, &cp, &s.smoother, r.lambda, r.steps, &r.optimizer)?;
    let warped = shoot(&State::new(m0.clone(), s.image.clone())?, &s.smoother, r.steps)?.image;
    art.note("registration_ssd_initial", format!("{:e}", ssd(&s.image, &target)?));
    art.note("registration_ssd_final", format!("{:e}", ssd(&warped, &target)?));
    art.note("registration_momenta", join_floats(&report.best_theta));
    art.field("m0.f32", m0.clone())?;
    art.field("registered.f32", warped.clone())?;
    art.pgm("registered.pgm", &warped)?;
    art.report("registration.csv", &report)?;
    Ok(m0)
}

fn cmd_register(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    art.stage("load");
    let s = setup(cfg)?;
    register(cfg, &s, art)?;
    Ok(())
}

fn write_samples(art: &mut Artifacts, dir: &str, set: &SampleSet) -> anyhow::Result<()> {
    for (i, img) in set.images.iter().enumerate() {
        art.field(&format!("{dir}/sample_{i:05}.f32"), img.clone())?;
    }
    if let Some(ms) = &set.momenta {
        for (i, m) in ms.iter().enumerate() {
            art.field(&format!("{dir}/momentum_{i:05}.f32"), m.clone())?;
        }
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    art.stage("load");
    let s = setup(cfg)?;
    let m0 = initial_momentum(cfg, s.grid)?;
    let model = cfg.noise.model()?;
    art.note("model_sha256", model_digest(&model));
    art.note("base_seed", cfg.sde.base_seed);
    art.note("seeds", "ChaCha8 keyed by base_seed, stream = sample index");
    art.note("n_samples", cfg.sde.n_samples);
    art.note("steps", cfg.sde.steps);
    art.stage("sample");
    let s0 = State::new(m0, s.image.clone())?;
    let set = sample_endpoints(&s0, &model.fields(s.grid)?, &s.smoother, &cfg.sde)?;
    art.stage("write");
    write_samples(art, "samples", &set)?;
    let mean = set.mean_image()?;
    let det = deterministic_endpoint(&s0, &s.smoother, cfg.sde.steps)?.image;
    art.field("mean.f32", mean.clone())?;
    art.field("deterministic.f32", det.clone())?;
    art.pgm("mean.pgm", &mean)?;
    art.pgm("meandiff.pgm", &mean.sub(&det)?.map(f64::abs))?;
    Ok(())
}

fn cmd_moments(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    art.stage("load");
    let s = setup(cfg)?;
    let m0 = initial_momentum(cfg, s.grid)?;
    let model = cfg.noise.model()?;
    art.note("model_sha256", model_digest(&model));
    art.note("steps", cfg.moment_steps());
    art.stage("moments");
    let end = integrate_moments(&MomentState::new(m0, s.image)?, &model.fields(s.grid)?, &s.smoother, cfg.moment_steps())?;
    art.stage("write");
    art.field("mean_image.f32", end.mean_image.clone())?;
    art.field("mean_momentum.f32", end.mean_m)?;
    art.pgm("mean_image.pgm", &end.mean_image)?;
    Ok(())
}

/// Reads `sample_*.f32` from `dir` in name order.
pub fn load_samples(dir: &Path, grid: Grid) -> anyhow::Result<SampleSet> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("sample_") && n.ends_with(".f32"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no sample files in {}", dir.display());
    }
    let images = names
        .iter()
        .map(|n| {
            let f = load_scalar(dir.join(n)).with_context(|| format!("reading {n}"))?;
            if f.grid() != grid {
                bail!("{n} does not match the config grid");
            }
            Ok(f)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(SampleSet { images, momenta: None })
}

fn default_init(amplitudes: &[f64], fraction: f64) -> Vec<f64> {
    let mean = amplitudes.iter().map(|a| a.abs()).sum::<f64>() / amplitudes.len().max(1) as f64;
    vec![fraction * mean; amplitudes.len()]
}

fn cmd_estimate(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    art.stage("load");
    let s = setup(cfg)?;
    let m0 = initial_momentum(cfg, s.grid)?;
    let Some(dir) = &cfg.inputs.samples else {
        bail!("estimate needs inputs.samples pointing at a sample directory");
    };
    let samples = load_samples(dir, s.grid)?;
    let model = cfg.noise.model()?;
    let layout = cfg.noise.layout();
    let mut init =
        cfg.estimate.init.clone().unwrap_or_else(|| default_init(model.amplitudes(), cfg.experiment.init_fraction));
    if layout.free_width && init.len() == model.shape_count() {
        init.push(model.width());
    }
    art.note("model_sha256", model_digest(&model));
    art.note("n_samples", samples.len());
    art.note("similarity", cfg.estimate.optimizer.similarity.name());
    art.stage("estimate");
    let fx = MomentFixture::from_samples(
        MomentState::new(m0, s.image)?,
        model,
        layout,
        &s.smoother,
        cfg.moment_steps(),
        &samples,
        cfg.estimate.optimizer.similarity,
    )?;
    let mut report = estimate(&fx, &init, &cfg.estimate.optimizer)?;
    if let Some(truth) = &cfg.estimate.truth {
        report = report.with_truth(truth)?;
    }
    art.stage("write");
    art.report("report.csv", &report)?;
    let mut theta = format!(
        "final_theta = {}\nbest_theta = {}\nbest_loss = {:e}\niterations = {}\ntermination = {:?}\n",
        join_floats(&report.final_theta),
        join_floats(&report.best_theta),
        report.best_loss,
        report.iterations.len(),
        report.termination
    );
    if let Some(e) = report.relative_error {
        theta.push_str(&format!("relative_error = {e:e}\n"));
        art.note("relative_error", format!("{e:e}"));
    }
    art.bytes("theta.txt", theta.as_bytes())?;
    art.note("final_theta", join_floats(&report.final_theta));
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<()> {
    art.stage("load");
    let s = setup(cfg)?;
    let m0 = register(cfg, &s, art)?;
    art.note("experiment", format!("{:?}", cfg.experiment.kind));
    match cfg.experiment.kind {
        ExperimentKind::A => experiment_a(cfg, &s, &m0, art),
        ExperimentKind::B => experiment_b(cfg, &s, &m0, art),
    }
}

/// Everything one sample-and-fit run produces.
pub struct FitOutcome {
    pub report: EstimationReport,
    pub mean: ScalarField,
    pub predicted: ScalarField,
}

fn sample(cfg: &RunConfig, s: &Setup, m0: &VectorField, truth: &NoiseModel) -> anyhow::Result<SampleSet> {
    let s0 = State::new(m0.clone(), s.image.clone())?;
    Ok(sample_endpoints(&s0, &truth.fields(s.grid)?, &s.smoother, &cfg.sde)?)
}

fn fit(
    cfg: &RunConfig,
    s: &Setup,
    m0: &VectorField,
    set: &SampleSet,
    structure: &NoiseModel,
    init: &[f64],
) -> anyhow::Result<FitOutcome> {
    let fx = MomentFixture::from_samples(
        MomentState::new(m0.clone(), s.image.clone())?,
        structure.clone(),
        ParamLayout::default(),
        &s.smoother,
        cfg.moment_steps(),
        set,
        cfg.estimate.optimizer.similarity,
    )?;
    let report = estimate(&fx, init, &cfg.estimate.optimizer)?;
    let predicted = fx.predicted_mean(&report.final_theta)?;
    Ok(FitOutcome { report, mean: fx.target, predicted })
}

/// `max|∇I₀|`, the intensity scale noise amplitudes are measured against.
fn gradient_scale(image: &ScalarField) -> anyhow::Result<f64> {
    let g = gradient(image)?.norm().max_abs();
    if g == 0.0 {
        bail!("image is constant; noise has nothing to act on");
    }
    Ok(g)
}

/// Rescales `model` so that `max‖Σσ‖ · max|∇I₀| = level`.
fn scale_to_level(model: &NoiseModel, grid: Grid, grad_scale: f64, level: f64) -> anyhow::Result<NoiseModel> {
    let peak = model.norm_field(grid).max_abs();
    if peak == 0.0 {
        bail!("noise model has a vanishing norm field");
    }
    let k = level / (grad_scale * peak);
    Ok(model.with_amplitudes(model.amplitudes().iter().map(|a| a * k).collect())?)
}

fn meandiff(
    art: &mut Artifacts,
    slug: &str,
    out: &FitOutcome,
    det: &ScalarField,
) -> anyhow::Result<()> {
    art.pgm(&format!("meandiff/{slug}_observed.pgm"), &out.mean.sub(det)?.map(f64::abs))?;
    art.pgm(&format!("meandiff/{slug}_predicted.pgm"), &out.predicted.sub(det)?.map(f64::abs))
}

fn experiment_a(cfg: &RunConfig, s: &Setup, m0: &VectorField, art: &mut Artifacts) -> anyhow::Result<()> {
    let e = &cfg.experiment;
    let gscale = gradient_scale(&s.image)?;
    let det = deterministic_endpoint(&State::new(m0.clone(), s.image.clone())?, &s.smoother, cfg.sde.steps)?.image;
    let mut table = String::from("parametrization,relative_error,iterations,final_loss,truth_loss\n");
    for &p in &e.parametrizations {
        art.stage("sample-and-fit");
        let reference = p.reference()?.model()?;
        let truth = scale_to_level(&reference, s.grid, gscale, e.noise_level)?;
        // the correction terms are even in each amplitude, so only magnitudes are identifiable
        let truth = truth.with_amplitudes(truth.amplitudes().iter().map(|a| a.abs()).collect())?;
        let init = default_init(truth.amplitudes(), e.init_fraction);
        let set = sample(cfg, s, m0, &truth).with_context(|| format!("sampling {}", p.label()))?;
        let out = fit(cfg, s, m0, &set, &truth, &init).with_context(|| format!("fitting {}", p.label()))?;
        let err = relative_error(truth.amplitudes(), &out.report.final_theta)?;
        let truth_loss = cfg.estimate.optimizer.similarity.eval(
            &integrate_moments(
                &MomentState::new(m0.clone(), s.image.clone())?,
                &truth.fields(s.grid)?,
                &s.smoother,
                cfg.moment_steps(),
            )?
            .mean_image,
            &out.mean,
        )?;
        art.stage("write");
        table.push_str(&format!(
            "{},{err:e},{},{:e},{truth_loss:e}\n",
            p.label(),
            out.report.iterations.len(),
            out.report.iterations.last().map_or(f64::NAN, |it| it.loss),
        ));
        art.report(&format!("reports/{}.csv", p.slug()), &out.report)?;
        art.bytes(
            &format!("reports/{}_theta.txt", p.slug()),
            format!(
                "truth = {}\nfinal_theta = {}\nrelative_error = {err:e}\n",
                join_floats(truth.amplitudes()),
                join_floats(&out.report.final_theta)
            )
            .as_bytes(),
        )?;
        meandiff(art, p.slug(), &out, &det)?;
        art.note(&format!("relative_error_{}", p.slug()), format!("{err:e}"));
    }
    art.bytes("table1.csv", table.as_bytes())
}

/// Truth model for a misspecification run.
pub fn misspecified_truth(
    t: GroundTruth,
    e: &crate::config::ExperimentConfig,
    grid: Grid,
    grad_scale: f64,
) -> anyhow::Result<NoiseModel> {
    let single =
        scale_to_level(&NoiseModel::lattice(Family::GaussianLattice, vec![[0.5, 0.5]], e.single_width, vec![1.0])?, grid, grad_scale, e.truth_level)?;
    match t {
        GroundTruth::SingleGaussian => Ok(single),
        GroundTruth::ThreeGaussians => {
            let three =
                NoiseModel::lattice(Family::GaussianLattice, THREE_FIELD_CENTERS.to_vec(), e.three_width, vec![1.0; 3])?;
            let energy = |m: &NoiseModel| {
                let n = m.norm_field(grid);
                sepda::fields::inner_l2(&n, &n)
            };
            let a = (energy(&single)? / energy(&three)?).sqrt();
            Ok(three.with_amplitudes(vec![a; 3])?)
        }
    }
}

fn experiment_b(cfg: &RunConfig, s: &Setup, m0: &VectorField, art: &mut Artifacts) -> anyhow::Result<()> {
    let e = &cfg.experiment;
    let gscale = gradient_scale(&s.image)?;
    let det = deterministic_endpoint(&State::new(m0.clone(), s.image.clone())?, &s.smoother, cfg.sde.steps)?.image;
    let zero = ScalarField::zeros(s.grid);
    let mut table = String::from("ground_truth,fit,norm_field_ssd,baseline_ssd,initial_ssd\n");
    for &t in &e.truths {
        let truth = misspecified_truth(t, e, s.grid, gscale)?;
        let truth_norm = truth.norm_field(s.grid);
        let baseline = ssd(&truth_norm, &zero)?;
        art.pgm(&format!("norm_fields/{}_truth.pgm", t.slug()), &truth_norm)?;
        art.stage("sample");
        let set = sample(cfg, s, m0, &truth).with_context(|| format!("sampling {}", t.label()))?;
        for &p in &e.fits {
            art.stage("fit");
            let start = scale_to_level(&p.reference()?.model()?, s.grid, gscale, e.fit_init_level)?;
            let structure = start.with_amplitudes(vec![1.0; start.shape_count()])?;
            let init = start.amplitudes().to_vec();
            let out = fit(cfg, s, m0, &set, &structure, &init)
                .with_context(|| format!("{} fit to {}", p.label(), t.label()))?;
            art.stage("write");
            let fit_norm = structure.with_amplitudes(out.report.final_theta.clone())?.norm_field(s.grid);
            let err = ssd(&fit_norm, &truth_norm)?;
            let init_err = ssd(&start.norm_field(s.grid), &truth_norm)?;
            table.push_str(&format!("{},{},{err:e},{baseline:e},{init_err:e}\n", t.label(), p.label()));
            let slug = format!("{}_{}", t.slug(), p.slug());
            art.report(&format!("reports/{slug}.csv"), &out.report)?;
            art.pgm(&format!("norm_fields/{slug}.pgm"), &fit_norm)?;
            meandiff(art, &slug, &out, &det)?;
            art.note(&format!("norm_field_ssd_{slug}"), format!("{err:e}"));
        }
    }
    art.bytes("table2.csv", table.as_bytes())
}

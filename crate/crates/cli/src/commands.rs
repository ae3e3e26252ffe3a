//! Subcommand definitions and their implementations. Each command reads
//! its inputs from, and writes its outputs to, one work directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use latentcrf::checkpoint::write_atomic;
use latentcrf::crf::CrfParams;
use latentcrf::metrics::{frechet_from_features, FeatureExtractor};
use latentcrf::params::ParamSet;
use latentcrf::persist::Checkpoint;
use latentcrf::pipeline::{HybridPipeline, PipelineConfig, StageCost};
use latentcrf::report::{loss_curve_csv, series_csv, RunReport};
use latentcrf::surrogate::{Dataset, DenoiserParams, GuidedDenoiser};

use crate::checks;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::workflow::{self, Stream};

pub const DATASET_FILE: &str = "dataset.lcrf";
pub const DENOISER_FILE: &str = "denoiser.lcrf";
pub const FEATURES_FILE: &str = "features.lcrf";
pub const CRF_STAGE1_FILE: &str = "crf_stage1.lcrf";
pub const DISCRIMINATOR_FILE: &str = "discriminator.lcrf";
pub const CRF_FILE: &str = "crf.lcrf";

/// Recorded in every report: the text-image encoder has no synthetic-latent
/// counterpart, so features and the alignment score come from a stand-in.
const FEATURE_NOTE: &str = "frozen seeded conv projector + softmax class probe (CLIP substitute)";

#[derive(Debug, Parser)]
#[command(name = "latentcrf", version, about = "Train, sample and evaluate latent CRF hybrid samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Work directory for checkpoints and reports.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic latent dataset.
    GenData(CommonArgs),
    /// Train the denoiser and fit the feature probe.
    TrainSurrogate(CommonArgs),
    /// Stage 1: denoising plus adversarial CRF training.
    TrainCrf(CommonArgs),
    /// Stage 2: distill the CRF from teacher trajectories.
    Distill(CommonArgs),
    /// Generate samples with the hybrid pipeline.
    Sample(CommonArgs),
    /// Fréchet, diversity, speed, denoising and convergence metrics.
    Eval(CommonArgs),
    /// Fréchet distance over a grid of pre/CRF/post configurations.
    Ablate(CommonArgs),
    /// Variance and mean-field convergence curves.
    Diagnose(CommonArgs),
    /// Finite-difference and closed-form self-checks.
    Gradcheck(CommonArgs),
    /// Wall-clock timings of the pipelines and their stages.
    Bench(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainSurrogate(_) => "train-surrogate",
            Command::TrainCrf(_) => "train-crf",
            Command::Distill(_) => "distill",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Diagnose(_) => "diagnose",
            Command::Gradcheck(_) => "gradcheck",
            Command::Bench(_) => "bench",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::TrainSurrogate(a)
            | Command::TrainCrf(a)
            | Command::Distill(a)
            | Command::Sample(a)
            | Command::Eval(a)
            | Command::Ablate(a)
            | Command::Diagnose(a)
            | Command::Gradcheck(a)
            | Command::Bench(a) => a,
        }
    }
}

/// Resolves the config for `args`: file, then the seed override.
pub fn resolve_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let cfg = match args.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    workflow::pipeline(&cfg)?;
    Ok(cfg)
}

/// Parses nothing; runs `command` and writes `<out>/<name>.csv`.
pub fn execute(command: &Command) -> CliResult<RunReport> {
    let args = command.args();
    let cfg = resolve_config(args)?;
    run(command.name(), &cfg, &args.out)
}

/// Runs the named command with an already resolved config.
pub fn run(name: &str, cfg: &RunConfig, out: &Path) -> CliResult<RunReport> {
    std::fs::create_dir_all(out)?;
    let mut report = RunReport::new(name, cfg.seed);
    for (k, v) in cfg.flatten()? {
        report.config(k, v);
    }
    report.note("feature_extractor", FEATURE_NOTE);
    let t0 = Instant::now();
    let ws = WorkDir(out.to_path_buf());
    match name {
        "gen-data" => gen_data(cfg, &ws, &mut report)?,
        "train-surrogate" => train_surrogate(cfg, &ws, &mut report)?,
        "train-crf" => train_crf(cfg, &ws, &mut report)?,
        "distill" => distill(cfg, &ws, &mut report)?,
        "sample" => sample(cfg, &ws, &mut report)?,
        "eval" => eval(cfg, &ws, &mut report)?,
        "ablate" => ablate(cfg, &ws, &mut report)?,
        "diagnose" => diagnose(cfg, &ws, &mut report)?,
        "gradcheck" => gradcheck(cfg, &mut report)?,
        "bench" => bench(cfg, &ws, &mut report)?,
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    }
    report.timing("wall", t0.elapsed().as_secs_f64() * 1e3);
    report.save(&ws.file(&format!("{name}.csv")))?;
    Ok(report)
}

struct WorkDir(PathBuf);

impl WorkDir {
    fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn load<T: Checkpoint>(&self, name: &str, producer: &'static str) -> CliResult<T> {
        let path = self.file(name);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path,
                command: producer,
            });
        }
        Ok(T::load_checkpoint(&path)?)
    }

    fn save<T: Checkpoint>(&self, item: &T, name: &str, seed: u64) -> CliResult<()> {
        Ok(item.save_checkpoint(&self.file(name), seed)?)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        Ok(write_atomic(&self.file(name), bytes)?)
    }

    fn dataset(&self) -> CliResult<Dataset> {
        self.load(DATASET_FILE, "gen-data")
    }

    fn denoiser(&self) -> CliResult<DenoiserParams> {
        self.load(DENOISER_FILE, "train-surrogate")
    }

    fn features(&self) -> CliResult<FeatureExtractor> {
        self.load(FEATURES_FILE, "train-surrogate")
    }

    fn crf_stage1(&self) -> CliResult<CrfParams> {
        self.load(CRF_STAGE1_FILE, "train-crf")
    }

    fn crf(&self) -> CliResult<CrfParams> {
        self.load(CRF_FILE, "distill")
    }
}

fn gen_data(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = workflow::gen_data(cfg)?;
    let (train, held) = workflow::split(cfg, &data);
    ws.save(&data, DATASET_FILE, cfg.seed)?;
    report
        .note("samples", data.len())
        .note("train_samples", train.len())
        .note("heldout_samples", held.len());
    for (ch, (m, s)) in data.standardizer.mean.iter().zip(&data.standardizer.std).enumerate() {
        report.metric(format!("raw_mean.{ch}"), *m).metric(format!("raw_std.{ch}"), *s);
    }
    Ok(())
}

fn train_surrogate(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let (train, held) = workflow::split(cfg, &data);
    let t0 = Instant::now();
    let out = workflow::train_surrogate(cfg, &train, &held)?;
    report.timing("denoiser_training", t0.elapsed().as_secs_f64() * 1e3);
    let features = workflow::fit_features(cfg, &train)?;
    ws.save(&out.denoiser, DENOISER_FILE, cfg.seed)?;
    ws.save(&features, FEATURES_FILE, cfg.seed)?;
    ws.write("train-surrogate.loss.csv", &series_csv("step", "velocity_mse", &out.losses, 0)?)?;
    report
        .metric("final_loss", out.losses.last().copied().unwrap_or(f64::NAN))
        .note("skipped_steps", out.skipped_steps)
        .metric("heldout_noise_mse", out.noise_mse.0)
        .metric("heldout_noise_mse_zero", out.noise_mse.1)
        .metric("heldout_noise_mse_improvement", out.improvement())
        .note("denoiser_parameters", out.denoiser.param_count())
        .metric("probe_heldout_accuracy", features.accuracy(&held.latents, &held.labels)?);
    Ok(())
}

fn train_crf(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let (train, held) = workflow::split(cfg, &data);
    report.handoff("handoff", &workflow::pipeline(cfg)?.handoff);
    let t0 = Instant::now();
    let res = workflow::stage1(cfg, &train)?;
    report.timing("stage1_training", t0.elapsed().as_secs_f64() * 1e3);
    ws.save(&res.crf, CRF_STAGE1_FILE, cfg.seed)?;
    ws.save(&res.disc, DISCRIMINATOR_FILE, cfg.seed)?;
    ws.write("train-crf.loss.csv", &loss_curve_csv(&res.losses)?)?;
    report.note("skipped_steps", res.skipped_steps);
    if !held.is_empty() {
        let window = workflow::denoise_eval(cfg, &res.crf, &held)?;
        let fixed = workflow::denoise_eval_fixed(cfg, &res.crf, &held)?;
        report
            .metric("denoise.improved_fraction", window.improved_fraction)
            .metric("denoise.mean_crf_distance", window.mean_crf)
            .metric("denoise.mean_identity_distance", window.mean_identity)
            .metric("denoise_fixed.improved_fraction", fixed.improved_fraction)
            .metric("denoise_fixed.mean_crf_distance", fixed.mean_crf)
            .metric("denoise_fixed.mean_identity_distance", fixed.mean_identity);
    }
    Ok(())
}

fn distill(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let den = ws.denoiser()?;
    let crf1 = ws.crf_stage1()?;
    let t0 = Instant::now();
    let out = workflow::distill(cfg, &crf1, &den, &data.encoder)?;
    report.timing("distillation", t0.elapsed().as_secs_f64() * 1e3);
    ws.save(&out.result.crf, CRF_FILE, cfg.seed)?;
    ws.write("distill.loss.csv", &loss_curve_csv(&out.result.losses)?)?;
    report
        .note("skipped_steps", out.result.skipped_steps)
        .metric("heldout_distance_before", out.before)
        .metric("heldout_distance_after", out.after)
        .metric("heldout_distance_identity", out.identity);
    Ok(())
}

fn sample(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let den = ws.denoiser()?;
    let crf = ws.crf()?;
    let features = ws.features()?;
    let p = workflow::pipeline(cfg)?;
    let reqs = workflow::requests(&data.encoder, cfg.seed, Stream::Sample, 0, cfg.eval.sample_count)?;
    let model = GuidedDenoiser::new(&den, cfg.pipeline.guidance);
    let (samples, cost) = p.sample_batch(model, &crf, cfg.shape(), &reqs)?;
    let mut rows = String::from("index,class,seed,predicted_class,mean,variance\n");
    let mut correct = 0;
    for (i, (z, (c, seed))) in samples.iter().zip(&reqs).enumerate() {
        let pred = features.predict(z)?;
        correct += usize::from(pred == c.class_id);
        let (m, v) = z.mean_variance();
        rows.push_str(&format!("{i},{},{seed},{pred},{m},{v}\n", c.class_id));
    }
    ws.write("samples.csv", rows.as_bytes())?;
    report
        .handoff("handoff", &p.handoff)
        .stage_cost("cost", &cost)
        .metric("probe_accuracy", correct as f64 / samples.len().max(1) as f64);
    Ok(())
}

fn eval(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let (_, held) = workflow::split(cfg, &data);
    let den = ws.denoiser()?;
    let crf1 = ws.crf_stage1()?;
    let crf = ws.crf()?;
    let features = ws.features()?;
    let enc = &data.encoder;
    report.handoff("handoff", &workflow::pipeline(cfg)?.handoff);

    let fd = workflow::frechet_ablation(cfg, &den, &crf, &features, enc)?;
    report.metric("probe_accuracy.teacher", fd.teacher_probe);
    for (s, r) in fd.per_seed.iter().enumerate() {
        report
            .metric(format!("frechet.seed{s}.hybrid"), r.hybrid)
            .metric(format!("frechet.seed{s}.truncated"), r.truncated)
            .metric(format!("frechet.seed{s}.reduction"), r.reduction())
            .metric(format!("probe_accuracy.seed{s}.hybrid"), r.hybrid_probe)
            .metric(format!("probe_accuracy.seed{s}.truncated"), r.truncated_probe);
    }

    let div = workflow::diversity(cfg, &den, &crf, &features, enc)?;
    report
        .metric("vendi.teacher", div.teacher)
        .metric("vendi.hybrid", div.hybrid)
        .metric("vendi.ratio", div.hybrid / div.teacher);

    if !held.is_empty() {
        let d = workflow::denoise_eval(cfg, &crf1, &held)?;
        report.metric("denoise.improved_fraction", d.improved_fraction);
    }

    let conv = workflow::convergence(cfg, &den, &crf, enc, 5)?;
    report
        .metric("convergence.change_at_5", conv.change_at(5).unwrap_or(f64::NAN))
        .metric("convergence.settled_fraction", conv.fraction_settled(1e-6));

    let var = workflow::variance(cfg, &den, enc)?;
    report
        .metric("variance.initial", var[0])
        .metric("variance.final", *var.last().unwrap_or(&f64::NAN))
        .note("variance.tail_non_increasing", workflow::tail_non_increasing(&var, 0.2));

    let speed = workflow::speed(cfg, &den, &crf, enc)?;
    speed_rows(report, &speed);
    Ok(())
}

fn speed_rows(report: &mut RunReport, s: &workflow::Speed) {
    report
        .note("flops.crf_call", s.crf_flops)
        .note("flops.denoiser_call", s.denoiser_flops)
        .stage_cost("hybrid", &s.hybrid_cost)
        .timing("hybrid.mean", s.hybrid.mean_ms)
        .timing("hybrid.std", s.hybrid.std_ms)
        .timing("truncated.mean", s.truncated.mean_ms)
        .timing("teacher.mean", s.teacher.mean_ms)
        .timing("teacher.std", s.teacher.std_ms)
        .timing("denoiser_step.mean", s.denoiser_step.mean_ms)
        .timing("crf_call.mean", s.crf.mean_ms)
        .timing("budget", s.budget_ms());
}

fn ablate(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let den = ws.denoiser()?;
    let crf = ws.crf()?;
    let features = ws.features()?;
    let n = cfg.eval.ablate_samples;
    let ref_reqs = workflow::requests(&data.encoder, cfg.seed, Stream::Reference, 0, n)?;
    let reference = features.embed_all(&workflow::teacher_samples(cfg, &den, &ref_reqs)?)?;
    let reqs = workflow::requests(&data.encoder, cfg.seed, Stream::Ablate, 0, n)?;
    let base = workflow::base_schedule(cfg)?;
    let model = GuidedDenoiser::new(&den, cfg.pipeline.guidance);
    let mut rows = String::from("pre_steps,pre_schedule,crf,post_steps,post_schedule,status,frechet,total_flops\n");
    for &pre_steps in &cfg.eval.ablate_pre_steps {
        for &post_steps in &cfg.eval.ablate_post_steps {
            let pc = PipelineConfig {
                pre_steps,
                post_steps,
                ..cfg.pipeline.clone()
            };
            let (ps, pn, qn) = (pc.pre_schedule, pc.post_schedule, post_steps);
            let p = match HybridPipeline::new(pc, &base) {
                Ok(p) => p,
                Err(latentcrf::Error::Handoff(_)) => {
                    for on in [true, false] {
                        rows.push_str(&format!("{pre_steps},{ps},{on},{qn},{pn},invalid_handoff,,\n"));
                    }
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let mut shared = StageCost::default();
            let pre = p.run_pre(model, cfg.shape(), &reqs, &mut shared)?;
            for on in [true, false] {
                let mut cost = shared;
                let out = p.finish(model, on.then_some(&crf), pre.clone(), &reqs, &mut cost)?;
                let fd = frechet_from_features(&features.embed_all(&out)?, &reference)?;
                rows.push_str(&format!("{pre_steps},{ps},{on},{qn},{pn},ok,{fd},{}\n", cost.total_flops()));
                report.metric(format!("frechet.pre{pre_steps}.post{qn}.crf_{on}"), fd);
            }
        }
    }
    ws.write("ablate.grid.csv", rows.as_bytes())?;
    Ok(())
}

fn diagnose(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let den = ws.denoiser()?;
    let crf = ws.crf()?;
    let var = workflow::variance(cfg, &den, &data.encoder)?;
    ws.write("variance.csv", &series_csv("state", "variance", &var, 0)?)?;
    let conv = workflow::convergence(cfg, &den, &crf, &data.encoder, 5)?;
    ws.write("convergence.csv", &series_csv("iteration", "mean_relative_change", &conv.mean_changes, 1)?)?;
    report
        .metric("variance.initial", var[0])
        .note("variance.tail_non_increasing", workflow::tail_non_increasing(&var, 0.2))
        .metric("convergence.change_at_5", conv.change_at(5).unwrap_or(f64::NAN))
        .metric("convergence.settled_fraction", conv.fraction_settled(1e-6));
    Ok(())
}

fn gradcheck(cfg: &RunConfig, report: &mut RunReport) -> CliResult<()> {
    let outcomes = checks::run_all(&cfg.gradcheck, cfg.seed)?;
    checks::add_to_report(report, &outcomes);
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    report.note("all_passed", failed.is_empty());
    Ok(())
}

fn bench(cfg: &RunConfig, ws: &WorkDir, report: &mut RunReport) -> CliResult<()> {
    let data = ws.dataset()?;
    let den = ws.denoiser()?;
    let crf = ws.crf()?;
    let speed = workflow::speed(cfg, &den, &crf, &data.encoder)?;
    speed_rows(report, &speed);
    report.note("bench.batch", cfg.eval.bench_batch).note("bench.reps", cfg.eval.bench_reps);
    Ok(())
}

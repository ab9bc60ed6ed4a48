//! The experiment commands. Each reads the artifacts it needs from the
//! output directory (or `inputs`), and writes its own atomically.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use dsd_core::checkpoint::{Checkpoint, Role};
use dsd_core::diffusion::{ambient_sample, pretrain_run, LossWeighting, SampleMode, TrainMode};
use dsd_core::distill::{run_distillation, Evaluation, Generator, HistoryRow, SampleEvaluator};
use dsd_core::metrics::{select_best_checkpoint, MetricReport, Moments};
use dsd_core::nn::{Denoiser, Preconditioning};
use dsd_core::toy::ToyDataset;
use dsd_core::{Mat, SeedStream};

use crate::config::{CleanReference, ExperimentConfig, ExperimentKind, SampleSource, Stream};
use crate::io::{Csv, Stamp, Table};
use crate::svg::{emit_scatter_svg, PointSet};
use crate::verify::{run_battery, Check, DescentRun};

pub const DATASET_FILE: &str = "dataset.csv";
pub const CLEAN_FILE: &str = "clean.csv";
pub const TEACHER_FILE: &str = "teacher.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const SELECTED_GENERATOR_FILE: &str = "generator_selected.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Points drawn per set in plots.
const PLOT_POINTS: usize = 2_000;

/// Why a command did not succeed, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, invalid config, missing inputs or I/O trouble: exit 2.
    Usage(anyhow::Error),
    /// A checked property failed: exit 1.
    Property(String),
    /// Training blew up; the last healthy state was saved: exit 3.
    Divergence { step: usize, reason: String, checkpoint: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Property(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Divergence { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "error: {e:#}"),
            CliError::Property(msg) => write!(f, "property failure: {msg}"),
            CliError::Divergence { step, reason, checkpoint } => write!(
                f,
                "diverged at step {step} ({reason}); last healthy checkpoint: {}",
                checkpoint.display()
            ),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Usage(e)
    }
}

impl From<dsd_core::Error> for CliError {
    fn from(e: dsd_core::Error) -> Self {
        CliError::Usage(e.into())
    }
}

pub type CmdResult<T> = std::result::Result<T, CliError>;

/// A validated config bound to its output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub stamp: Stamp,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let stamp = Stamp::of(&cfg);
        Ok(Self { cfg, out, stamp })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(default))
    }

    fn csv(&self, header: &str) -> Csv {
        Csv::new(&self.stamp, header)
    }

    fn save_checkpoint(&self, ck: Checkpoint, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        let json = ck.with_provenance(self.stamp.provenance()).to_json()?;
        crate::io::write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }

    fn plot(&self, name: &str, sets: &[(&str, &Mat)]) -> Result<()> {
        if !self.cfg.plots {
            return Ok(());
        }
        let heads: Vec<Mat> = sets.iter().map(|(_, m)| head(m, PLOT_POINTS)).collect();
        let sets: Vec<PointSet> =
            sets.iter().zip(&heads).map(|((label, _), points)| PointSet { label, points }).collect();
        emit_scatter_svg(&sets, &self.path(name))
    }

    pub fn execute(&self) -> CmdResult<String> {
        match self.cfg.kind {
            ExperimentKind::Verify => cmd_verify(self),
            ExperimentKind::Pretrain => cmd_pretrain(self).map(|p| format!("teacher written to {}", p.display())),
            ExperimentKind::Distill => cmd_distill(self),
            ExperimentKind::Sample => cmd_sample(self).map(|p| format!("samples written to {}", p.display())),
            ExperimentKind::Eval => cmd_eval(self).map(|p| format!("metrics written to {}", p.display())),
            ExperimentKind::SigmaSweep => cmd_sigma_sweep(self),
        }
    }
}

fn head(m: &Mat, n: usize) -> Mat {
    let rows = m.rows().min(n);
    Mat::from_vec(rows, m.cols(), m.as_slice()[..rows * m.cols()].to_vec())
}

fn point_header(dim: usize) -> String {
    if dim == 2 {
        "x,y".into()
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
    }
}

fn read_points(path: &Path) -> Result<Mat> {
    if !path.exists() {
        return Err(anyhow!("missing input {}", path.display()));
    }
    Table::read(path)?.to_mat()
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(anyhow!("missing input {}", path.display()));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Checkpoint::from_json(&text).with_context(|| format!("invalid checkpoint {}", path.display()))
}

/// A teacher checkpoint with the training settings distillation must reuse.
pub struct Teacher {
    pub den: Denoiser,
    pub sigma_hat: f64,
    pub mode: TrainMode,
    pub weighting: LossWeighting,
}

fn load_teacher(run: &Run) -> Result<Teacher> {
    let path = run.input(&run.cfg.inputs.teacher, TEACHER_FILE);
    let ck = read_checkpoint(&path)?;
    if ck.role != Role::Teacher {
        return Err(anyhow!("{} is a {:?} checkpoint, expected a teacher", path.display(), ck.role));
    }
    let (sigma_hat, weighting) = match &ck.train_config {
        Some(t) => (t.sigma_hat, t.weighting),
        None => (run.cfg.sigma_hat(), LossWeighting::Uniform),
    };
    Ok(Teacher {
        mode: ck.train_mode.unwrap_or(run.cfg.pretrain.mode),
        den: ck.into_denoiser()?,
        sigma_hat,
        weighting,
    })
}

fn load_generator(run: &Run) -> Result<Generator> {
    let path = run.input(&run.cfg.inputs.generator, GENERATOR_FILE);
    Ok(read_checkpoint(&path)?.into_generator()?)
}

fn load_dataset(run: &Run) -> Result<Mat> {
    read_points(&run.input(&run.cfg.inputs.dataset, DATASET_FILE))
}

/// Moments that "clean" refers to in every Fréchet score.
fn clean_moments(run: &Run) -> Result<Moments> {
    match run.cfg.eval.reference {
        CleanReference::Population => {
            let (mean, cov) = run.cfg.toy.shape.population_moments();
            Ok(Moments { mean, cov })
        }
        CleanReference::Dataset => Ok(Moments::fit(&read_points(&run.path(CLEAN_FILE))?)?),
    }
}

/// Data scale for preconditioning: configured, or the clean spread implied
/// by the noisy points, `√(mean variance − σ̂²)`.
fn data_scale(run: &Run, data: &Mat, sigma_hat: f64) -> Result<f64> {
    if let Some(s) = run.cfg.model.sigma_data {
        return Ok(s);
    }
    let m = Moments::fit(data)?;
    let var = m.cov.trace() / m.cov.rows() as f64;
    Ok((var - sigma_hat * sigma_hat).max(1e-6).sqrt())
}

fn evaluator(run: &Run, noisy: &Mat, sigma_hat: f64) -> Result<SampleEvaluator> {
    Ok(SampleEvaluator::new(
        Some(clean_moments(run)?),
        noisy.clone(),
        sigma_hat,
        run.cfg.eval.n_samples,
        run.cfg.sub_seed(Stream::Eval),
    ))
}

pub fn cmd_verify(run: &Run) -> CmdResult<String> {
    let battery = run_battery(&run.cfg)?;
    let mut report = run.csv(Check::CSV_HEADER);
    for c in &battery.checks {
        report.row(&c.csv_row());
    }
    report.write(&run.path(REPORT_FILE))?;
    let mut descent = run.csv(DescentRun::CSV_HEADER);
    for d in &battery.descent {
        descent.row(&d.csv_row());
    }
    descent.write(&run.path("descent.csv"))?;
    let failures = battery.failures();
    if failures.is_empty() {
        Ok(format!("all {} checks passed", battery.checks.len()))
    } else {
        let names: Vec<String> = failures.iter().map(|c| format!("{} [{}]", c.name, c.case)).collect();
        Err(CliError::Property(names.join("; ")))
    }
}

/// Generates (or loads) the dataset and pretrains the teacher.
pub fn cmd_pretrain(run: &Run) -> CmdResult<PathBuf> {
    let cfg = &run.cfg;
    let data = match &cfg.inputs.dataset {
        Some(p) => read_points(p)?,
        None => {
            let toy = &cfg.toy;
            let mut rng = SeedStream::new(cfg.sub_seed(Stream::Dataset));
            let ds = ToyDataset::generate(toy.shape, toy.n, toy.sigma_data, &mut rng)?;
            let header = point_header(2);
            let mut noisy = run.csv(&header);
            noisy.matrix_rows(&ds.points);
            noisy.write(&run.path(DATASET_FILE))?;
            let mut clean = run.csv(&header);
            clean.matrix_rows(&ds.clean);
            clean.write(&run.path(CLEAN_FILE))?;
            run.plot("dataset.svg", &[("noisy", &ds.points), ("clean", &ds.clean)])?;
            ds.points
        }
    };
    let sigma_hat = cfg.sigma_hat();
    let scale = data_scale(run, &data, sigma_hat)?;
    let mut rng = SeedStream::new(cfg.sub_seed(Stream::TeacherInit));
    let init = Denoiser::init(
        data.cols(),
        &cfg.model.hidden,
        cfg.model.activation,
        Preconditioning::Edm { sigma_data: scale },
        &mut rng,
    )?;
    let tc = cfg.train_config(sigma_hat, scale);
    let result = pretrain_run(&init, &data, &tc, cfg.pretrain.mode)?;
    let mut curve = run.csv("step,loss");
    for (k, l) in result.curve.iter().enumerate() {
        curve.row(&format!("{k},{l}"));
    }
    curve.write(&run.path("pretrain_loss.csv"))?;
    let steps = result.curve.len();
    let ck = Checkpoint::teacher(&result.net, Some(&tc), Some(cfg.pretrain.mode), steps);
    match result.divergence {
        None => Ok(run.save_checkpoint(ck, TEACHER_FILE)?),
        Some((step, loss)) => {
            let checkpoint = run.save_checkpoint(ck, "teacher_last_healthy.json")?;
            Err(CliError::Divergence {
                step,
                reason: format!("loss {loss}"),
                checkpoint,
            })
        }
    }
}

/// Distills the teacher into a one-step generator, tracking clean Fréchet
/// distance and proximal FID at every evaluation.
pub fn cmd_distill(run: &Run) -> CmdResult<String> {
    let teacher = load_teacher(run)?;
    let noisy = load_dataset(run)?;
    let ev = evaluator(run, &noisy, teacher.sigma_hat)?;
    let mut dc = run.cfg.distill_config(teacher.sigma_hat, 1.0);
    dc.mode = teacher.mode;
    dc.fake_weighting = teacher.weighting;

    // The proximal-FID winner so far; ties keep the earlier checkpoint.
    let mut selected: Option<(f64, usize, Generator)> = None;
    let mut hook = |s: &dsd_core::distill::DistillState| -> dsd_core::Result<Evaluation> {
        let e = ev.evaluate(&s.averaged)?;
        let p = e.proximal_fid.unwrap_or(f64::INFINITY);
        if selected.as_ref().map_or(p.is_finite(), |(best, _, _)| p < *best) {
            selected = Some((p, s.step(), s.averaged.clone()));
        }
        Ok(e)
    };
    let result = run_distillation(&teacher.den, &dc, &mut hook)?;

    let mut history = run.csv(HistoryRow::CSV_HEADER);
    for h in &result.history {
        history.row(&h.csv_row());
    }
    history.write(&run.path(HISTORY_FILE))?;
    let scores: Vec<_> = result.history.iter().filter_map(HistoryRow::score).collect();
    let selection = select_best_checkpoint(&scores)?;
    let mut sel = run.csv("step,proximal_fid,frechet_at_selected,frechet_min,relative_gap");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    sel.row(&format!(
        "{},{},{},{},{}",
        selection.step,
        selection.proximal_fid,
        opt(selection.frechet_at_selected),
        opt(selection.frechet_min),
        opt(selection.relative_gap())
    ));
    sel.write(&run.path(SELECTION_FILE))?;
    if let Some((_, step, g)) = &selected {
        run.save_checkpoint(Checkpoint::generator(g, Some(&dc), *step), SELECTED_GENERATOR_FILE)?;
    }

    let state = &result.state;
    let ck = Checkpoint::generator(&state.averaged, Some(&dc), state.step());
    if let Some(div) = result.divergence {
        let checkpoint = run.save_checkpoint(ck, "generator_last_healthy.json")?;
        return Err(CliError::Divergence {
            step: div.step,
            reason: div.reason,
            checkpoint,
        });
    }
    let path = run.save_checkpoint(ck, GENERATOR_FILE)?;
    Ok(format!(
        "generator written to {}; proximal FID selects step {}",
        path.display(),
        selection.step
    ))
}

fn teacher_samples(run: &Run, teacher: &Teacher, mode: SampleMode, n: usize, rng: &mut SeedStream) -> Result<Mat> {
    Ok(ambient_sample(
        &teacher.den,
        teacher.den.dim(),
        teacher.sigma_hat,
        &run.cfg.model.schedule,
        run.cfg.sampling.steps,
        mode,
        n,
        rng,
    )?)
}

pub fn cmd_sample(run: &Run) -> CmdResult<PathBuf> {
    let s = &run.cfg.sampling;
    let mut rng = SeedStream::new(run.cfg.sub_seed(Stream::Sampling));
    let (dim, points) = match s.teacher_mode() {
        None => {
            let g = load_generator(run)?;
            let pts = if s.n == 0 { Mat::zeros(0, g.dim()) } else { g.sample(s.n, &mut rng)? };
            (g.dim(), pts)
        }
        Some(mode) => {
            let t = load_teacher(run)?;
            let dim = t.den.dim();
            let pts = if s.n == 0 { Mat::zeros(0, dim) } else { teacher_samples(run, &t, mode, s.n, &mut rng)? };
            (dim, pts)
        }
    };
    let path = run.path("samples.csv");
    let mut csv = run.csv(&point_header(dim));
    csv.matrix_rows(&points);
    csv.write(&path)?;
    let label = match s.source {
        SampleSource::Generator => "generator",
        SampleSource::TeacherFull => "teacher (full)",
        SampleSource::TeacherTruncated => "teacher (truncated)",
    };
    run.plot("samples.svg", &[(label, &points)])?;
    Ok(path)
}

/// Scores the noisy data, both teacher samplers and the generator against
/// the clean reference.
pub fn cmd_eval(run: &Run) -> CmdResult<PathBuf> {
    let teacher = load_teacher(run)?;
    let generator = load_generator(run)?;
    let noisy = load_dataset(run)?;
    let clean = clean_moments(run)?;
    let root = SeedStream::new(run.cfg.sub_seed(Stream::Eval));
    let n = run.cfg.eval.n_samples;
    let ev = evaluator(run, &noisy, teacher.sigma_hat)?;
    let sets = [
        ("noisy", noisy.clone()),
        ("teacher-full", teacher_samples(run, &teacher, SampleMode::Full, n, &mut root.split(10))?),
        ("teacher-truncated", teacher_samples(run, &teacher, SampleMode::Truncated, n, &mut root.split(11))?),
        ("generator", ev.samples(&generator)?),
    ];
    let path = run.path(EVAL_FILE);
    let mut csv = run.csv(&format!("source,{}", MetricReport::CSV_HEADER));
    for (k, (name, x)) in sets.iter().enumerate() {
        let seed = root.split(20 + k as u64).key();
        let report = MetricReport::evaluate(x, &clean, &noisy, teacher.sigma_hat, seed)?;
        csv.row(&format!("{name},{}", report.csv_row()));
    }
    csv.write(&path)?;
    let plot: Vec<(&str, &Mat)> = sets.iter().map(|(name, x)| (*name, x)).collect();
    run.plot("eval.svg", &plot)?;
    Ok(path)
}

/// Pretrain, distill and evaluate once per assumed corruption level, each
/// in its own thread and subdirectory.
pub fn cmd_sigma_sweep(run: &Run) -> CmdResult<String> {
    let levels = run.cfg.sweep_sigma_hats();
    let subruns: Vec<Run> = levels
        .iter()
        .map(|&s| {
            let mut cfg = run.cfg.clone();
            cfg.pretrain.sigma_hat = Some(s);
            cfg.inputs = Default::default();
            Run::new(cfg, run.out.join(format!("sigma_hat_{s}")))
        })
        .collect::<Result<_>>()?;
    let results: Vec<CmdResult<PathBuf>> = std::thread::scope(|scope| {
        let handles: Vec<_> = subruns
            .iter()
            .map(|r| {
                scope.spawn(move || {
                    cmd_pretrain(r)?;
                    cmd_distill(r)?;
                    cmd_eval(r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for (s, res) in levels.iter().zip(results) {
        let table = Table::read(&res?)?;
        let g = table.find("source", "generator")?;
        rows.push((*s, table.f64_at(g, "frechet_to_clean")?, table.f64_at(g, "proximal_fid")?));
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.1 < rows[b].1 { i } else { b });
    let mut csv = run.csv("sigma_hat,frechet_to_clean,proximal_fid,best");
    for (i, (s, f, p)) in rows.iter().enumerate() {
        csv.row(&format!("{s},{f},{p},{}", i == best));
    }
    csv.write(&run.path(SWEEP_FILE))?;
    Ok(format!("sigma_hat = {} gives the lowest clean Fréchet distance", rows[best].0))
}

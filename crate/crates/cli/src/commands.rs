use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use featsteer::container::{self, Artifact};
use featsteer::eval::{
    dim_baseline, evaluate, layer_sweep, Method, MethodResult, SteeringMap, SweepResult,
};
use featsteer::sites::LossSiteSet;
use featsteer::subject::{build_subject, generate_dataset, read_jsonl, write_jsonl, ContrastiveDataset, Split, Subject};
use featsteer::train::{grad_check, train_fmap, GradCheck, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::manifest::{file_sha256, ArtifactEntry, RunManifest, Versions};
use crate::CliError;

/// Gradient checks above this relative error fail the command.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

const SUBJECT: &str = "subject.json";
const DATASET: &str = "dataset.jsonl";
const STEERING: &str = "steering.json";
const LOSS_SITES: &str = "loss_sites.json";
const TRAIN_REPORT: &str = "train_report.json";
const LOSS_CSV: &str = "loss.csv";
const LINEAR_STEERING: &str = "linear_steering.json";
const METRICS: &str = "metrics.json";
const METRICS_CSV: &str = "metrics.csv";
const SWEEP: &str = "sweep.json";
const SWEEP_CSV: &str = "sweep.csv";
const GRADCHECK: &str = "gradcheck.json";
const REPORT: &str = "report.md";

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

/// Collects the files a command writes, for its manifest.
struct Outputs<'a> {
    out: &'a Path,
    files: BTreeMap<String, ArtifactEntry>,
}

impl<'a> Outputs<'a> {
    fn new(out: &'a Path) -> Self {
        Self {
            out,
            files: BTreeMap::new(),
        }
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.record(name)
    }

    fn artifact<T: Artifact>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        container::save(value, &self.out.join(name)).map_err(io)?;
        self.record(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.text(name, &(text + "\n"))
    }

    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let sha256 = file_sha256(&self.out.join(name))?;
        self.files.insert(
            name.to_string(),
            ArtifactEntry {
                path: name.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    fn finish(self, ctx: &Context, command: &str, stage: Stage, started: Instant, peak_layer: Option<usize>) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: command.to_string(),
            config_hash: ctx.config.hash(Stage::Run),
            stage_hash: ctx.config.hash(stage),
            seed: ctx.config.seed,
            artifacts: self.files,
            versions: Versions::default(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            peak_layer,
        };
        m.write(self.out)?;
        Ok(m)
    }
}

fn io(e: featsteer::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn training(e: featsteer::Error) -> CliError {
    CliError::Training(e.to_string())
}

fn evaluation(e: featsteer::Error) -> CliError {
    CliError::Evaluation(e.to_string())
}

/// A previous command's outputs, reused only if built from the same config.
fn cached(ctx: &Context, command: &str, stage: Stage) -> bool {
    RunManifest::read(&ctx.out, command).is_some_and(|m| m.stage_hash == ctx.config.hash(stage) && m.artifacts_intact(&ctx.out))
}

pub fn generate(ctx: &Context) -> Result<(Subject, ContrastiveDataset), CliError> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let subject = build_subject(&cfg.subject, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let dataset = generate_dataset(&subject, &cfg.data, cfg.data_seed()).map_err(|e| match e {
        featsteer::Error::InvalidArgument(m) => CliError::Config(m),
        other => CliError::Io(other.to_string()),
    })?;
    let mut outputs = Outputs::new(&ctx.out);
    outputs.artifact(SUBJECT, &subject)?;
    write_jsonl(&dataset, &ctx.out.join(DATASET)).map_err(io)?;
    outputs.record(DATASET)?;
    outputs.finish(ctx, "generate", Stage::Generate, started, None)?;
    Ok((subject, dataset))
}

fn generated(ctx: &Context) -> Result<(Subject, ContrastiveDataset), CliError> {
    if cached(ctx, "generate", Stage::Generate) {
        let subject = container::load(&ctx.out.join(SUBJECT)).map_err(io)?;
        let dataset = read_jsonl(&ctx.out.join(DATASET)).map_err(io)?;
        return Ok((subject, dataset));
    }
    generate(ctx)
}

pub struct TrainOutputs {
    pub steering: SteeringMap,
    pub sites: LossSiteSet,
    pub report: TrainReport,
}

pub fn train(ctx: &Context, with_grad_check: bool) -> Result<TrainOutputs, CliError> {
    let (subject, dataset) = generated(ctx)?;
    let started = Instant::now();
    let cfg = &ctx.config.train;
    let trained = train_fmap(&subject, &dataset, cfg).map_err(training)?;
    let steering = SteeringMap::from_trained(&trained, cfg);
    let mut report = trained.report.clone();
    if with_grad_check {
        report.grad_check = Some(grad_check(&subject, &dataset, cfg, ctx.config.eval.grad_check_probes).map_err(training)?);
    }
    let mut outputs = Outputs::new(&ctx.out);
    outputs.artifact(STEERING, &steering)?;
    outputs.artifact(LOSS_SITES, &trained.sites)?;
    outputs.artifact(TRAIN_REPORT, &report)?;
    outputs.text(LOSS_CSV, &report.loss_csv())?;
    outputs.finish(ctx, "train", Stage::Train, started, None)?;
    if let Some(gc) = &report.grad_check {
        check_gradients(gc)?;
    }
    Ok(TrainOutputs {
        steering,
        sites: trained.sites,
        report,
    })
}

fn trained(ctx: &Context) -> Result<TrainOutputs, CliError> {
    if cached(ctx, "train", Stage::Train) {
        return Ok(TrainOutputs {
            steering: container::load(&ctx.out.join(STEERING)).map_err(io)?,
            sites: container::load(&ctx.out.join(LOSS_SITES)).map_err(io)?,
            report: container::load(&ctx.out.join(TRAIN_REPORT)).map_err(io)?,
        });
    }
    train(ctx, false)
}

fn check_gradients(gc: &GradCheck) -> Result<(), CliError> {
    if gc.max_relative_error > GRAD_CHECK_TOLERANCE {
        return Err(CliError::Training(format!(
            "gradient check failed: max relative error {:.3e} over {} probes exceeds {GRAD_CHECK_TOLERANCE:e}",
            gc.max_relative_error, gc.probes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub methods: Vec<MethodResult>,
    /// Non-linear clamp rate minus linear feature-map rate.
    pub linear_fmap_gap: f64,
}

impl Metrics {
    pub fn get(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    fn to_csv(&self) -> String {
        let mut s = String::from("method,compliance,mean_sites,mean_l2\n");
        for m in &self.methods {
            s.push_str(&format!("{},{},{},{}\n", m.method, m.compliance, m.magnitude.mean_sites, m.magnitude.mean_l2));
        }
        s
    }
}

pub fn eval(ctx: &Context) -> Result<Metrics, CliError> {
    let (subject, dataset) = generated(ctx)?;
    let trained = trained(ctx)?;
    let started = Instant::now();
    let cfg = &ctx.config.train;
    let linear_cfg: TrainConfig = cfg.clone().linear();
    let linear = train_fmap(&subject, &dataset, &linear_cfg).map_err(training)?;
    let linear_steering = SteeringMap::from_trained(&linear, &linear_cfg);

    let dim = dim_baseline(&subject, &dataset, &trained.sites).map_err(evaluation)?;
    let actadd = dim.actadd_at(cfg.site.layer, dim.alpha);
    let methods = [
        Method::None,
        Method::DimAblate { direction: dim },
        Method::DimActadd { direction: actadd },
        Method::LinearAtLossSites {
            sites: trained.sites.clone(),
        },
        Method::Clamp {
            name: "linear-fmap".into(),
            steering: linear_steering.clone(),
        },
        Method::Clamp {
            name: "nonlinear-clamp".into(),
            steering: trained.steering.clone(),
        },
    ];
    let negatives = dataset.negatives(Split::Test);
    let results = methods
        .iter()
        .map(|m| evaluate(&subject, m, &negatives))
        .collect::<featsteer::Result<Vec<_>>>()
        .map_err(evaluation)?;
    let rate = |name: &str| results.iter().find(|r| r.method == name).map_or(0.0, |r| r.compliance);
    let metrics = Metrics {
        linear_fmap_gap: rate("nonlinear-clamp") - rate("linear-fmap"),
        methods: results,
    };
    let mut outputs = Outputs::new(&ctx.out);
    outputs.artifact(LINEAR_STEERING, &linear_steering)?;
    outputs.json(METRICS, &metrics)?;
    outputs.text(METRICS_CSV, &metrics.to_csv())?;
    outputs.finish(ctx, "eval", Stage::Run, started, None)?;
    Ok(metrics)
}

pub fn sweep(ctx: &Context) -> Result<SweepResult, CliError> {
    let (subject, dataset) = generated(ctx)?;
    let started = Instant::now();
    let layers: Vec<usize> = if ctx.config.eval.sweep_layers.is_empty() {
        (0..subject.n_layers()).collect()
    } else {
        ctx.config.eval.sweep_layers.clone()
    };
    let result = layer_sweep(&subject, &dataset, &ctx.config.train, &layers).map_err(evaluation)?;
    let mut outputs = Outputs::new(&ctx.out);
    outputs.artifact(SWEEP, &result)?;
    outputs.text(SWEEP_CSV, &result.to_csv())?;
    outputs.finish(ctx, "sweep", Stage::Run, started, result.best_layer())?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutput {
    pub probes: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn gradcheck(ctx: &Context) -> Result<GradCheckOutput, CliError> {
    let (subject, dataset) = generated(ctx)?;
    let started = Instant::now();
    let gc = grad_check(&subject, &dataset, &ctx.config.train, ctx.config.eval.grad_check_probes).map_err(training)?;
    let result = GradCheckOutput {
        probes: gc.probes,
        max_relative_error: gc.max_relative_error,
        tolerance: GRAD_CHECK_TOLERANCE,
        passed: gc.max_relative_error <= GRAD_CHECK_TOLERANCE,
    };
    let mut outputs = Outputs::new(&ctx.out);
    outputs.json(GRADCHECK, &result)?;
    outputs.finish(ctx, "gradcheck", Stage::Train, started, None)?;
    check_gradients(&gc)?;
    Ok(result)
}

/// Markdown summary of whatever results are present in the output directory.
pub fn report(ctx: &Context) -> Result<String, CliError> {
    let started = Instant::now();
    let read = |name: &str| std::fs::read_to_string(ctx.out.join(name)).ok();
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!("config hash `{}`, seed {}\n", ctx.config.hash(Stage::Run), ctx.config.seed));
    let mut found = false;

    if let Some(text) = read(TRAIN_REPORT) {
        let r: TrainReport = container::from_str(&text).map_err(io)?;
        found = true;
        md.push_str("\n## Training\n\n");
        if let (Some(first), Some(last)) = (r.loss.first(), r.loss.last()) {
            md.push_str(&format!("{} steps, loss {first:.4} -> {last:.4}, {} skipped pairs\n", r.loss.len(), r.skipped_pairs));
        }
        if let Some(gc) = &r.grad_check {
            md.push_str(&format!("gradient check: max relative error {:.3e} over {} probes\n", gc.max_relative_error, gc.probes));
        }
    }
    if let Some(text) = read(METRICS) {
        let m: Metrics = serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))?;
        found = true;
        md.push_str("\n## Methods on held-out negatives\n\n| method | compliance | sites | L2 |\n|---|---|---|---|\n");
        for r in &m.methods {
            md.push_str(&format!(
                "| {} | {:.3} | {:.1} | {:.3} |\n",
                r.method, r.compliance, r.magnitude.mean_sites, r.magnitude.mean_l2
            ));
        }
        md.push_str(&format!("\nnon-linear minus linear feature map: {:.3}\n", m.linear_fmap_gap));
    }
    if let Some(text) = read(SWEEP) {
        let s: SweepResult = container::from_str(&text).map_err(io)?;
        found = true;
        md.push_str(&format!("\n## Layer sweep (position {})\n\n| layer | compliance | L2 |\n|---|---|---|\n", s.position));
        for e in &s.entries {
            match (e.compliance, e.mean_l2, &e.error) {
                (Some(c), Some(l2), _) => md.push_str(&format!("| {} | {c:.3} | {l2:.3} |\n", e.layer)),
                (_, _, Some(err)) => md.push_str(&format!("| {} | failed: {err} | |\n", e.layer)),
                _ => md.push_str(&format!("| {} | | |\n", e.layer)),
            }
        }
        if let Some(best) = s.best_layer() {
            md.push_str(&format!("\npeak layer: {best}\n"));
        }
    }
    if let Some(text) = read(GRADCHECK) {
        let g: GradCheckOutput = serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))?;
        found = true;
        md.push_str(&format!(
            "\n## Gradient check\n\nmax relative error {:.3e} over {} probes ({})\n",
            g.max_relative_error,
            g.probes,
            if g.passed { "pass" } else { "fail" }
        ));
    }
    if !found {
        return Err(CliError::Io(format!("no results in {}; run train, eval or sweep first", ctx.out.display())));
    }
    let mut outputs = Outputs::new(&ctx.out);
    outputs.text(REPORT, &md)?;
    outputs.finish(ctx, "report", Stage::Run, started, None)?;
    Ok(md)
}

//! The three pipeline commands behind the CLI: dataset generation, training
//! runs and evaluation. Each writes plain files so runs can be inspected and
//! resumed by hand.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    arrange_steps, generate_dataset, read_json, write_file, write_json, Dataset, DatasetIndex, GenConfig, LabeledSample,
    SceneCounts, DATASET_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{dice_per_class, emit_report, significance, DiceReport, SignificanceResult, TestKind};
use crate::model::Model;
use crate::phantom::PhantomSpec;
use crate::relation::ClassGroup;
use crate::trainer::{train_increment, train_joint, train_phase1, LogRecord, StageSummary, TrainConfig};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_CONFIG: &str = "config.json";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_DIR: &str = "eval";
pub const RUN_FORMAT_VERSION: u32 = 1;

/// `<package version> (<git describe>)` of the build.
pub fn code_version() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), option_env!("IRS_GIT_DESCRIBE").unwrap_or("unknown"))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn refuse_clobber(path: &Path, no_clobber: bool) -> Result<()> {
    if no_clobber && path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite (--no-clobber)")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TwoStep,
    ThreeStep,
    FourStep,
}

impl Preset {
    pub fn steps(self) -> usize {
        match self {
            Preset::TwoStep => 2,
            Preset::ThreeStep => 3,
            Preset::FourStep => 4,
        }
    }

    pub fn from_steps(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Preset::TwoStep),
            3 => Ok(Preset::ThreeStep),
            4 => Ok(Preset::FourStep),
            _ => Err(Error::Format(format!("no preset with {n} steps (use 2, 3 or 4)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::TwoStep => "two_step",
            Preset::ThreeStep => "three_step",
            Preset::FourStep => "four_step",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_step" => Ok(Preset::TwoStep),
            "three_step" => Ok(Preset::ThreeStep),
            "four_step" => Ok(Preset::FourStep),
            other => Err(Error::Format(format!("unknown preset {other:?}"))),
        }
    }
}

const DEFAULT_GROUP_ORDER: [ClassGroup; 4] = [ClassGroup::Region, ClassGroup::Unit, ClassGroup::Cell, ClassGroup::Lesion];

/// Resolves `--order` entries (group names, or class names standing for
/// their group) into a permutation of the four groups.
pub fn group_order(spec: &PhantomSpec, order: &[String]) -> Result<Vec<ClassGroup>> {
    let mut out = Vec::new();
    for token in order {
        let token = token.trim().to_lowercase();
        let group = match token.parse::<ClassGroup>() {
            Ok(g) => g,
            Err(_) => {
                spec.layout
                    .iter()
                    .find(|e| e.class.name == token)
                    .ok_or_else(|| Error::Format(format!("{token:?} is neither a class group nor a class name")))?
                    .class
                    .group
            }
        };
        if out.contains(&group) {
            return Err(Error::Format(format!("group {} named twice in the order", group.as_str())));
        }
        out.push(group);
    }
    if out.len() != DEFAULT_GROUP_ORDER.len() {
        return Err(Error::Format("the order must name all four groups".into()));
    }
    Ok(out)
}

/// Class ids per step.
///
/// The two-step preset keeps the spec's own step-1 / step-2 split. The
/// three- and four-step presets go group by group, coarse to fine unless
/// `order` says otherwise; three steps merge the first two groups.
/// `reverse` flips the step sequence.
pub fn plan_steps(spec: &PhantomSpec, preset: Preset, order: Option<&[String]>, reverse: bool) -> Result<Vec<Vec<usize>>> {
    let mut steps: Vec<Vec<usize>> = match preset {
        Preset::TwoStep => {
            if order.is_some() {
                return Err(Error::Format("--order applies to the three- and four-step presets".into()));
            }
            (1..=2)
                .map(|t| spec.layout.iter().filter(|e| e.class.step_introduced == t).map(|e| e.class.id).collect())
                .collect()
        }
        Preset::ThreeStep | Preset::FourStep => {
            let groups = match order {
                Some(o) => group_order(spec, o)?,
                None => DEFAULT_GROUP_ORDER.to_vec(),
            };
            let mut steps: Vec<Vec<usize>> = groups
                .iter()
                .map(|g| spec.layout.iter().filter(|e| e.class.group == *g).map(|e| e.class.id).collect())
                .collect();
            if preset == Preset::ThreeStep {
                let second = steps.remove(1);
                steps[0].extend(second);
            }
            steps
        }
    };
    if let Some(t) = steps.iter().position(|s| s.is_empty()) {
        return Err(Error::Layout(format!("step {} of the {preset} plan has no classes", t + 1)));
    }
    if reverse {
        steps.reverse();
    }
    Ok(steps)
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    /// Phantom spec JSON; `None` uses the default kidney layout.
    pub spec: Option<PathBuf>,
    pub canvas: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// `None` keeps the spec's own step assignment.
    pub steps: Option<usize>,
    pub order: Option<Vec<String>>,
    pub reverse: bool,
    pub scenes: SceneCounts,
    pub no_clobber: bool,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<DatasetIndex> {
    let spec = match &args.spec {
        Some(p) => read_json::<PhantomSpec>(p)?,
        None => PhantomSpec::default_kidney(args.canvas),
    };
    spec.validate()?;
    let spec = match (args.steps, args.reverse || args.order.is_some()) {
        (None, false) => spec,
        (steps, _) => {
            let preset = Preset::from_steps(steps.unwrap_or(2))?;
            let plan = plan_steps(&spec, preset, args.order.as_deref(), args.reverse)?;
            arrange_steps(&spec, &plan)?
        }
    };
    refuse_clobber(&args.out.join(DATASET_FILE), args.no_clobber)?;
    generate_dataset(&GenConfig { spec, seed: args.seed, scenes: args.scenes }, &args.out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Irs,
    Finetune,
    Joint,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Irs => "irs",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irs" => Ok(Method::Irs),
            "finetune" => Ok(Method::Finetune),
            "joint" => Ok(Method::Joint),
            other => Err(Error::Format(format!("unknown method {other:?}"))),
        }
    }
}

/// Applies the method's loss weights to `cfg`.
pub fn method_config(method: Method, no_anatomy: bool, mut cfg: TrainConfig) -> TrainConfig {
    match method {
        Method::Finetune => {
            cfg.lambda_anatomy = 0.0;
            cfg.lambda_semi = 0.0;
        }
        Method::Irs if no_anatomy => cfg.lambda_anatomy = 0.0,
        _ => {}
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPlanEntry {
    pub step: u32,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub step: u32,
    pub checkpoint: String,
    pub summary: StageSummary,
}

/// `manifest.json` of a run directory. `events` only ever grows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub method: Method,
    pub no_anatomy: bool,
    pub config: TrainConfig,
    pub data_dir: PathBuf,
    pub dataset_seed: u64,
    pub step_plan: Vec<StepPlanEntry>,
    pub code_version: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub events: Vec<RunEvent>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(RUN_MANIFEST))
    }

    /// Final checkpoint path.
    pub fn last_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        self.stages
            .last()
            .map(|s| run_dir.join(&s.checkpoint))
            .ok_or_else(|| Error::Data(format!("run {} has no checkpoints", self.run_id)))
    }
}

fn append_event(run_dir: &Path, command: &str, started: u64) -> Result<()> {
    let mut m = RunManifest::read(run_dir)?;
    m.events.push(RunEvent { command: command.to_string(), started_unix: started, finished_unix: unix_now() });
    write_json(&run_dir.join(RUN_MANIFEST), &m)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub no_anatomy: bool,
    /// Checked against the dataset's step count when given.
    pub preset: Option<Preset>,
    pub config: TrainConfig,
    /// Defaults to the output directory's file name.
    pub run_id: Option<String>,
    pub no_clobber: bool,
}

pub fn checkpoint_name(step: u32) -> String {
    format!("{CHECKPOINT_DIR}/step{step}.ckpt")
}

fn write_losses(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn union<'a>(steps: impl Iterator<Item = &'a [LabeledSample]>) -> Vec<LabeledSample> {
    steps.flat_map(|s| s.iter().cloned()).collect()
}

/// Trains every step of the dataset and writes the run directory.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let started = unix_now();
    let ds = Dataset::open(&args.data)?;
    let num_steps = ds.num_steps();
    if let Some(p) = args.preset {
        if p.steps() != num_steps as usize {
            return Err(Error::Data(format!("preset {p} needs {} steps but the dataset has {num_steps}", p.steps())));
        }
    }
    let mut cfg = method_config(args.method, args.no_anatomy, args.config.clone());
    cfg.model.backbone.canvas = ds.index.spec.canvas_size;
    cfg.validate()?;
    refuse_clobber(&args.out.join(RUN_MANIFEST), args.no_clobber)?;
    let previous_events = RunManifest::read(&args.out).map(|m| m.events).unwrap_or_default();
    let run_id = match &args.run_id {
        Some(id) => id.clone(),
        None => args.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into()),
    };
    let registry = ds.index.registry()?;
    let step_plan = ds
        .index
        .steps
        .iter()
        .map(|s| {
            Ok(StepPlanEntry {
                step: s.step,
                class_ids: s.class_ids.clone(),
                class_names: s.class_ids.iter().map(|&c| registry.get(c).map(|c| c.name.clone())).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunManifest {
        format_version: RUN_FORMAT_VERSION,
        run_id,
        method: args.method,
        no_anatomy: args.no_anatomy,
        config: cfg.clone(),
        data_dir: args.data.clone(),
        dataset_seed: ds.index.seed,
        step_plan,
        code_version: code_version(),
        seed: cfg.seed,
        stages: Vec::new(),
        events: previous_events,
    };
    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    write_json(&args.out.join(RUN_CONFIG), &cfg)?;
    let losses = args.out.join(LOSSES_FILE);
    let mut log = Vec::new();
    let steps = (1..=num_steps).map(|t| ds.load_step(t)).collect::<Result<Vec<_>>>()?;
    let save = |manifest: &mut RunManifest, model: &Model, summary: StageSummary, log: &[LogRecord]| -> Result<()> {
        let name = checkpoint_name(model.step);
        model.save(&args.out.join(&name))?;
        manifest.stages.push(StageRecord { step: model.step, checkpoint: name, summary });
        write_losses(&losses, log)?;
        write_json(&args.out.join(RUN_MANIFEST), manifest)
    };
    match args.method {
        Method::Joint => {
            let train = union(steps.iter().map(|s| s.train.as_slice()));
            let val = union(steps.iter().map(|s| s.val.as_slice()));
            let (model, summary) = train_joint(&cfg, registry.classes(), &train, &val, &mut log)?;
            save(&mut manifest, &model, summary, &log)?;
        }
        Method::Irs | Method::Finetune => {
            let first = &steps[0];
            let (mut model, summary) = train_phase1(&cfg, first.matrix.new_classes(), &first.train, &first.val, &mut log)?;
            save(&mut manifest, &model, summary, &log)?;
            for st in &steps[1..] {
                let (next, summary) = train_increment(&model, &cfg, &st.matrix, &st.train, &mut log)?;
                model = next;
                save(&mut manifest, &model, summary, &log)?;
            }
        }
    }
    append_event(&args.out, "train", started)?;
    RunManifest::read(&args.out)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub runs: Vec<PathBuf>,
    /// Overrides the dataset recorded in each run's manifest.
    pub data: Option<PathBuf>,
    /// Defaults to `<first run>/eval`.
    pub out: Option<PathBuf>,
    /// Pairs of run directories to test against each other.
    pub compare: Vec<(PathBuf, PathBuf)>,
    pub test: TestKind,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<DiceReport>,
    pub comparisons: Vec<SignificanceResult>,
    /// Invariant checks that failed; empty on success.
    pub failures: Vec<String>,
    pub out_dir: PathBuf,
}

/// One report per checkpoint of the run at `run_dir`.
pub fn evaluate_run(run_dir: &Path, data: Option<&Path>) -> Result<Vec<DiceReport>> {
    let manifest = RunManifest::read(run_dir)?;
    let ds = Dataset::open(data.unwrap_or(&manifest.data_dir))?;
    let mut test: Vec<LabeledSample> = Vec::new();
    let mut loaded = 0;
    let mut reports = Vec::new();
    for stage in &manifest.stages {
        while loaded < stage.step {
            loaded += 1;
            test.extend(ds.load_step(loaded)?.test);
        }
        let model = Model::load(&run_dir.join(&stage.checkpoint))?;
        let dice = dice_per_class(&model, &test)?;
        reports.push(DiceReport::build(&manifest.run_id, stage.step, &model.registry, &dice)?);
    }
    Ok(reports)
}

/// The aggregation invariants every report must satisfy.
pub fn check_report(r: &DiceReport) -> Vec<String> {
    let mut failures = Vec::new();
    let tag = format!("{} step {}", r.run, r.step);
    let n = r.per_class.len() as f64;
    let recomputed = r.per_class.iter().map(|c| c.mean).sum::<f64>() / n;
    if (recomputed - r.summary.all_mean).abs() > 1e-9 {
        failures.push(format!("{tag}: all-class mean {} differs from recomputed {recomputed}", r.summary.all_mean));
    }
    if let (Some(o), Some(nw)) = (r.summary.old_mean, r.summary.new_mean) {
        let w = (o * r.summary.n_old as f64 + nw * r.summary.n_new as f64) / n;
        if (w - r.summary.all_mean).abs() > 0.01 {
            failures.push(format!("{tag}: all-class mean is not the count-weighted split mean"));
        }
    }
    if r.per_class.iter().flat_map(|c| c.per_image.iter()).any(|d| !(0.0..=100.0).contains(d)) {
        failures.push(format!("{tag}: Dice outside [0, 100]"));
    }
    failures
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let started = unix_now();
    let mut runs: Vec<PathBuf> = args.runs.clone();
    for (a, b) in &args.compare {
        for p in [a, b] {
            if !runs.contains(p) {
                runs.push(p.clone());
            }
        }
    }
    let first = runs.first().ok_or_else(|| Error::Data("no run to evaluate".into()))?.clone();
    let mut by_run: BTreeMap<PathBuf, Vec<DiceReport>> = BTreeMap::new();
    let mut reports = Vec::new();
    for run in &runs {
        let r = evaluate_run(run, args.data.as_deref())?;
        reports.extend(r.iter().cloned());
        by_run.insert(run.clone(), r);
    }
    let mut comparisons = Vec::new();
    for (a, b) in &args.compare {
        let (ra, rb) = (by_run[a].last(), by_run[b].last());
        let (Some(ra), Some(rb)) = (ra, rb) else {
            return Err(Error::Data("compared runs need at least one checkpoint".into()));
        };
        let (xa, xb) = (ra.per_image(None), rb.per_image(None));
        let (test, statistic, p_value) = significance(&xa, &xb, xa.len() == xb.len(), args.test)?;
        comparisons.push(SignificanceResult {
            method_a: ra.run.clone(),
            method_b: rb.run.clone(),
            test,
            n: xa.len().min(xb.len()),
            statistic,
            p_value,
        });
    }
    let failures: Vec<String> = reports.iter().flat_map(check_report).collect();
    let out_dir = args.out.clone().unwrap_or_else(|| first.join(EVAL_DIR));
    emit_report(&reports, &comparisons, &out_dir)?;
    for run in &runs {
        append_event(run, "eval", started)?;
    }
    Ok(EvalOutcome { reports, comparisons, failures, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(spec: &PhantomSpec, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| spec.layout[i].class.name.clone()).collect()
    }

    #[test]
    fn two_step_plan_matches_default_split() {
        let spec = PhantomSpec::default_kidney(64);
        let plan = plan_steps(&spec, Preset::TwoStep, None, false).unwrap();
        assert_eq!(plan, vec![(0..6).collect::<Vec<_>>(), (6..12).collect()]);
        let rev = plan_steps(&spec, Preset::TwoStep, None, true).unwrap();
        assert_eq!(rev[0], plan[1]);
    }

    #[test]
    fn four_step_order_by_class_names() {
        let spec = PhantomSpec::default_kidney(64);
        let order: Vec<String> = ["cortex", "capsule", "podocyte", "lesion"].iter().map(|s| s.to_string()).collect();
        let plan = plan_steps(&spec, Preset::FourStep, Some(&order), false).unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(names(&spec, &plan[0]), ["cortex", "medulla"]);
        assert!(names(&spec, &plan[1]).contains(&"capsule".to_string()));
        assert!(names(&spec, &plan[2]).contains(&"podocyte".to_string()));
        assert_eq!(names(&spec, &plan[3]), ["crescent", "fibrosis"]);
        let bad: Vec<String> = ["cortex", "medulla", "podocyte", "lesion"].iter().map(|s| s.to_string()).collect();
        assert!(plan_steps(&spec, Preset::FourStep, Some(&bad), false).is_err());
    }

    #[test]
    fn three_step_merges_first_two_groups() {
        let spec = PhantomSpec::default_kidney(64);
        let plan = plan_steps(&spec, Preset::ThreeStep, None, false).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 12);
        assert_eq!(plan[0].len(), 7);
    }

    #[test]
    fn finetune_zeroes_both_weights() {
        let c = method_config(Method::Finetune, false, TrainConfig::default());
        assert_eq!((c.lambda_anatomy, c.lambda_semi), (0.0, 0.0));
        let c = method_config(Method::Irs, true, TrainConfig::default());
        assert_eq!((c.lambda_anatomy, c.lambda_semi), (0.0, 1.0));
    }

    #[test]
    fn preset_names_round_trip() {
        for p in [Preset::TwoStep, Preset::ThreeStep, Preset::FourStep] {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
            assert_eq!(Preset::from_steps(p.steps()).unwrap(), p);
        }
        assert!(Preset::from_steps(5).is_err());
    }
}

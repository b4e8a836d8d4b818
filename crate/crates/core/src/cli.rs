//! Command-line front end. `run` returns the process exit code so tests can
//! drive every subcommand in-process.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
//! 3 backend unreachable at preflight.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, HttpBackend, ReplayBackend, ScriptedBackend, TranscriptStore,
};
use crate::config::{BackendKind, Layers, RunConfig};
use crate::curation::{run_rl_pipeline, run_sft_pipeline};
use crate::data::{load_manifest_with, sample_frames, LoadOptions, Sample};
use crate::engine::{read_trajectory_log, run_batch, TrajectoryRecord};
use crate::grpo::{train, ToyEnvSuite};
use crate::metrics::{aggregate, score_sample, MetricReport, SampleScore};
use crate::oracle::{
    oracle_upper_bound, pseudo_keyframes, run_oracle, stratified_report, subset_table,
    Partition,
};
use crate::report::{
    comparison_table, read_score_log, score_log, summary_csv, summary_table, svg_bars, svg_lines,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const SET_S_FILE: &str = "set_s.ids";
pub const SET_U_FILE: &str = "set_u.ids";
pub const PSEUDO_FILE: &str = "pseudo_keyframes.jsonl";
pub const FRAMEWISE_FILE: &str = "framewise.jsonl";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Parser)]
#[command(name = "vtagent", version, about = "Locate-and-focus agent harness for video TextVQA")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the two-turn agent over a manifest and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Skip samples already present in the trajectory log.
        #[arg(long)]
        resume: bool,
    },
    /// Frame-wise oracle analysis and the Set_s / Set_u partition.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Rejection-sample teacher trajectories into an SFT corpus.
    CurateSft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        curation: CurationArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Keep samples the model solves sometimes but not always.
    CurateRl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        curation: CurationArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Train the toy policy with GRPO and write the reward curve.
    Grpo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grpo: GrpoArgs,
        /// Also write curve.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Compare score logs side by side, optionally per oracle subset.
    Report {
        #[command(flatten)]
        common: Common,
        /// NAME=PATH of a scores.jsonl; the first is the reference system.
        #[arg(long = "scores", required = true, value_name = "NAME=PATH")]
        scores: Vec<String>,
        /// NAME=PATH of a trajectories.jsonl, used for subset hit rates.
        #[arg(long = "trajectories", value_name = "NAME=PATH")]
        trajectories: Vec<String>,
        /// Directory written by `oracle` (set_s.ids, set_u.ids, pseudo_keyframes.jsonl).
        #[arg(long)]
        partition_dir: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
    },
    /// Inspect the resolved configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print every resolved setting (secrets masked).
    Show {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        grpo: GrpoArgs,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory relative frame paths resolve against.
    #[arg(long)]
    frame_root: Option<PathBuf>,
    /// Frames sampled per video (0 keeps all).
    #[arg(long)]
    frames: Option<usize>,
    /// Maximum keyframes kept from a selection.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    skip_frame_check: bool,
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// http, scripted or replay.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    api_base: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Transcript store: replayed from, or recorded into when --backend http.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Scripted responses, one JSON string per line.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// uniform-keyframes or direct-answer.
    #[arg(long)]
    fallback: Option<String>,
}

#[derive(Debug, Args)]
struct CurationArgs {
    /// Samples drawn per input.
    #[arg(long)]
    attempts: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct GrpoArgs {
    /// Rollouts per group.
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    envs_per_step: Option<usize>,
    /// Drop the bonus for a valid keyframe selection.
    #[arg(long)]
    no_tool_reward: bool,
}

/// A failed command with the exit code it maps to.
#[derive(Debug)]
struct Fail {
    code: i32,
    message: String,
}

impl Fail {
    fn config(m: impl std::fmt::Display) -> Self {
        Fail {
            code: EXIT_CONFIG,
            message: m.to_string(),
        }
    }
    fn runtime(m: impl std::fmt::Display) -> Self {
        Fail {
            code: EXIT_RUNTIME,
            message: m.to_string(),
        }
    }
}

type CmdResult = Result<(), Fail>;

/// Overrides collected from flags, applied after file and environment.
#[derive(Default)]
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn put<T: ToString>(&mut self, key: &'static str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
    }
    fn common(&mut self, c: &Common) {
        self.put("out_dir", &c.out_dir.as_ref().map(|p| p.display().to_string()));
        self.put("seed", &c.seed);
    }
    fn data(&mut self, d: &DataArgs) {
        self.put("frames", &d.frames);
        self.put("cap", &d.cap);
    }
    fn backend(&mut self, b: &BackendArgs) {
        self.put("backend", &b.backend);
        self.put("api_base", &b.api_base);
        self.put("model", &b.model);
        self.put("store", &b.store.as_ref().map(|p| p.display().to_string()));
        self.put("script", &b.script.as_ref().map(|p| p.display().to_string()));
        self.put("parallelism", &b.parallelism);
        self.put("fallback", &b.fallback);
    }
    fn curation(&mut self, c: &CurationArgs) {
        self.put("curation_attempts", &c.attempts);
        self.put("curation_temperature", &c.temperature);
    }
    fn grpo(&mut self, g: &GrpoArgs) {
        self.put("group", &g.group);
        self.put("eps", &g.eps);
        self.put("steps", &g.steps);
        self.put("lr", &g.lr);
        self.put("envs_per_step", &g.envs_per_step);
        if g.no_tool_reward {
            self.0.push(("tool_reward", "false".into()));
        }
    }
}

fn layers(common: &Common, env: &HashMap<String, String>, o: &Overrides) -> Result<Layers, Fail> {
    let mut l = Layers::defaults();
    if let Some(path) = &common.config {
        l.apply_file(path).map_err(Fail::config)?;
    }
    l.apply_env(env);
    for (k, v) in &o.0 {
        l.set(k, v.clone()).map_err(Fail::config)?;
    }
    Ok(l)
}

fn resolve(common: &Common, env: &HashMap<String, String>, o: &Overrides) -> Result<RunConfig, Fail> {
    layers(common, env, o)?.resolve().map_err(Fail::config)
}

fn load_samples(data: &DataArgs, cfg: &RunConfig) -> Result<Vec<Sample>, Fail> {
    let path = data
        .manifest
        .as_ref()
        .ok_or_else(|| Fail::config("missing --manifest"))?;
    let opts = LoadOptions {
        frame_root: data.frame_root.clone(),
        skip_frame_check: data.skip_frame_check,
    };
    let manifest = load_manifest_with(path, &opts)
        .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
    if manifest.samples.is_empty() {
        return Err(Fail::config(format!("{}: manifest has no samples", path.display())));
    }
    Ok(manifest
        .samples
        .iter()
        .map(|s| sample_frames(s, cfg.sampling))
        .collect())
}

fn build_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, Fail> {
    let open_store = |p: &Path| TranscriptStore::open(p).map_err(Fail::config);
    let backend: Box<dyn Backend> = match cfg.backend {
        BackendKind::Http => {
            let http = Box::new(HttpBackend::new(cfg.endpoint.clone()));
            match &cfg.store {
                Some(p) => Box::new(ReplayBackend::recording(open_store(p)?, http)),
                None => http,
            }
        }
        BackendKind::Scripted => {
            let p = cfg
                .script
                .as_ref()
                .ok_or_else(|| Fail::config("scripted backend needs --script"))?;
            Box::new(
                ScriptedBackend::from_file(p)
                    .map_err(|e| Fail::config(format!("{}: {e}", p.display())))?,
            )
        }
        BackendKind::Replay => {
            let p = cfg
                .store
                .as_ref()
                .ok_or_else(|| Fail::config("replay backend needs --store"))?;
            if !p.is_file() {
                return Err(Fail::config(format!("transcript store {} not found", p.display())));
            }
            Box::new(ReplayBackend::strict(open_store(p)?))
        }
    };
    backend.preflight().map_err(|e| Fail {
        code: EXIT_UNREACHABLE,
        message: format!("backend {} unreachable: {e}", backend.id()),
    })?;
    Ok(backend)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Fail::runtime(format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Fail::runtime(format!("{}: {e}", path.display())))
}

/// Split tags in order of first appearance.
fn split_tags(samples: &[Sample]) -> Vec<String> {
    let mut tags: Vec<String> = Vec::new();
    for s in samples {
        if !tags.contains(&s.split_tag) {
            tags.push(s.split_tag.clone());
        }
    }
    tags
}

fn overall_tag(samples: &[Sample]) -> String {
    match split_tags(samples).as_slice() {
        [one] => one.clone(),
        _ => "all".into(),
    }
}

/// Scores every sample that has a trajectory record; failed episodes score zero.
pub fn score_trajectories(
    samples: &[Sample],
    records: &[TrajectoryRecord],
    threshold: f64,
) -> Vec<SampleScore> {
    let by_id: HashMap<&str, &TrajectoryRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    samples
        .iter()
        .filter_map(|s| {
            let r = by_id.get(s.sample_id.as_str())?;
            Some(score_sample(
                &s.sample_id,
                &r.answer,
                &s.gold_answers,
                &r.keyframe_ids,
                s.pseudo_keyframes.as_ref(),
                threshold,
            ))
        })
        .collect()
}

fn cmd_eval(
    common: &Common,
    data: &DataArgs,
    backend_args: &BackendArgs,
    resume: bool,
    env: &HashMap<String, String>,
) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    o.data(data);
    o.backend(backend_args);
    let cfg = resolve(common, env, &o)?;
    let samples = load_samples(data, &cfg)?;
    let backend = build_backend(&cfg)?;
    make_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(TRAJECTORIES_FILE);
    let batch = run_batch(&samples, &*backend, &cfg.engine, &log_path, resume)
        .map_err(Fail::runtime)?;
    let records = read_trajectory_log(&log_path).map_err(Fail::runtime)?;
    let scores = score_trajectories(&samples, &records, cfg.anls_threshold);
    let overall = aggregate(&overall_tag(&samples), &scores).map_err(Fail::runtime)?;

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let tags = split_tags(&samples);
    if tags.len() > 1 {
        for tag in &tags {
            let ids: BTreeSet<&str> = samples
                .iter()
                .filter(|s| &s.split_tag == tag)
                .map(|s| s.sample_id.as_str())
                .collect();
            let part: Vec<SampleScore> = scores
                .iter()
                .filter(|s| ids.contains(s.sample_id.as_str()))
                .cloned()
                .collect();
            if let Ok(r) = aggregate(tag, &part) {
                rows.push((backend.id().to_string(), r));
            }
        }
    }
    rows.push((backend.id().to_string(), overall.clone()));

    write(&cfg.out_dir.join(SCORES_FILE), score_log(&scores, &overall))?;
    let mut text = summary_table(&rows);
    let _ = writeln!(
        text,
        "executed {}, skipped {}, failed {}, fallbacks {}",
        batch.executed, batch.skipped, batch.failed, batch.fallbacks
    );
    write(&cfg.out_dir.join("summary.txt"), &text)?;
    write(&cfg.out_dir.join("summary.csv"), summary_csv(&rows))?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PseudoLine {
    sample_id: String,
    keyframes: Vec<usize>,
}

fn cmd_oracle(
    common: &Common,
    data: &DataArgs,
    backend_args: &BackendArgs,
    env: &HashMap<String, String>,
) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    o.data(data);
    o.backend(backend_args);
    let cfg = resolve(common, env, &o)?;
    let samples = load_samples(data, &cfg)?;
    let backend = build_backend(&cfg)?;
    make_dir(&cfg.out_dir)?;
    let (results, video) = run_oracle(&samples, &*backend, &cfg.engine).map_err(Fail::runtime)?;
    let (report, partition) = oracle_upper_bound(&overall_tag(&samples), &results, Some(&video));

    let mut framewise = String::new();
    let mut pseudo = String::new();
    for r in &results {
        framewise.push_str(&serde_json::to_string(r).expect("serializes"));
        framewise.push('\n');
        if let Ok(keys) = pseudo_keyframes(r) {
            let line = PseudoLine {
                sample_id: r.sample_id.clone(),
                keyframes: keys.into_iter().collect(),
            };
            pseudo.push_str(&serde_json::to_string(&line).expect("serializes"));
            pseudo.push('\n');
        }
    }
    write(&cfg.out_dir.join(FRAMEWISE_FILE), framewise)?;
    write(&cfg.out_dir.join(PSEUDO_FILE), pseudo)?;
    write(&cfg.out_dir.join(SET_S_FILE), Partition::ids_file(&partition.set_s))?;
    write(&cfg.out_dir.join(SET_U_FILE), Partition::ids_file(&partition.set_u))?;
    write(
        &cfg.out_dir.join("oracle_report.json"),
        serde_json::to_string_pretty(&report).expect("serializes"),
    )?;
    let mut text = report.table();
    let _ = writeln!(
        text,
        "n {}  Set_s {}  Set_u {}",
        report.n,
        partition.set_s.len(),
        partition.set_u.len()
    );
    write(&cfg.out_dir.join("oracle_summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_curate(
    rl: bool,
    common: &Common,
    data: &DataArgs,
    backend_args: &BackendArgs,
    curation: &CurationArgs,
    resume: bool,
    env: &HashMap<String, String>,
) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    o.data(data);
    o.backend(backend_args);
    o.curation(curation);
    let cfg = resolve(common, env, &o)?;
    let samples = load_samples(data, &cfg)?;
    let backend = build_backend(&cfg)?;
    if rl {
        let s = run_rl_pipeline(&samples, &*backend, &cfg.engine, &cfg.curation, &cfg.out_dir, resume)
            .map_err(Fail::runtime)?;
        for line in s.histogram_lines() {
            println!("{line}");
        }
        println!("{}", s.curation.yield_line());
    } else {
        let s = run_sft_pipeline(&samples, &*backend, &cfg.engine, &cfg.curation, &cfg.out_dir, resume)
            .map_err(Fail::runtime)?;
        if s.duplicates > 0 {
            println!("removed {} duplicate samples", s.duplicates);
        }
        println!("{}", s.yield_line());
    }
    Ok(())
}

fn cmd_grpo(common: &Common, grpo: &GrpoArgs, svg: bool, env: &HashMap<String, String>) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    o.grpo(grpo);
    let cfg = resolve(common, env, &o)?;
    let suite = ToyEnvSuite {
        n_frames: cfg.toy_frames,
        vocab_size: cfg.toy_vocab,
        feature_scale: cfg.toy_feature_scale,
    };
    let result = train(&suite, &cfg.grpo).map_err(Fail::runtime)?;
    make_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(CURVE_FILE), result.to_csv())?;
    if svg {
        let xs: Vec<f64> = result.curve.iter().map(|s| s.step as f64).collect();
        let series = vec![
            ("mean reward".to_string(), result.curve.iter().map(|s| s.mean_reward).collect()),
            ("accuracy".to_string(), result.curve.iter().map(|s| s.mean_acc).collect()),
            ("tool rate".to_string(), result.curve.iter().map(|s| s.tool_rate).collect()),
        ];
        write(&cfg.out_dir.join("curve.svg"), svg_lines("GRPO toy training", &xs, &series))?;
    }
    let window = 50;
    println!("final mean reward   {:.4}", result.tail_mean(window, |s| s.mean_reward));
    println!("final tool rate     {:.4}", result.tail_mean(window, |s| s.tool_rate));
    println!("final accuracy      {:.4}", result.tail_mean(window, |s| s.mean_acc));
    println!("expected accuracy   {:.4}", result.final_expected_accuracy);
    println!("chance accuracy     {:.4}", result.chance_accuracy);
    Ok(())
}

fn named_path(arg: &str) -> Result<(String, PathBuf), Fail> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(Fail::config(format!("expected NAME=PATH, got {arg:?}"))),
    }
}

fn read_text(path: &Path) -> Result<String, Fail> {
    fs::read_to_string(path).map_err(|e| Fail::config(format!("{}: {e}", path.display())))
}

fn read_pseudo(path: &Path) -> Result<BTreeMap<String, BTreeSet<usize>>, Fail> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PseudoLine = serde_json::from_str(line)
            .map_err(|e| Fail::config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.insert(p.sample_id, p.keyframes.into_iter().collect());
    }
    Ok(out)
}

fn cmd_report(
    common: &Common,
    scores: &[String],
    trajectories: &[String],
    partition_dir: Option<&Path>,
    svg: bool,
    env: &HashMap<String, String>,
) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    let cfg = resolve(common, env, &o)?;

    let mut systems: Vec<(String, Vec<SampleScore>, MetricReport)> = Vec::new();
    for arg in scores {
        let (name, path) = named_path(arg)?;
        let log = read_score_log(&path).map_err(Fail::config)?;
        let summary = match log.summary {
            Some(s) => s,
            None => aggregate("all", &log.scores)
                .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?,
        };
        systems.push((name, log.scores, summary));
    }
    let mut trajs: HashMap<String, Vec<TrajectoryRecord>> = HashMap::new();
    for arg in trajectories {
        let (name, path) = named_path(arg)?;
        trajs.insert(name, read_trajectory_log(&path).map_err(Fail::config)?);
    }

    let rows: Vec<(String, MetricReport)> =
        systems.iter().map(|(n, _, r)| (n.clone(), r.clone())).collect();
    let mut text = comparison_table(&rows);
    let mut csv = summary_csv(&rows);
    make_dir(&cfg.out_dir)?;

    if let Some(dir) = partition_dir {
        let partition = Partition {
            set_s: Partition::parse_ids(&read_text(&dir.join(SET_S_FILE))?),
            set_u: Partition::parse_ids(&read_text(&dir.join(SET_U_FILE))?),
        };
        let pseudo = read_pseudo(&dir.join(PSEUDO_FILE))?;
        let input: Vec<_> = systems
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone(), trajs.get(n).cloned()))
            .collect();
        let subset_rows = stratified_report(&input, &partition, &pseudo);
        text.push('\n');
        text.push_str(&subset_table(&subset_rows));
        csv.push_str("\nsystem,subset,n,accuracy,hit_rate\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &subset_rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.system,
                r.subset,
                r.n,
                cell(r.accuracy),
                cell(r.hit_rate)
            );
        }
        if svg {
            let cats = vec!["Set_s".to_string(), "Set_u".to_string()];
            let series: Vec<(String, Vec<f64>)> = systems
                .iter()
                .map(|(n, _, _)| {
                    let vals = ["Set_s", "Set_u"]
                        .iter()
                        .map(|sub| {
                            subset_rows
                                .iter()
                                .find(|r| &r.system == n && r.subset == *sub)
                                .and_then(|r| r.accuracy)
                                .unwrap_or(0.0)
                        })
                        .collect();
                    (n.clone(), vals)
                })
                .collect();
            write(&cfg.out_dir.join("subsets.svg"), svg_bars("Accuracy by subset", &cats, &series))?;
        }
    }
    if svg {
        let cats = vec!["ACC.".to_string(), "ANLS".to_string()];
        let series: Vec<(String, Vec<f64>)> = rows
            .iter()
            .map(|(n, r)| (n.clone(), vec![r.accuracy, r.anls]))
            .collect();
        write(&cfg.out_dir.join("report.svg"), svg_bars("Overall", &cats, &series))?;
    }
    write(&cfg.out_dir.join("report.txt"), &text)?;
    write(&cfg.out_dir.join("report.csv"), csv)?;
    print!("{text}");
    Ok(())
}

fn cmd_config_show(
    common: &Common,
    data: &DataArgs,
    backend: &BackendArgs,
    grpo: &GrpoArgs,
    env: &HashMap<String, String>,
) -> CmdResult {
    let mut o = Overrides::default();
    o.common(common);
    o.data(data);
    o.backend(backend);
    o.grpo(grpo);
    let l = layers(common, env, &o)?;
    l.resolve().map_err(Fail::config)?;
    print!("{}", l.dump());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command against
/// the given environment.
pub fn run_with_env<I, T>(args: I, env: &HashMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Eval {
            common,
            data,
            backend,
            resume,
        } => cmd_eval(common, data, backend, *resume, env),
        Command::Oracle {
            common,
            data,
            backend,
        } => cmd_oracle(common, data, backend, env),
        Command::CurateSft {
            common,
            data,
            backend,
            curation,
            resume,
        } => cmd_curate(false, common, data, backend, curation, *resume, env),
        Command::CurateRl {
            common,
            data,
            backend,
            curation,
            resume,
        } => cmd_curate(true, common, data, backend, curation, *resume, env),
        Command::Grpo { common, grpo, svg } => cmd_grpo(common, grpo, *svg, env),
        Command::Report {
            common,
            scores,
            trajectories,
            partition_dir,
            svg,
        } => cmd_report(common, scores, trajectories, partition_dir.as_deref(), *svg, env),
        Command::Config {
            action:
                ConfigAction::Show {
                    common,
                    data,
                    backend,
                    grpo,
                },
        } => cmd_config_show(common, data, backend, grpo, env),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Verbosity requested on the command line, for logger setup before `run`.
pub fn verbosity<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args).map(|c| c.verbose).unwrap_or(0)
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env: HashMap<String, String> = std::env::vars().collect();
    run_with_env(args, &env)
}

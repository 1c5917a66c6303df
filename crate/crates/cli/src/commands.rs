use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use learnds::datagen::{
    read_instances, sample_nn_instance, write_instances, DistributionSpec, InstanceRecord, NnInstance, QuerySchedule,
    StreamSpec,
};
use learnds::eval::{eval_instances, evaluate_baseline, evaluate_model, paired_bootstrap_ci, BaselineKind, EvalReport};
use learnds::freqest::{
    eval_mae, load_freq_model, stream_suite, FreqNets, FreqTrainConfig, FreqTrainer, MaeReport, SketchRunner,
};
use learnds::presets::{freq_preset, nn_preset, FREQ_PRESETS, NN_PRESETS};
use learnds::probes::{self, LogisticSettings};
use learnds::rng::{derive_seed, seeded, tag};
use learnds::trainer::{load_model, Ablation, StopReason, TrainConfig, Trainer};
use learnds::baselines::CountMinSketch;
use learnds_autodiff::Checkpoint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifacts::{DirLock, RunManifest, MANIFEST_FILE};
use crate::error::CliError;
use crate::{BaselineArgs, Cli, EvalArgs, GenArgs, ProbeArgs, ReportArgs, TrainArgs};

type Res<T = ()> = Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "log.csv";
const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Top-level training config file: exactly one of `[nn]` or `[freq]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RunConfig {
    Nn(TrainConfig),
    Freq(FreqTrainConfig),
}

impl RunConfig {
    fn validate(&self) -> Res {
        match self {
            RunConfig::Nn(c) => c.validate()?,
            RunConfig::Freq(c) => c.validate()?,
        }
        Ok(())
    }

    fn to_toml(&self) -> Res<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn preset_config(name: &str) -> Res<RunConfig> {
    if NN_PRESETS.contains(&name) {
        Ok(RunConfig::Nn(nn_preset(name)?))
    } else if FREQ_PRESETS.contains(&name) {
        Ok(RunConfig::Freq(freq_preset(name)?))
    } else {
        Err(CliError::Config(format!(
            "unknown preset '{name}'; expected one of {}, {}",
            NN_PRESETS.join(", "),
            FREQ_PRESETS.join(", ")
        )))
    }
}

fn distribution(cli: &Cli, spec: Option<&PathBuf>) -> Res<DistributionSpec> {
    let spec = match (spec, &cli.preset) {
        (Some(p), _) => read_toml::<DistributionSpec>(p)?,
        (None, Some(name)) => nn_preset(name)?.distribution,
        (None, None) => return Err(CliError::Config("pass --spec or a nearest-neighbor --preset".into())),
    };
    spec.validate()?;
    Ok(spec)
}

fn write_file(dir: &Path, manifest: &mut RunManifest, kind: &str, file: &str, text: &str) -> Res {
    probes::write_text(dir.join(file), text)?;
    manifest.record(dir, kind, file)
}

fn write_json<T: Serialize>(dir: &Path, manifest: &mut RunManifest, kind: &str, file: &str, value: &T) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(dir, manifest, kind, file, &(text + "\n"))
}

/// Opens the run directory for writing: lock plus manifest.
fn open_run(cli: &Cli) -> Res<(DirLock, RunManifest)> {
    let lock = DirLock::acquire(&cli.out)?;
    let mut manifest = RunManifest::load_or_new(&cli.out, cli.threads)?;
    manifest.threads = cli.threads;
    Ok((lock, manifest))
}

pub fn gen(cli: &Cli, a: &GenArgs) -> Res {
    let spec = distribution(cli, a.spec.as_ref())?;
    let seed = cli.seed.unwrap_or(0);
    let records = (0..a.count as u64)
        .map(|i| {
            let s = derive_seed(seed, &[i]);
            Ok(InstanceRecord::from_instance(&spec, s, &sample_nn_instance(&spec, s)?))
        })
        .collect::<Res<Vec<_>>>()?;
    let (_lock, mut manifest) = open_run(cli)?;
    write_instances(cli.out.join(&a.file), &records)?;
    manifest.record(&cli.out, "instances", &a.file)?;
    manifest.add_seed(seed);
    manifest.save(&cli.out)?;
    log::info!("wrote {} instances to {}", records.len(), cli.out.join(&a.file).display());
    Ok(())
}

fn resolve_train_config(cli: &Cli, a: &TrainArgs) -> Res<Option<RunConfig>> {
    let mut config = match (&a.config, &cli.preset) {
        (Some(p), _) => read_toml::<RunConfig>(p)?,
        (None, Some(name)) => preset_config(name)?,
        (None, None) => return Ok(None),
    };
    match &mut config {
        RunConfig::Nn(c) => {
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            if let Some(m) = a.max_steps {
                c.max_steps = m;
            }
            if let Some(ab) = &a.ablation {
                c.ablation = Ablation::parse(ab)?;
            }
        }
        RunConfig::Freq(c) => {
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            if let Some(m) = a.max_steps {
                c.max_steps = m;
            }
            if a.ablation.is_some() {
                return Err(CliError::Config("--ablation applies to nearest-neighbor runs only".into()));
            }
        }
    }
    config.validate()?;
    Ok(Some(config))
}

pub fn train(cli: &Cli, a: &TrainArgs) -> Res {
    let config = resolve_train_config(cli, a)?;
    if a.dry_run {
        let config = config.ok_or_else(|| CliError::Config("pass --config or --preset".into()))?;
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    match (config, a.resume) {
        (Some(RunConfig::Freq(c)), false) => train_freq(cli, c),
        (Some(RunConfig::Freq(_)), true) => Err(CliError::Config(
            "frequency runs train in one pass; --resume applies to nearest-neighbor runs".into(),
        )),
        (Some(RunConfig::Nn(c)), resume) => train_nn(cli, a, Some(c), resume),
        (None, true) => train_nn(cli, a, None, true),
        (None, false) => Err(CliError::Config("pass --config or --preset".into())),
    }
}

fn train_nn(cli: &Cli, a: &TrainArgs, config: Option<TrainConfig>, resume: bool) -> Res {
    let (_lock, mut manifest) = open_run(cli)?;
    let dir = &cli.out;
    let mut t = if resume {
        manifest.verify(dir, CHECKPOINT_FILE)?;
        let mut t = Trainer::from_checkpoint(&Checkpoint::load(dir.join(CHECKPOINT_FILE))?)?;
        if let Some(c) = config {
            let mut expect = t.config.clone();
            expect.max_steps = c.max_steps;
            if c != expect {
                return Err(CliError::Integrity(
                    "the given config differs from the checkpointed run (only max_steps may change)".into(),
                ));
            }
            t.config.max_steps = c.max_steps;
        } else if let Some(m) = a.max_steps {
            t.config.max_steps = m;
        }
        log::info!("resuming at step {}", t.step);
        t
    } else {
        if dir.join(CHECKPOINT_FILE).exists() {
            return Err(CliError::Config(format!(
                "{} already holds a checkpoint; pass --resume or choose another --out",
                dir.display()
            )));
        }
        Trainer::new(config.expect("caller passes a config for fresh runs"))?
    };
    manifest.add_seed(t.config.seed);
    let every = t.config.eval_every;
    loop {
        let boundary = (t.step / every + 1) * every;
        let target = a.pause_at.map_or(boundary, |p| p.min(boundary));
        let outcome = t.run(Some(target), |row| {
            let acc = row.eval_accuracy.as_ref().and_then(|v| v.last().copied());
            match acc {
                Some(acc) => log::info!("step {} loss {:.5} final-lookup acc {acc:.4}", row.step, row.train_loss),
                None => log::info!("step {} loss {:.5}", row.step, row.train_loss),
            }
        });
        save_nn_run(dir, &mut manifest, &t)?;
        match outcome? {
            StopReason::Paused if a.pause_at.is_some_and(|p| t.step >= p) => {
                log::info!("paused at step {}; continue with --resume", t.step);
                return Ok(());
            }
            StopReason::Paused => {}
            StopReason::MaxSteps | StopReason::EarlyStop => {
                log::info!("finished at step {} (best step {})", t.step, t.early.best_step);
                return Ok(());
            }
        }
    }
}

fn save_nn_run(dir: &Path, manifest: &mut RunManifest, t: &Trainer) -> Res {
    t.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    manifest.record(dir, "checkpoint", CHECKPOINT_FILE)?;
    t.write_log_csv(dir.join(LOG_FILE))?;
    manifest.record(dir, "log", LOG_FILE)?;
    write_file(dir, manifest, "config", CONFIG_FILE, &RunConfig::Nn(t.config.clone()).to_toml()?)?;
    manifest.config_hash = Some(t.config.hash());
    manifest.save(dir)
}

fn train_freq(cli: &Cli, config: FreqTrainConfig) -> Res {
    let (_lock, mut manifest) = open_run(cli)?;
    let dir = &cli.out;
    if dir.join(CHECKPOINT_FILE).exists() {
        return Err(CliError::Config(format!(
            "{} already holds a checkpoint; choose another --out",
            dir.display()
        )));
    }
    manifest.add_seed(config.seed);
    let mut t = FreqTrainer::new(config)?;
    let outcome = t.run(|row| log::info!("step {} loss {:.4} mae {:.4}", row.step, row.train_loss, row.eval_mae));
    t.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    manifest.record(dir, "checkpoint", CHECKPOINT_FILE)?;
    let mut csv = String::from("step,train_loss,eval_mae\n");
    for r in &t.log {
        csv.push_str(&format!("{},{},{}\n", r.step, r.train_loss, r.eval_mae));
    }
    write_file(dir, &mut manifest, "log", LOG_FILE, &csv)?;
    write_file(dir, &mut manifest, "config", CONFIG_FILE, &RunConfig::Freq(t.config.clone()).to_toml()?)?;
    manifest.config_hash = Some(t.config.hash());
    manifest.save(dir)?;
    outcome?;
    log::info!("finished at step {}; best held-out MAE {:.4}", t.step, t.best_mae);
    Ok(())
}

/// Loads a checkpoint after checking it against its run manifest.
fn load_checkpoint(path: &Path) -> Res<Checkpoint> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), CHECKPOINT_FILE.to_string())
    } else {
        let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let file = path
            .file_name()
            .ok_or_else(|| CliError::Config(format!("{} is not a checkpoint file", path.display())))?
            .to_string_lossy()
            .into_owned();
        (dir, file)
    };
    if !dir.join(&file).exists() {
        return Err(CliError::Config(format!("{} does not exist", dir.join(&file).display())));
    }
    let manifest = if dir.join(MANIFEST_FILE).exists() {
        let m = RunManifest::load(&dir)?;
        m.verify(&dir, &file)?;
        Some(m)
    } else {
        log::warn!("{} has no run manifest; skipping digest check", dir.display());
        None
    };
    let ck = Checkpoint::load(dir.join(&file))?;
    if let Some(h) = manifest.and_then(|m| m.config_hash) {
        if h != ck.manifest.config_hash {
            return Err(CliError::Integrity("checkpoint config hash differs from the run manifest".into()));
        }
    }
    Ok(ck)
}

fn checkpoint_kind(ck: &Checkpoint) -> &str {
    ck.manifest.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("")
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Res {
    let ck = load_checkpoint(&a.checkpoint)?;
    let seed = cli.seed.unwrap_or(0);
    if checkpoint_kind(&ck) == "freq_model" {
        let (model, config) = load_freq_model(&ck)?;
        let spec = StreamSpec {
            schedule: QuerySchedule::EveryStep,
            ..config.stream.clone()
        };
        let suite = stream_suite(&spec, config.stream_len, a.streams, seed)?;
        let nets = FreqNets::Learned(model);
        let report = eval_mae(&mut SketchRunner::new(&nets), &suite)?;
        log::info!("{}: MAE {:.4} over {} queries", report.method, report.overall, report.queries);
        let (_lock, mut manifest) = open_run(cli)?;
        write_json(&cli.out, &mut manifest, "mae_report", "eval_freq.json", &report)?;
        manifest.add_seed(seed);
        return manifest.save(&cli.out);
    }
    let (model, config) = load_model(&ck)?;
    let instances = match &a.data {
        Some(path) => read_instances(path)?
            .iter()
            .map(|r| r.to_instance())
            .collect::<learnds::Result<Vec<NnInstance>>>()?,
        None => eval_instances(&config.distribution, a.instances, derive_seed(seed, &[tag::EVAL]))?,
    };
    let mut report = evaluate_model(&model, &instances)?;
    report.method = config.ablation.name().to_string();
    log_eval(&report);
    let (_lock, mut manifest) = open_run(cli)?;
    let file = format!("eval_{}.json", report.method);
    write_json(&cli.out, &mut manifest, "eval_report", &file, &report)?;
    manifest.add_seed(seed);
    manifest.save(&cli.out)
}

fn log_eval(r: &EvalReport) {
    let violations = r.monotonicity_violations();
    if !violations.is_empty() {
        log::warn!("{}: accuracy drops at lookups {violations:?}", r.method);
    }
    log::info!(
        "{}: final accuracy {:?}, final mse {:.5}, sortedness {:?}",
        r.method,
        r.final_accuracy(),
        r.mse.last().copied().unwrap_or(f64::NAN),
        r.sortedness
    );
}

pub fn baseline(cli: &Cli, a: &BaselineArgs) -> Res {
    if a.kind == "cms" {
        return baseline_cms(cli, a);
    }
    let kind = BaselineKind::parse(&a.kind)?;
    let spec = distribution(cli, a.spec.as_ref())?;
    let m = match (a.m, &cli.preset) {
        (Some(m), _) => m,
        (None, Some(name)) if a.spec.is_none() => nn_preset(name)?.model.lookups,
        _ => return Err(CliError::Config("pass --m with --spec".into())),
    };
    let seed = cli.seed.unwrap_or(0);
    let instances = eval_instances(&spec, a.instances, derive_seed(seed, &[tag::EVAL]))?;
    let report = evaluate_baseline(kind, &instances, m, seed)?;
    log_eval(&report);
    let (_lock, mut manifest) = open_run(cli)?;
    let file = format!("baseline_{}.json", kind.name());
    write_json(&cli.out, &mut manifest, "eval_report", &file, &report)?;
    manifest.add_seed(seed);
    manifest.save(&cli.out)
}

fn baseline_cms(cli: &Cli, a: &BaselineArgs) -> Res {
    let seed = cli.seed.unwrap_or(0);
    let spec = StreamSpec {
        universe: a.universe,
        alpha: a.alpha,
        permute_ranks: true,
        schedule: QuerySchedule::EveryStep,
    };
    let suite = stream_suite(&spec, a.stream_len, a.streams, seed)?;
    let mut sketch = CountMinSketch::new(a.w, a.d, a.delta, &mut seeded(seed, &[tag::BASELINE]))?;
    let mut unit = sketch.clone();
    unit.delta = 1.0;
    let report = eval_mae(&mut sketch, &suite)?;
    let reference = eval_mae(&mut unit, &suite)?;
    let mut csv = String::from("method,w,d,delta,mae,queries,diff_vs_delta1,ci_lo,ci_hi,ci_level\n");
    csv.push_str(&format!(
        "{},{},{},1,{},{},0,,,\n",
        csv_cell(&reference.method), a.w, a.d, reference.overall, reference.queries
    ));
    if a.delta != 1.0 {
        let ci = paired_bootstrap_ci(&report.per_stream, &reference.per_stream, BOOTSTRAP_RESAMPLES, 0.95, seed)?;
        log::info!(
            "{} MAE {:.4} vs delta=1 MAE {:.4}; difference {:.4} [{:.4}, {:.4}]",
            report.method,
            report.overall,
            reference.overall,
            ci.mean,
            ci.lo,
            ci.hi
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            csv_cell(&report.method), a.w, a.d, a.delta, report.overall, report.queries, ci.mean, ci.lo, ci.hi, ci.level
        ));
    } else {
        log::info!("{} MAE {:.4}", report.method, report.overall);
    }
    let (_lock, mut manifest) = open_run(cli)?;
    let file = format!("baseline_cms_w{}_d{}_delta{}.json", a.w, a.d, a.delta);
    write_json(&cli.out, &mut manifest, "mae_report", &file, &report)?;
    write_file(&cli.out, &mut manifest, "table", "cms_compare.csv", &csv)?;
    manifest.add_seed(seed);
    manifest.save(&cli.out)
}

pub fn probe(cli: &Cli, a: &ProbeArgs) -> Res {
    let ck = load_checkpoint(&a.checkpoint)?;
    let seed = cli.seed.unwrap_or(0);
    let (_lock, mut manifest) = open_run(cli)?;
    let dir = &cli.out;
    let m = &mut manifest;
    if a.kind == "memory" {
        if checkpoint_kind(&ck) != "freq_model" {
            return Err(CliError::Config("the memory probe needs a frequency checkpoint".into()));
        }
        let (model, _) = load_freq_model(&ck)?;
        let k = model.config.k;
        let map = probes::freq_memory_map(&FreqNets::Learned(model))?;
        let mut csv = String::from("element,positions,values,dedicated\n");
        let mut grid = vec![0.0; map.entries.len() * k];
        for (row, e) in map.entries.iter().enumerate() {
            let join = |v: Vec<String>| v.join(";");
            csv.push_str(&format!(
                "{},{},{},{}\n",
                e.element,
                join(e.positions.iter().map(ToString::to_string).collect()),
                join(e.values.iter().map(ToString::to_string).collect()),
                e.dedicated
            ));
            for (&p, &v) in e.positions.iter().zip(&e.values) {
                grid[row * k + p] += v;
            }
        }
        log::info!(
            "{} of {} elements write to dedicated cells; mean update {:.4}",
            map.dedicated,
            map.entries.len(),
            map.mean_delta
        );
        write_json(dir, m, "probe", "probe_memory.json", &map)?;
        write_file(dir, m, "probe", "probe_memory.csv", &csv)?;
        write_file(dir, m, "figure", "probe_memory.svg", &probes::svg_heatmap(map.entries.len(), k, &grid, 12.0))?;
        return manifest.save(dir);
    }
    let (model, config) = load_model(&ck)?;
    let instances = eval_instances(&config.distribution, a.instances, derive_seed(seed, &[tag::PROBE]))?;
    match a.kind.as_str() {
        "histogram" => {
            let h = probes::lookup_histogram(&model, &instances, a.step, a.bins)?;
            let mut csv = format!(
                "bin_upper,{}\n",
                (0..h.positions).map(|p| format!("p{p}")).collect::<Vec<_>>().join(",")
            );
            let row = |v: &[f64]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
            for (edge, dist) in h.bin_edges.iter().zip(&h.by_bin) {
                csv.push_str(&format!("{edge},{}\n", row(dist)));
            }
            csv.push_str(&format!("all,{}\n", row(&h.overall)));
            let grid: Vec<f64> = h.by_bin.concat();
            write_json(dir, m, "probe", "probe_histogram.json", &h)?;
            write_file(dir, m, "probe", "probe_histogram.csv", &csv)?;
            write_file(dir, m, "figure", "probe_histogram.svg", &probes::svg_heatmap(h.by_bin.len(), h.positions, &grid, 24.0))?;
            log::info!("lookup {} mode position {}", a.step + 1, h.mode());
        }
        "adjacency" => {
            let adj = probes::adjacency_distance_matrix(&model, &instances)?;
            write_json(dir, m, "probe", "probe_adjacency.json", &adj)?;
            write_file(dir, m, "probe", "probe_adjacency.csv", &probes::matrix_csv(adj.n, adj.n, &adj.combined))?;
            write_file(dir, m, "figure", "probe_adjacency.svg", &probes::svg_heatmap(adj.n, adj.n, &adj.combined, 20.0))?;
            if adj.d >= 2 {
                let kd = probes::kd_adjacency_matrix(&instances)?;
                write_file(dir, m, "probe", "probe_adjacency_kd.csv", &probes::matrix_csv(kd.n, kd.n, &kd.combined))?;
                write_file(dir, m, "figure", "probe_adjacency_kd.svg", &probes::svg_heatmap(kd.n, kd.n, &kd.combined, 20.0))?;
            }
        }
        "regression" => {
            let fits = probes::extra_space_regression(&model, &instances)?;
            let width = fits.first().map_or(0, |f| f.coefficients.len());
            let mut csv = format!(
                "token,intercept,r2,{}\n",
                (0..width).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",")
            );
            for (i, f) in fits.iter().enumerate() {
                let coeffs: Vec<String> = f.coefficients.iter().map(ToString::to_string).collect();
                csv.push_str(&format!("{i},{},{},{}\n", f.intercept, f.r2, coeffs.join(",")));
            }
            write_json(dir, m, "probe", "probe_regression.json", &fits)?;
            write_file(dir, m, "probe", "probe_regression.csv", &csv)?;
        }
        "partition" => {
            let p = probes::partition_probe(&model, &instances, LogisticSettings::default())?;
            let mut csv = String::from("pc1,pc2,position\n");
            let mut points = Vec::with_capacity(p.queries.len());
            for (proj, pos) in &p.queries {
                let (x, y) = (proj[0], proj.get(1).copied().unwrap_or(0.0));
                csv.push_str(&format!("{x},{y},{pos}\n"));
                points.push((x, y, *pos));
            }
            write_json(dir, m, "probe", "probe_partition.json", &p)?;
            write_file(dir, m, "probe", "probe_partition.csv", &csv)?;
            write_file(dir, m, "figure", "probe_partition.svg", &probes::svg_scatter(&points, 480.0))?;
            log::info!("explained variance {:?}; skipped positions {:?}", p.pca.explained, p.skipped);
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown probe '{other}'; expected histogram, adjacency, regression, partition or memory"
            )))
        }
    }
    manifest.add_seed(seed);
    manifest.save(dir)
}

fn unique_name(names: &mut BTreeMap<String, usize>, method: &str) -> String {
    let n = names.entry(method.to_string()).or_insert(0);
    *n += 1;
    if *n == 1 {
        method.to_string()
    } else {
        format!("{method}#{n}")
    }
}

/// Quotes a CSV field when needed; method names contain commas.
fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(cells: &[String]) -> String {
    cells.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",")
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = csv_row(header) + "\n";
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report(cli: &Cli, a: &ReportArgs) -> Res {
    let mut evals: Vec<(String, EvalReport)> = Vec::new();
    let mut maes: Vec<(String, MaeReport)> = Vec::new();
    let mut names = BTreeMap::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?;
        let bad = |e: serde_json::Error| CliError::Integrity(format!("{}: {e}", path.display()));
        if value.get("per_timestep").is_some() {
            let r: MaeReport = serde_json::from_value(value).map_err(bad)?;
            maes.push((unique_name(&mut names, &r.method), r));
        } else if value.get("lookups").is_some() {
            let r: EvalReport = serde_json::from_value(value).map_err(bad)?;
            evals.push((unique_name(&mut names, &r.method), r));
        } else {
            return Err(CliError::Integrity(format!("{} is not an evaluation report", path.display())));
        }
    }
    let (_lock, mut manifest) = open_run(cli)?;
    let dir = &cli.out;
    let m = &mut manifest;
    let prefix = &a.name;
    if !evals.is_empty() {
        let lookups = evals.iter().map(|(_, r)| r.lookups).max().unwrap_or(0);
        let header: Vec<String> = std::iter::once("lookup".to_string())
            .chain(evals.iter().map(|(n, _)| n.clone()))
            .collect();
        let per_lookup = |get: &dyn Fn(&EvalReport, usize) -> Option<f64>| -> Vec<Vec<String>> {
            (0..lookups)
                .map(|i| {
                    std::iter::once((i + 1).to_string())
                        .chain(evals.iter().map(|(_, r)| opt_cell(get(r, i))))
                        .collect()
                })
                .collect()
        };
        let acc = per_lookup(&|r, i| r.accuracy.as_ref().and_then(|a| a.get(i).copied()));
        let mse = per_lookup(&|r, i| r.mse.get(i).copied());
        let summary_header: Vec<String> = [
            "method",
            "lookups",
            "final_accuracy",
            "final_mse",
            "sortedness",
            "instances",
            "monotonicity_violations",
        ]
        .map(String::from)
        .to_vec();
        let summary: Vec<Vec<String>> = evals
            .iter()
            .map(|(n, r)| {
                vec![
                    n.clone(),
                    r.lookups.to_string(),
                    opt_cell(r.final_accuracy()),
                    opt_cell(r.mse.last().copied()),
                    opt_cell(r.sortedness),
                    r.instances.to_string(),
                    r.monotonicity_violations().len().to_string(),
                ]
            })
            .collect();
        let series: Vec<Vec<f64>> = evals.iter().filter_map(|(_, r)| r.accuracy.clone()).collect();
        write_file(dir, m, "table", &format!("{prefix}_accuracy.csv"), &table(&header, &acc))?;
        write_file(dir, m, "table", &format!("{prefix}_mse.csv"), &table(&header, &mse))?;
        write_file(dir, m, "table", &format!("{prefix}_summary.csv"), &table(&summary_header, &summary))?;
        write_file(dir, m, "figure", &format!("{prefix}_accuracy.svg"), &probes::svg_lines(&series, 480.0, 320.0))?;
    }
    if !maes.is_empty() {
        let steps = maes.iter().map(|(_, r)| r.per_timestep.len()).max().unwrap_or(0);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain(maes.iter().map(|(n, _)| n.clone()))
            .collect();
        let rows: Vec<Vec<String>> = (0..steps)
            .map(|t| {
                std::iter::once((t + 1).to_string())
                    .chain(maes.iter().map(|(_, r)| opt_cell(r.per_timestep.get(t).copied().flatten())))
                    .collect()
            })
            .collect();
        let summary_header: Vec<String> = ["method", "mae", "queries", "streams"].map(String::from).to_vec();
        let summary: Vec<Vec<String>> = maes
            .iter()
            .map(|(n, r)| {
                vec![
                    n.clone(),
                    r.overall.to_string(),
                    r.queries.to_string(),
                    r.per_stream.len().to_string(),
                ]
            })
            .collect();
        // Timesteps without queries carry the previous value so the chart stays connected.
        let series: Vec<Vec<f64>> = maes
            .iter()
            .map(|(_, r)| {
                let mut last = 0.0;
                r.per_timestep
                    .iter()
                    .map(|v| {
                        last = v.unwrap_or(last);
                        last
                    })
                    .collect()
            })
            .collect();
        write_file(dir, m, "table", &format!("{prefix}_mae.csv"), &table(&summary_header, &summary))?;
        write_file(dir, m, "table", &format!("{prefix}_mae_timestep.csv"), &table(&header, &rows))?;
        write_file(dir, m, "figure", &format!("{prefix}_mae.svg"), &probes::svg_lines(&series, 480.0, 320.0))?;
    }
    manifest.save(dir)
}

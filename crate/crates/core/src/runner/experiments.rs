use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, topk_error, verify_pairs_sweep, Split, VerificationPairSet};
use crate::error::{invalid, Error, Result};
use crate::losses::LossWeights;
use crate::models::{checkpoint, degrade, Model};
use crate::pipeline::{
    kd_soft_baseline, run_stage, run_two_stage, train_supervised, StageKind, StagePlan, TrainReport,
};
use crate::runner::config::ExperimentConfig;

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<I, O, F>(items: &[I], jobs: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<O>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("unpoisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every slot filled"))
        .collect()
}

/// Output directory that only becomes visible once a command succeeds.
struct Staging {
    dir: PathBuf,
    target: PathBuf,
    created_target: bool,
}

impl Staging {
    fn new(target: &Path, name: &str) -> Result<Self> {
        let created_target = !target.exists();
        fs::create_dir_all(target)?;
        let dir = target.join(format!(".staging-{name}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            created_target,
        })
    }

    fn commit(self) -> Result<()> {
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let dest = self.target.join(entry.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest)?;
            } else if dest.exists() {
                fs::remove_file(&dest)?;
            }
            fs::rename(entry.path(), dest)?;
        }
        fs::remove_dir(&self.dir)?;
        Ok(())
    }

    fn discard(self) {
        let _ = fs::remove_dir_all(&self.dir);
        if self.created_target {
            let _ = fs::remove_dir(&self.target);
        }
    }

    /// Runs `f` against the staging dir, committing on success.
    fn run<T>(target: &Path, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let staging = Self::new(target, name)?;
        match f(&staging.dir) {
            Ok(v) => {
                staging.commit()?;
                Ok(v)
            }
            Err(e) => {
                staging.discard();
                Err(e)
            }
        }
    }
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn write_report(dir: &Path, name: &str, report: &TrainReport, steps: bool) -> Result<()> {
    report.write_epochs_csv(BufWriter::new(File::create(dir.join(format!("{name}_epochs.csv")))?))?;
    if steps {
        report.write_steps_csv(BufWriter::new(File::create(dir.join(format!("{name}_steps.csv")))?))?;
    }
    Ok(())
}

fn read_final_acc(path: &Path) -> Result<f64> {
    let epochs = TrainReport::read_epochs_csv(File::open(path)?)?;
    epochs
        .last()
        .map(|e| e.test_acc)
        .ok_or_else(|| invalid("summary", format!("{} has no epochs", path.display())))
}

/// One `(seed, method, test_acc)` row per trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub method: String,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub mean_test_acc: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_test_acc: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method summary in order of first appearance in `runs`.
pub fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in runs {
        if !by_method.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        by_method.entry(&r.method).or_default().push(r.test_acc);
    }
    order
        .into_iter()
        .map(|m| {
            let v = &by_method[m];
            let (mean, std) = mean_std(v);
            SummaryRow {
                method: m.to_string(),
                n: v.len(),
                mean_test_acc: mean,
                std_test_acc: std,
            }
        })
        .collect()
}

/// Summary sorted by mean accuracy, best first; ties keep the input order.
pub fn ranked(summary: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut rows = summary.to_vec();
    rows.sort_by(|a, b| b.mean_test_acc.total_cmp(&a.mean_test_acc));
    rows
}

pub fn write_rows<S: Serialize>(rows: &[S], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub const TRAIN_METHODS: [&str; 5] = ["teacher", "assistant", "two_stage", "direct", "no_distill"];

pub struct SeedModels {
    pub teacher: Model<f64>,
    pub assistant: Model<f64>,
    pub two_stage: Model<f64>,
    pub direct: Model<f64>,
    pub no_distill: Model<f64>,
}

fn train_teacher(cfg: &ExperimentConfig, seed: u64, data: &Split<f64>) -> Result<(Model<f64>, TrainReport)> {
    let (tspec, _, _) = cfg.specs(data.train.dims(), seed);
    let (teacher, report) = train_supervised(tspec, 1, data, &cfg.teacher_training.hyper(LossWeights::none(), seed))?;
    Ok((teacher.frozen(), report))
}

/// Teacher, two-stage pipeline, direct single stage and the no-distillation
/// baseline for one seed, with reports written under `dir`.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedModels> {
    fs::create_dir_all(dir)?;
    let data = load_dataset::<f64>(&cfg.dataset_for(seed))?;
    let (_, aspec, sspec) = cfg.specs(data.train.dims(), seed);
    let (teacher, teacher_report) = train_teacher(cfg, seed, &data)?;
    let f = cfg.degrade_factor;
    let two = run_two_stage(
        &teacher,
        aspec,
        sspec.clone(),
        f,
        &data,
        &cfg.stage1.hyper(cfg.weights, seed),
        &cfg.stage2.hyper(cfg.weights, seed),
    )?;
    let direct_hyper = cfg.direct_stage().hyper(cfg.weights, seed);
    let direct = run_stage(
        &StagePlan {
            kind: StageKind::CrossResolution,
            teacher: &teacher,
            student_spec: sspec.clone(),
            student_init: None,
            degrade_factor: f,
            hyper: direct_hyper.clone(),
        },
        &data,
    )?;
    let (no_distill, nd_report) = train_supervised(sspec, f, &data, &direct_hyper)?;

    write_report(dir, "teacher", &teacher_report, false)?;
    write_report(dir, "assistant", &two.assistant_report, true)?;
    write_report(dir, "two_stage", &two.student_report, true)?;
    write_report(dir, "direct", &direct.report, false)?;
    write_report(dir, "no_distill", &nd_report, false)?;
    let models = SeedModels {
        teacher,
        assistant: two.assistant,
        two_stage: two.student,
        direct: direct.model,
        no_distill,
    };
    for (name, m) in models.named() {
        checkpoint::save(m, &dir.join(format!("{name}.ckpt")))?;
    }
    Ok(models)
}

impl SeedModels {
    pub fn named(&self) -> [(&'static str, &Model<f64>); 5] {
        [
            ("teacher", &self.teacher),
            ("assistant", &self.assistant),
            ("two_stage", &self.two_stage),
            ("direct", &self.direct),
            ("no_distill", &self.no_distill),
        ]
    }
}

/// Rebuilds `runs.csv` rows from the per-seed epoch reports under `root`.
pub fn derive_runs(root: &Path, seeds: &[u64], methods: &[String]) -> Result<Vec<RunRow>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for m in methods {
            runs.push(RunRow {
                seed,
                method: m.clone(),
                test_acc: read_final_acc(&seed_dir(root, seed).join(format!("{m}_epochs.csv")))?,
            });
        }
    }
    Ok(runs)
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn train_methods() -> Vec<String> {
    TRAIN_METHODS.iter().map(|s| s.to_string()).collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SummaryRow>> {
    Staging::run(&cfg.output_dir, "train", |dir| {
        write_config(cfg, dir)?;
        parallel_map(&cfg.seeds, jobs, |&s| train_seed(cfg, s, &seed_dir(dir, s)).map(|_| ()))?;
        let runs = derive_runs(dir, &cfg.seeds, &train_methods())?;
        let summary = summarize(&runs);
        write_rows(&runs, &dir.join("runs.csv"))?;
        write_rows(&summary, &dir.join("summary.csv"))?;
        Ok(summary)
    })
}

pub const NO_DISTILL: &str = "no_distill";
pub const KD_SOFT: &str = "kd_soft";

fn ablation_methods(cfg: &ExperimentConfig) -> Vec<String> {
    let mut m: Vec<String> = cfg.ablation.iter().map(|a| a.name.clone()).collect();
    m.push(NO_DISTILL.into());
    m.push(KD_SOFT.into());
    m
}

/// Ranked ablation table: one row per loss subset plus the no-distillation
/// and soft-target baselines, each averaged over all seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SummaryRow>> {
    let target = cfg.output_dir.join("ablation");
    Staging::run(&target, "ablate", |dir| {
        write_config(cfg, dir)?;
        let teachers = parallel_map(&cfg.seeds, jobs, |&seed| {
            let data = load_dataset::<f64>(&cfg.dataset_for(seed))?;
            let (teacher, report) = train_teacher(cfg, seed, &data)?;
            let sd = seed_dir(dir, seed);
            fs::create_dir_all(&sd)?;
            write_report(&sd, "teacher", &report, false)?;
            Ok((teacher, data))
        })?;
        let methods = ablation_methods(cfg);
        let cells: Vec<(usize, &String)> = (0..cfg.seeds.len())
            .flat_map(|i| methods.iter().map(move |m| (i, m)))
            .collect();
        parallel_map(&cells, jobs, |&(i, method)| {
            let seed = cfg.seeds[i];
            let (teacher, data) = &teachers[i];
            let (_, aspec, sspec) = cfg.specs(data.train.dims(), seed);
            let f = cfg.degrade_factor;
            let direct = cfg.direct_stage().hyper(LossWeights::none(), seed);
            let report = match method.as_str() {
                NO_DISTILL => train_supervised(sspec, f, data, &direct)?.1,
                KD_SOFT => kd_soft_baseline(teacher, sspec, cfg.kd_temperature, f, data, &direct)?.1,
                name => {
                    let subset = cfg.ablation.iter().find(|a| a.name == name).expect("known row");
                    let w = subset.weights(&cfg.weights);
                    run_two_stage(
                        teacher,
                        aspec,
                        sspec,
                        f,
                        data,
                        &cfg.stage1.hyper(w, seed),
                        &cfg.stage2.hyper(w, seed),
                    )?
                    .student_report
                }
            };
            write_report(&seed_dir(dir, seed), method, &report, false)
        })?;
        let runs = derive_runs(dir, &cfg.seeds, &methods)?;
        let table = ranked(&summarize(&runs));
        write_rows(&runs, &dir.join("runs.csv"))?;
        write_rows(&table, &dir.join("ablation.csv"))?;
        Ok(table)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub method: String,
    pub top1_error: f64,
    pub top5_error: f64,
    pub verification_threshold: f64,
    pub verification_acc: f64,
}

/// Outcome of `eval`: metric rows plus any summary file that could not be
/// re-derived bit-exactly from its reports.
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub mismatches: Vec<PathBuf>,
}

fn same_bytes(path: &Path, rebuilt: &[u8]) -> Result<bool> {
    Ok(fs::read(path)? == rebuilt)
}

fn rows_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut out = csv::Writer::from_writer(Vec::new());
    for r in rows {
        out.serialize(r)?;
    }
    out.into_inner().map_err(|e| invalid("csv", e.to_string()))
}

fn check_summaries(
    root: &Path,
    seeds: &[u64],
    methods: &[String],
    summary_file: &str,
    rank: bool,
    mismatches: &mut Vec<PathBuf>,
) -> Result<()> {
    let runs = derive_runs(root, seeds, methods)?;
    let mut summary = summarize(&runs);
    if rank {
        summary = ranked(&summary);
    }
    for (file, bytes) in [("runs.csv", rows_bytes(&runs)?), (summary_file, rows_bytes(&summary)?)] {
        let path = root.join(file);
        if !same_bytes(&path, &bytes)? {
            mismatches.push(path);
        }
    }
    Ok(())
}

/// Re-derives every summary from the raw reports and scores the saved
/// low-resolution students with top-K and pair-verification metrics.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    let root = &cfg.output_dir;
    if !root.join("summary.csv").exists() {
        return Err(invalid("eval", format!("{} has no summary.csv; run train first", root.display())));
    }
    let mut mismatches = Vec::new();
    check_summaries(root, &cfg.seeds, &train_methods(), "summary.csv", false, &mut mismatches)?;
    let abl = root.join("ablation");
    if abl.join("ablation.csv").exists() {
        check_summaries(&abl, &cfg.seeds, &ablation_methods(cfg), "ablation.csv", true, &mut mismatches)?;
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_dataset::<f64>(&cfg.dataset_for(seed))?;
        let lr_test = degrade(&data.test, cfg.degrade_factor)?;
        let pairs = VerificationPairSet::sample(lr_test.labels(), cfg.verification_pairs, seed)?;
        for method in ["two_stage", "direct", "no_distill"] {
            let model: Model<f64> = checkpoint::load(&seed_dir(root, seed).join(format!("{method}.ckpt")))?;
            let (emb, logits) = model.infer(&lr_test)?;
            let k5 = 5.min(cfg.dataset.num_classes);
            let (thr, acc) = verify_pairs_sweep(&emb, &pairs)?;
            rows.push(EvalRow {
                seed,
                method: method.into(),
                top1_error: topk_error(&logits, lr_test.labels(), 1)?,
                top5_error: topk_error(&logits, lr_test.labels(), k5)?,
                verification_threshold: thr,
                verification_acc: acc,
            });
        }
    }
    write_rows(&rows, &root.join("eval.csv"))?;
    Ok(EvalOutcome { rows, mismatches })
}

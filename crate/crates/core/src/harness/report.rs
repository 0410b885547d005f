use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{
    mean_off_diagonal, mean_std, ranking_metrics, rar, sign_test, speedup, subset_overlap, SignTest,
};
use super::pipeline::{
    read_json, write_json, CellStatus, DownstreamArch, SelectionCell, SpaceSplit, StageMarker,
};
use super::HarnessError;
use crate::approximator::{ApproxTrainReport, ApproxVariant};
use crate::sampler::SubsetSelection;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineFingerprint {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub host: String,
}

impl MachineFingerprint {
    pub fn current() -> Self {
        let host = fs::read_to_string("/etc/hostname")
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            host,
        }
    }
}

/// Accuracy of a test architecture trained on every training row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullResult {
    pub arch_id: String,
    #[serde(flatten)]
    pub status: CellStatus,
    pub test_acc: Option<f64>,
    pub seconds: f64,
    pub grad_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub arch_id: String,
    pub b: usize,
    pub b_frac: f64,
    #[serde(flatten)]
    pub status: CellStatus,
    pub test_acc: Option<f64>,
    pub full_acc: Option<f64>,
    /// `1 - test_acc / full_acc` for this architecture.
    pub rar: Option<f64>,
    pub selection_seconds: f64,
    pub train_seconds: f64,
    pub selection_model_grad_evals: u64,
    pub selection_surrogate_grad_evals: u64,
    pub train_grad_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub b: usize,
    pub b_frac: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub rar_mean: Option<f64>,
    pub rar_std: Option<f64>,
    pub speedup: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub jaccard: Option<f64>,
    pub ranking_k: Option<usize>,
    /// Mean pairwise Jaccard of the subsets chosen for different architectures.
    pub overlap: Option<f64>,
    pub selection_seconds: f64,
    pub train_seconds: f64,
    pub selection_model_grad_evals: f64,
    pub selection_surrogate_grad_evals: f64,
}

/// One-off training costs that selection amortizes over test architectures.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub zoo_seconds: f64,
    pub encoder_seconds: f64,
    pub approximator_seconds: f64,
    pub inductive_seconds: f64,
    pub approximator_val_kl: Option<f64>,
    pub uniform_val_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub sampler: String,
    pub b: usize,
    pub b_frac: f64,
    pub rar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
    /// Best held-out KL per approximator variant.
    pub val_kl: BTreeMap<String, f64>,
    pub uniform_val_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub fingerprint: MachineFingerprint,
    /// Timed stages ran on different machines.
    pub mixed_machines: bool,
    pub n_train: usize,
    pub test_archs: Vec<String>,
    pub full: Vec<FullResult>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<MethodSummary>,
    pub overhead: Overhead,
    pub ablation: Option<AblationMatrix>,
}

impl RunReport {
    pub fn summary_for(&self, method: &str, b_frac: f64) -> Option<&MethodSummary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.b_frac == b_frac)
    }
}

#[derive(Deserialize)]
struct RunFile {
    seed: u64,
    config: ExperimentConfig,
}

fn marker(root: &Path, dir: &str) -> Result<StageMarker, HarnessError> {
    read_json(&root.join(dir).join("stage.json"))
}

fn best_kl(r: &ApproxTrainReport) -> Option<f64> {
    r.val_kl.iter().copied().reduce(f64::min)
}

fn report_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            report_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn seconds_of(path: &Path) -> Result<f64, HarnessError> {
    let v: serde_json::Value = read_json(path)?;
    Ok(v.get("seconds").and_then(|s| s.as_f64()).unwrap_or(0.0))
}

/// Builds the report of one seed from the files under `root`.
pub fn evaluate_run(root: &Path) -> Result<RunReport, HarnessError> {
    let run: RunFile = read_json(&root.join("run.json"))?;
    let config = run.config;
    let split: SpaceSplit = read_json(&root.join("space/splits.json"))?;
    let index: Vec<SelectionCell> = read_json(&root.join("selections/index.json"))?;
    let costs: BTreeMap<(&str, &str, usize), &SelectionCell> = index
        .iter()
        .map(|c| ((c.method.as_str(), c.arch_id.as_str(), c.b), c))
        .collect();
    let archs: Vec<DownstreamArch> = split
        .test_archs
        .iter()
        .map(|id| read_json(&root.join("downstream").join(format!("{id}.json"))))
        .collect::<Result<_, _>>()?;

    let full: Vec<FullResult> = archs
        .iter()
        .map(|a| FullResult {
            arch_id: a.arch_id.clone(),
            status: a.full.status.clone(),
            test_acc: a.full.test_acc,
            seconds: a.full.seconds,
            grad_evals: a.full.grad_evals,
        })
        .collect();
    let n_train = archs.first().map_or(0, |a| a.full.b);

    let mut cells = Vec::new();
    for a in &archs {
        let full_acc = a.full.test_acc.filter(|v| *v > 0.0);
        for d in &a.cells {
            let cost = costs.get(&(d.method.as_str(), a.arch_id.as_str(), d.b));
            let mut status = d.status.clone();
            let rar_cell = match (d.test_acc, full_acc) {
                (Some(acc), Some(f)) if status.is_ok() => Some(1.0 - acc / f),
                _ => None,
            };
            if status.is_ok() && rar_cell.is_none() {
                status = CellStatus::Failed {
                    reason: format!(
                        "full training of {} failed: {}",
                        a.arch_id,
                        a.full.status.reason()
                    ),
                };
            }
            cells.push(CellResult {
                method: d.method.clone(),
                arch_id: a.arch_id.clone(),
                b: d.b,
                b_frac: d.b_frac,
                status,
                test_acc: d.test_acc,
                full_acc,
                rar: rar_cell,
                selection_seconds: cost.map_or(0.0, |c| c.seconds),
                train_seconds: d.seconds,
                selection_model_grad_evals: cost.map_or(0, |c| c.model_grad_evals),
                selection_surrogate_grad_evals: cost.map_or(0, |c| c.surrogate_grad_evals),
                train_grad_evals: d.grad_evals,
            });
        }
    }

    let mut groups: Vec<(String, usize, f64)> = Vec::new();
    for c in &cells {
        if !groups.iter().any(|(m, b, _)| *m == c.method && *b == c.b) {
            groups.push((c.method.clone(), c.b, c.b_frac));
        }
    }
    let summary = groups
        .into_iter()
        .map(|(method, b, b_frac)| summarize(root, &cells, &full, &method, b, b_frac, config.ranking_k))
        .collect::<Result<Vec<_>, _>>()?;

    let sel_marker = marker(root, "selections")?;
    let down_marker = marker(root, "downstream")?;
    let mixed_machines = sel_marker.fingerprint != down_marker.fingerprint;

    let primary = config.approximator.variant;
    let approx_report = |v: ApproxVariant| -> Result<ApproxTrainReport, HarnessError> {
        let dir = if v == primary {
            root.join("approximator")
        } else {
            root.join("approximator/variants").join(v.name())
        };
        read_json(&dir.join("report.json"))
    };
    let primary_report = approx_report(primary)?;
    let mut inductive_reports = Vec::new();
    report_files(&root.join("inductive"), &mut inductive_reports)?;
    let overhead = Overhead {
        zoo_seconds: marker(root, "zoo")?.seconds,
        encoder_seconds: seconds_of(&root.join("encoder/report.json"))?,
        approximator_seconds: primary_report.seconds,
        inductive_seconds: inductive_reports
            .iter()
            .map(|p| seconds_of(p))
            .sum::<Result<f64, _>>()?,
        approximator_val_kl: best_kl(&primary_report),
        uniform_val_kl: Some(primary_report.uniform_val_kl),
    };

    let ablation = if config.ablation {
        let mut val_kl = BTreeMap::new();
        for v in ApproxVariant::ALL {
            if let Some(kl) = best_kl(&approx_report(v)?) {
                val_kl.insert(v.name().to_string(), kl);
            }
        }
        let cells = summary
            .iter()
            .filter_map(|s| {
                let rest = s.method.strip_prefix("ablation-")?;
                let (variant, sampler) = rest.split_once('-')?;
                Some(AblationCell {
                    variant: variant.into(),
                    sampler: sampler.into(),
                    b: s.b,
                    b_frac: s.b_frac,
                    rar: s.rar_mean,
                })
            })
            .collect();
        Some(AblationMatrix {
            cells,
            val_kl,
            uniform_val_kl: primary_report.uniform_val_kl,
        })
    } else {
        None
    };

    Ok(RunReport {
        seed: run.seed,
        config_digest: config.digest(),
        fingerprint: down_marker.fingerprint,
        mixed_machines,
        n_train,
        test_archs: split.test_archs,
        full,
        cells,
        summary,
        overhead,
        ablation,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(
    root: &Path,
    cells: &[CellResult],
    full: &[FullResult],
    method: &str,
    b: usize,
    b_frac: f64,
    ranking_k: usize,
) -> Result<MethodSummary, HarnessError> {
    let group: Vec<&CellResult> = cells.iter().filter(|c| c.method == method && c.b == b).collect();
    let ok: Vec<&CellResult> = group.iter().copied().filter(|c| c.status.is_ok()).collect();
    let sub_acc: BTreeMap<String, f64> = ok
        .iter()
        .map(|c| (c.arch_id.clone(), c.test_acc.unwrap_or(0.0)))
        .collect();
    let full_acc: BTreeMap<String, f64> = ok
        .iter()
        .map(|c| (c.arch_id.clone(), c.full_acc.unwrap_or(0.0)))
        .collect();
    let per_arch: Vec<f64> = ok.iter().filter_map(|c| c.rar).collect();
    let rar_mean = if ok.is_empty() {
        None
    } else {
        Some(rar(&sub_acc, &full_acc)?)
    };
    let t_full: Vec<f64> = full
        .iter()
        .filter(|f| f.status.is_ok())
        .map(|f| f.seconds)
        .collect();
    let sel_secs: Vec<f64> = ok.iter().map(|c| c.selection_seconds).collect();
    let train_secs: Vec<f64> = ok.iter().map(|c| c.train_seconds).collect();
    let speed = if ok.is_empty() || t_full.is_empty() {
        None
    } else {
        speedup(mean(&t_full), &sel_secs, &train_secs).ok()
    };
    let ranking = if ok.is_empty() {
        None
    } else {
        Some(ranking_metrics(&full_acc, &sub_acc, ranking_k.min(ok.len()))?)
    };
    let selections: Vec<SubsetSelection> = ok
        .iter()
        .map(|c| {
            let file = super::pipeline::selection_file(method, b, &c.arch_id);
            SubsetSelection::load(&root.join(file)).map_err(HarnessError::from)
        })
        .collect::<Result<_, _>>()?;
    let overlap = mean_off_diagonal(&subset_overlap(&selections)?);
    Ok(MethodSummary {
        method: method.to_string(),
        b,
        b_frac,
        n_ok: ok.len(),
        n_failed: group.len() - ok.len(),
        rar_mean,
        rar_std: mean_std(&per_arch).map(|(_, s)| s),
        speedup: speed,
        kendall_tau: ranking.map(|r| r.kendall_tau),
        jaccard: ranking.map(|r| r.jaccard),
        ranking_k: ranking.map(|r| r.k),
        overlap,
        selection_seconds: mean(&sel_secs),
        train_seconds: mean(&train_secs),
        selection_model_grad_evals: mean(
            &ok.iter()
                .map(|c| c.selection_model_grad_evals as f64)
                .collect::<Vec<_>>(),
        ),
        selection_surrogate_grad_evals: mean(
            &ok.iter()
                .map(|c| c.selection_surrogate_grad_evals as f64)
                .collect::<Vec<_>>(),
        ),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// Writes `report.json`, `cells.csv`, `summary.csv` and, when present,
/// `ablation.csv` into `dir`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;

    let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
    w.write_record([
        "seed",
        "method",
        "arch_id",
        "b",
        "b_frac",
        "status",
        "reason",
        "test_acc",
        "full_acc",
        "rar",
        "selection_seconds",
        "train_seconds",
        "selection_model_grad_evals",
        "selection_surrogate_grad_evals",
        "train_grad_evals",
    ])?;
    for f in &report.full {
        w.write_record([
            report.seed.to_string(),
            "full".into(),
            f.arch_id.clone(),
            report.n_train.to_string(),
            "1".into(),
            status_name(&f.status).into(),
            f.status.reason().into(),
            opt(f.test_acc),
            opt(f.test_acc),
            String::new(),
            "0".into(),
            f.seconds.to_string(),
            "0".into(),
            "0".into(),
            f.grad_evals.to_string(),
        ])?;
    }
    for c in &report.cells {
        w.write_record([
            report.seed.to_string(),
            c.method.clone(),
            c.arch_id.clone(),
            c.b.to_string(),
            c.b_frac.to_string(),
            status_name(&c.status).into(),
            c.status.reason().into(),
            opt(c.test_acc),
            opt(c.full_acc),
            opt(c.rar),
            c.selection_seconds.to_string(),
            c.train_seconds.to_string(),
            c.selection_model_grad_evals.to_string(),
            c.selection_surrogate_grad_evals.to_string(),
            c.train_grad_evals.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "seed",
        "method",
        "b",
        "b_frac",
        "n_ok",
        "n_failed",
        "rar_mean",
        "rar_std",
        "speedup",
        "kendall_tau",
        "jaccard",
        "overlap",
        "selection_seconds",
        "train_seconds",
        "selection_model_grad_evals",
        "selection_surrogate_grad_evals",
    ])?;
    for s in &report.summary {
        w.write_record([
            report.seed.to_string(),
            s.method.clone(),
            s.b.to_string(),
            s.b_frac.to_string(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            opt(s.rar_mean),
            opt(s.rar_std),
            opt(s.speedup),
            opt(s.kendall_tau),
            opt(s.jaccard),
            opt(s.overlap),
            s.selection_seconds.to_string(),
            s.train_seconds.to_string(),
            s.selection_model_grad_evals.to_string(),
            s.selection_surrogate_grad_evals.to_string(),
        ])?;
    }
    w.flush()?;

    if let Some(ab) = &report.ablation {
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        w.write_record([
            "variant",
            "sampler",
            "b",
            "b_frac",
            "rar",
            "val_kl",
            "uniform_val_kl",
        ])?;
        for c in &ab.cells {
            w.write_record([
                c.variant.clone(),
                c.sampler.clone(),
                c.b.to_string(),
                c.b_frac.to_string(),
                opt(c.rar),
                opt(ab.val_kl.get(&c.variant).copied()),
                ab.uniform_val_kl.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn status_name(s: &CellStatus) -> &'static str {
    if s.is_ok() {
        "ok"
    } else {
        "failed"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub b_frac: f64,
    pub n_seeds: usize,
    pub rar_mean: Option<f64>,
    pub rar_std: Option<f64>,
    pub speedup_mean: Option<f64>,
    pub kendall_tau_mean: Option<f64>,
    pub jaccard_mean: Option<f64>,
}

/// Paired comparison of a method's per-architecture RAR against random
/// selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub baseline: String,
    pub b_frac: f64,
    /// `architecture` when every seed shares the test architectures and
    /// RAR is averaged over seeds per architecture, else `seed-architecture`.
    pub pairing: String,
    pub n_pairs: usize,
    pub method_rar: f64,
    pub baseline_rar: f64,
    pub sign_test: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub config_digests: Vec<String>,
    pub mixed_machines: bool,
    pub rows: Vec<AggregateRow>,
    pub comparisons: Vec<Comparison>,
}

impl MultiSeedReport {
    pub fn comparison(&self, method: &str, b_frac: f64) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.method == method && c.b_frac == b_frac)
    }

    pub fn row(&self, method: &str, b_frac: f64) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.b_frac == b_frac)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.flatten().collect();
    match mean_std(&v) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    }
}

/// Per-architecture RAR of ok cells for one method and budget.
fn rar_by_arch(r: &RunReport, method: &str, b_frac: f64) -> BTreeMap<String, f64> {
    r.cells
        .iter()
        .filter(|c| c.method == method && c.b_frac == b_frac && c.status.is_ok())
        .filter_map(|c| Some((c.arch_id.clone(), c.rar?)))
        .collect()
}

/// Mean and spread over seeds, and sign tests of every method against
/// random selection.
pub fn aggregate_reports(reports: &[RunReport]) -> Result<MultiSeedReport, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::Metric("no runs to aggregate".into()));
    }
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in reports {
        for s in &r.summary {
            if !keys.iter().any(|(m, f)| *m == s.method && *f == s.b_frac) {
                keys.push((s.method.clone(), s.b_frac));
            }
        }
    }
    let rows = keys
        .iter()
        .map(|(method, b_frac)| {
            let found: Vec<&MethodSummary> = reports
                .iter()
                .filter_map(|r| r.summary_for(method, *b_frac))
                .collect();
            let (rar_mean, rar_std) = mean_of(found.iter().map(|s| s.rar_mean));
            AggregateRow {
                method: method.clone(),
                b_frac: *b_frac,
                n_seeds: found.len(),
                rar_mean,
                rar_std,
                speedup_mean: mean_of(found.iter().map(|s| s.speedup)).0,
                kendall_tau_mean: mean_of(found.iter().map(|s| s.kendall_tau)).0,
                jaccard_mean: mean_of(found.iter().map(|s| s.jaccard)).0,
            }
        })
        .collect();

    let shared: BTreeSet<&String> = reports[0].test_archs.iter().collect();
    let same_archs = reports
        .iter()
        .all(|r| r.test_archs.iter().collect::<BTreeSet<_>>() == shared);
    let mut comparisons = Vec::new();
    for (method, b_frac) in &keys {
        if method == "random" || method.starts_with("ablation-") {
            continue;
        }
        if !keys.iter().any(|(m, f)| m == "random" && f == b_frac) {
            continue;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        if same_archs {
            let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for r in reports {
                let m = rar_by_arch(r, method, *b_frac);
                let base = rar_by_arch(r, "random", *b_frac);
                for (arch, v) in &m {
                    if let Some(w) = base.get(arch) {
                        let e = acc.entry(arch.clone()).or_default();
                        e.0.push(*v);
                        e.1.push(*w);
                    }
                }
            }
            for (_, (x, y)) in acc {
                a.push(mean(&x));
                b.push(mean(&y));
            }
        } else {
            for r in reports {
                let m = rar_by_arch(r, method, *b_frac);
                let base = rar_by_arch(r, "random", *b_frac);
                for (arch, v) in &m {
                    if let Some(w) = base.get(arch) {
                        a.push(*v);
                        b.push(*w);
                    }
                }
            }
        }
        comparisons.push(Comparison {
            method: method.clone(),
            baseline: "random".into(),
            b_frac: *b_frac,
            pairing: if same_archs {
                "architecture"
            } else {
                "seed-architecture"
            }
            .into(),
            n_pairs: a.len(),
            method_rar: mean(&a),
            baseline_rar: mean(&b),
            sign_test: sign_test(&a, &b)?,
        });
    }
    let mixed_machines = reports.iter().any(|r| r.mixed_machines)
        || reports.iter().any(|r| r.fingerprint != reports[0].fingerprint);
    Ok(MultiSeedReport {
        seeds: reports.iter().map(|r| r.seed).collect(),
        config_digests: reports.iter().map(|r| r.config_digest.clone()).collect(),
        mixed_machines,
        rows,
        comparisons,
    })
}

/// Writes `summary.json`, `summary.csv` and `comparisons.csv` into `dir`.
pub fn write_aggregate(dir: &Path, agg: &MultiSeedReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("summary.json"), agg)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "method",
        "b_frac",
        "n_seeds",
        "rar_mean",
        "rar_std",
        "speedup_mean",
        "kendall_tau_mean",
        "jaccard_mean",
    ])?;
    for r in &agg.rows {
        w.write_record([
            r.method.clone(),
            r.b_frac.to_string(),
            r.n_seeds.to_string(),
            opt(r.rar_mean),
            opt(r.rar_std),
            opt(r.speedup_mean),
            opt(r.kendall_tau_mean),
            opt(r.jaccard_mean),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("comparisons.csv"))?;
    w.write_record([
        "method",
        "baseline",
        "b_frac",
        "pairing",
        "n_pairs",
        "method_rar",
        "baseline_rar",
        "wins",
        "losses",
        "ties",
        "p_value",
    ])?;
    for c in &agg.comparisons {
        w.write_record([
            c.method.clone(),
            c.baseline.clone(),
            c.b_frac.to_string(),
            c.pairing.clone(),
            c.n_pairs.to_string(),
            c.method_rar.to_string(),
            c.baseline_rar.to_string(),
            c.sign_test.wins.to_string(),
            c.sign_test.losses.to_string(),
            c.sign_test.ties.to_string(),
            c.sign_test.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Recomputes every report under `root` from its artifacts alone: the flat
/// run when `root/run.json` exists, otherwise each `seed-*` run plus the
/// aggregate.
pub fn regenerate_reports(root: &Path) -> Result<(Vec<RunReport>, Option<MultiSeedReport>), HarnessError> {
    if root.join("run.json").exists() {
        let r = evaluate_run(root)?;
        write_report(&root.join("report"), &r)?;
        return Ok((vec![r], None));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed-"))
                && p.join("run.json").exists()
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(HarnessError::Metric(format!(
            "no runs found under {}",
            root.display()
        )));
    }
    let mut reports = Vec::new();
    for d in &dirs {
        let r = evaluate_run(d)?;
        write_report(&d.join("report"), &r)?;
        reports.push(r);
    }
    reports.sort_by_key(|r| r.seed);
    let agg = aggregate_reports(&reports)?;
    write_aggregate(&root.join("report"), &agg)?;
    Ok((reports, Some(agg)))
}

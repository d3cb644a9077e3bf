//! Leave-one-domain-out sweeps, the results CSV, and static reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{default_domains, Dataset, DomainSpec, ImageSize};
use crate::error::{Error, Result};
use crate::metaloop::{evaluate, train, train_erm_baseline, TrainConfig, TrainOutput};
use crate::metrics::stable_mean;

/// Environment variable overriding the results root directory.
pub const RESULTS_ENV: &str = "SEMIDG_RESULTS";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_VERSION: &str = "# semidg-results v1";
pub const RESULTS_HEADER: [&str; 8] =
    ["run_id", "target_domain", "label_fraction", "method", "mean_dice", "mean_hausdorff", "dc", "seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    NoRank,
    NoCls,
    NoHsic,
    FirstOrder,
    Erm,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Full, Method::NoRank, Method::NoCls, Method::NoHsic, Method::FirstOrder, Method::Erm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoRank => "no_rank",
            Method::NoCls => "no_cls",
            Method::NoHsic => "no_hsic",
            Method::FirstOrder => "first_order",
            Method::Erm => "erm",
        }
    }

    /// The training configuration for this method: each ablation flips
    /// exactly one switch of `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::Full | Method::Erm => {}
            Method::NoRank => c.weights.rank = 0.0,
            Method::NoCls => c.weights.cls = 0.0,
            Method::NoHsic => c.weights.hsic = 0.0,
            Method::FirstOrder => c.second_order = false,
        }
        c
    }

    pub fn run(self, config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
        match self {
            Method::Erm => train_erm_baseline(config, dataset),
            _ => train(config, dataset),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub image_size: usize,
    /// Per-domain specs; `labeled_fraction` is overridden by each sweep value.
    pub domains: Vec<DomainSpec>,
    pub data_seed: u64,
    pub label_fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Held-out domains to sweep; empty means every domain.
    pub targets: Vec<usize>,
    /// Parallel runs (0 = available cores).
    pub workers: usize,
    pub save_checkpoints: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            domains: default_domains(40, 0.1),
            data_seed: 0,
            label_fractions: vec![0.02, 0.05, 0.2, 1.0],
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            targets: Vec::new(),
            workers: 0,
            save_checkpoints: true,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 4 {
            return Err(Error::InvalidConfig(format!(
                "leave-one-out meta-training needs >= 4 domains (3 sources + 1 target), got {}",
                self.domains.len()
            )));
        }
        for d in &self.domains {
            d.validate()?;
        }
        let ids: BTreeSet<usize> = self.domains.iter().map(|d| d.domain_id).collect();
        if ids.len() != self.domains.len() {
            return Err(Error::InvalidConfig("duplicate domain ids".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| !ids.contains(t)) {
            return Err(Error::InvalidConfig(format!("target domain {t} is not among the configured domains")));
        }
        if self.label_fractions.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("label_fractions, methods and seeds must be non-empty".into()));
        }
        if let Some(f) = self.label_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidConfig(format!("label fraction {f} outside [0, 1]")));
        }
        if self.train.model.image_size != ImageSize::square(self.image_size) {
            return Err(Error::InvalidConfig(format!(
                "train.model.image_size {:?} does not match image_size {}",
                self.train.model.image_size, self.image_size
            )));
        }
        self.train.validate()
    }

    pub fn target_domains(&self) -> Vec<usize> {
        if self.targets.is_empty() {
            self.domains.iter().map(|d| d.domain_id).collect()
        } else {
            self.targets.clone()
        }
    }

    pub fn dataset(&self, label_fraction: f64) -> Result<Dataset> {
        let specs = self.domains.iter().map(|d| DomainSpec { labeled_fraction: label_fraction, ..d.clone() }).collect();
        Dataset::generate(specs, ImageSize::square(self.image_size), self.data_seed)
    }

    /// Every run of the sweep, in canonical order.
    pub fn jobs(&self) -> Vec<RunKey> {
        let mut jobs = Vec::new();
        for &label_fraction in &self.label_fractions {
            for target_domain in self.target_domains() {
                for &method in &self.methods {
                    for &seed in &self.seeds {
                        jobs.push(RunKey { target_domain, label_fraction, method, seed });
                    }
                }
            }
        }
        jobs
    }

    /// The full training configuration of one run.
    pub fn run_config(&self, key: &RunKey) -> TrainConfig {
        let mut c = key.method.train_config(&self.train);
        c.seed = key.seed;
        c.target_domain = Some(key.target_domain);
        c
    }
}

/// Identity of one run in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub target_domain: usize,
    pub label_fraction: f64,
    pub method: Method,
    pub seed: u64,
}

impl RunKey {
    pub fn run_id(&self) -> String {
        format!("t{}-f{}-{}-s{}", self.target_domain, self.label_fraction, self.method, self.seed)
    }
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub target_domain: usize,
    pub label_fraction: f64,
    pub method: Method,
    pub mean_dice: f64,
    pub mean_hausdorff: f64,
    pub dc: f64,
    pub seed: u64,
}

pub fn results_root(default: &Path) -> PathBuf {
    std::env::var_os(RESULTS_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
}

/// Reads a results CSV, skipping the version line.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(BufReader::new(file));
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(RESULTS_HEADER) {
        return Err(Error::InvalidConfig(format!("{}: unexpected header {:?}", path.display(), headers)));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

fn row_line(row: &ResultRow) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(row)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn header_text() -> String {
    format!("{RESULTS_VERSION}\n{}\n", RESULTS_HEADER.join(","))
}

/// Appends rows to the results CSV, creating it (with version line and
/// header) when missing. An exclusive file lock serialises writers.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
    file.lock()?;
    if file.metadata()?.len() == 0 {
        file.write_all(header_text().as_bytes())?;
    }
    for row in rows {
        file.write_all(row_line(row)?.as_bytes())?;
    }
    file.flush()?;
    file.unlock()?;
    Ok(())
}

/// Rewrites the CSV with rows in `order` (by run id), keeping rows whose id is
/// not listed at the end in their existing order.
fn normalise_results(path: &Path, order: &[String]) -> Result<()> {
    let rows = read_results(path)?;
    let rank: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut indexed: Vec<(usize, usize, &ResultRow)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (rank.get(r.run_id.as_str()).copied().unwrap_or(usize::MAX), i, r))
        .collect();
    indexed.sort_by_key(|&(r, i, _)| (r, i));
    let mut text = header_text();
    for (_, _, row) in indexed {
        text.push_str(&row_line(row)?);
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteSummary {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl SuiteSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Trains and evaluates one run, writing its artifacts under `run_dir`.
pub fn execute_run(config: &ExperimentConfig, key: &RunKey, dataset: &Dataset, run_dir: &Path) -> Result<ResultRow> {
    let train_config = config.run_config(key);
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&train_config)?)?;
    let out = key.method.run(&train_config, dataset)?;
    out.history.write_jsonl(&run_dir.join("history.jsonl"))?;
    if config.save_checkpoints {
        out.checkpoint.save(&run_dir.join("model.ckpt"))?;
    }
    let report = evaluate(&out.checkpoint, dataset, key.target_domain)?;
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(ResultRow {
        run_id: key.run_id(),
        target_domain: key.target_domain,
        label_fraction: key.label_fraction,
        method: key.method,
        mean_dice: report.mean_dice(),
        mean_hausdorff: report.mean_hausdorff(),
        dc: report.dc,
        seed: key.seed,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every (target, fraction, method, seed) combination not already in
/// `<dir>/results.csv`. Failures are isolated per run and reported.
pub fn run_suite(config: &ExperimentConfig, dir: &Path) -> Result<SuiteSummary> {
    run_suite_with(config, dir, |_, _| {})
}

/// [`run_suite`] with a callback invoked after every finished run.
pub fn run_suite_with(
    config: &ExperimentConfig,
    dir: &Path,
    on_done: impl Fn(&RunKey, &std::result::Result<ResultRow, String>) + Sync,
) -> Result<SuiteSummary> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("experiment.toml"), toml::to_string(config).map_err(|e| Error::InvalidConfig(e.to_string()))?)?;
    let csv_path = dir.join(RESULTS_FILE);
    let done: BTreeSet<String> = if csv_path.exists() {
        read_results(&csv_path)?.into_iter().map(|r| r.run_id).collect()
    } else {
        BTreeSet::new()
    };
    let jobs = config.jobs();
    let mut summary = SuiteSummary::default();
    let pending: Vec<RunKey> = jobs
        .iter()
        .filter(|k| {
            let skip = done.contains(&k.run_id());
            if skip {
                summary.skipped.push(k.run_id());
            }
            !skip
        })
        .copied()
        .collect();

    let mut datasets = Vec::new();
    for &f in &config.label_fractions {
        if pending.iter().any(|k| k.label_fraction == f) {
            datasets.push((f, config.dataset(f)?));
        }
    }
    let dataset_for = |f: f64| &datasets.iter().find(|(g, _)| *g == f).expect("dataset generated").1;

    let workers = match config.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<(usize, std::result::Result<ResultRow, String>)>> = Mutex::new(Vec::new());
    let csv_lock = Mutex::new(());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(key) = pending.get(i) else { break };
                let run_dir = dir.join("runs").join(key.run_id());
                let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    execute_run(config, key, dataset_for(key.label_fraction), &run_dir)
                }))
                .map_err(panic_message)
                .and_then(|r| r.map_err(|e| e.to_string()));
                let result = match result {
                    Ok(row) => {
                        let _guard = csv_lock.lock().unwrap_or_else(|e| e.into_inner());
                        append_results(&csv_path, std::slice::from_ref(&row)).map(|_| row).map_err(|e| e.to_string())
                    }
                    Err(e) => Err(e),
                };
                on_done(key, &result);
                outcomes.lock().unwrap_or_else(|e| e.into_inner()).push((i, result));
            });
        }
    });

    let mut outcomes = outcomes.into_inner().unwrap_or_else(|e| e.into_inner());
    outcomes.sort_by_key(|(i, _)| *i);
    for (i, result) in outcomes {
        let id = pending[i].run_id();
        match result {
            Ok(_) => summary.completed.push(id),
            Err(e) => summary.failed.push((id, e)),
        }
    }
    if csv_path.exists() {
        normalise_results(&csv_path, &jobs.iter().map(RunKey::run_id).collect::<Vec<_>>())?;
    }
    Ok(summary)
}

// ---- report ----------------------------------------------------------------------

/// Sample mean and (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = stable_mean(values);
    if n == 1 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1) as f64).sqrt())
}

/// `mean_{std}` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}_{{{std:.2}}}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Dice,
    Hausdorff,
    Dc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Hausdorff, Metric::Dc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Hausdorff => "hausdorff",
            Metric::Dc => "dc",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Dice => "Dice (%)",
            Metric::Hausdorff => "Hausdorff (px)",
            Metric::Dc => "DC(Z; s,d)",
        }
    }

    pub fn of(self, row: &ResultRow) -> f64 {
        match self {
            Metric::Dice => row.mean_dice,
            Metric::Hausdorff => row.mean_hausdorff,
            Metric::Dc => row.dc,
        }
    }
}

/// One table cell: statistics over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Cell {
    fn from_values(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std, n: values.len() }
    }

    pub fn text(&self) -> String {
        if self.n == 0 {
            "-".into()
        } else {
            format_mean_std(self.mean, self.std)
        }
    }
}

/// Rows are held-out domains plus "Average"; columns are methods.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub label_fraction: f64,
    pub metric: Metric,
    pub methods: Vec<Method>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

impl Table {
    pub fn cell(&self, row: &str, method: Method) -> Option<&Cell> {
        let col = self.methods.iter().position(|&m| m == method)?;
        self.rows.iter().find(|(name, _)| name == row).map(|(_, cells)| &cells[col])
    }

    pub fn render(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("target".to_string())
            .chain(self.methods.iter().map(|m| m.name().to_string()))
            .collect()];
        for (name, cells) in &self.rows {
            grid.push(std::iter::once(name.clone()).chain(cells.iter().map(Cell::text)).collect());
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 || i + 2 == grid.len() {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// Builds one table per (label fraction, metric). Per-target cells aggregate
/// over seeds; the Average row takes, for each seed, the mean over targets,
/// so its mean equals the mean of the per-target means when every target has
/// the same seeds.
pub fn build_tables(rows: &[ResultRow]) -> Vec<Table> {
    let fractions: BTreeSet<u64> = rows.iter().map(|r| r.label_fraction.to_bits()).collect();
    let mut fractions: Vec<f64> = fractions.into_iter().map(f64::from_bits).collect();
    fractions.sort_by(f64::total_cmp);
    let methods: Vec<Method> =
        Method::ALL.into_iter().filter(|m| rows.iter().any(|r| r.method == *m)).collect();
    let targets: BTreeSet<usize> = rows.iter().map(|r| r.target_domain).collect();
    let mut tables = Vec::new();
    for &f in &fractions {
        for metric in Metric::ALL {
            let mut table_rows = Vec::new();
            for &t in &targets {
                let cells = methods
                    .iter()
                    .map(|&m| {
                        let v: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.label_fraction == f && r.target_domain == t && r.method == m)
                            .map(|r| metric.of(r))
                            .collect();
                        Cell::from_values(&v)
                    })
                    .collect();
                table_rows.push((format!("domain {t}"), cells));
            }
            let avg = methods
                .iter()
                .map(|&m| {
                    let sel: Vec<&ResultRow> =
                        rows.iter().filter(|r| r.label_fraction == f && r.method == m).collect();
                    let seeds: BTreeSet<u64> = sel.iter().map(|r| r.seed).collect();
                    let per_seed: Vec<f64> = seeds
                        .iter()
                        .map(|&s| {
                            let v: Vec<f64> = sel.iter().filter(|r| r.seed == s).map(|r| metric.of(r)).collect();
                            stable_mean(&v)
                        })
                        .collect();
                    let mut cell = Cell::from_values(&per_seed);
                    let per_target: Vec<f64> = targets
                        .iter()
                        .filter_map(|&t| {
                            let v: Vec<f64> = sel.iter().filter(|r| r.target_domain == t).map(|r| metric.of(r)).collect();
                            (!v.is_empty()).then(|| stable_mean(&v))
                        })
                        .collect();
                    if !per_target.is_empty() {
                        cell.mean = stable_mean(&per_target);
                    }
                    cell
                })
                .collect();
            table_rows.push(("Average".to_string(), avg));
            tables.push(Table { label_fraction: f, metric, methods: methods.clone(), rows: table_rows });
        }
    }
    tables
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub text: String,
    pub csv: String,
}

pub const SINGLE_SEED_NOTE: &str = "* std is reported as 0 where a cell has a single seed.";

/// Tables as aligned text and CSV; a pure function of the results rows.
pub fn make_report(rows: &[ResultRow]) -> Report {
    let tables = build_tables(rows);
    let mut text = String::new();
    let mut csv = String::from("label_fraction,metric,target,method,mean,std,n\n");
    let mut single_seed = false;
    for t in &tables {
        let _ = writeln!(text, "{} | label fraction {}", t.metric.title(), t.label_fraction);
        text.push_str(&t.render());
        text.push('\n');
        for (name, cells) in &t.rows {
            for (m, c) in t.methods.iter().zip(cells) {
                single_seed |= c.n == 1;
                let _ = writeln!(csv, "{},{},{},{},{},{},{}", t.label_fraction, t.metric.name(), name, m, c.mean, c.std, c.n);
            }
        }
    }
    if single_seed {
        text.push_str(SINGLE_SEED_NOTE);
        text.push('\n');
    }
    Report { tables, text, csv }
}

/// Writes `report.txt`, `report.csv` and the SVG plots into `out_dir`.
/// Loss curves are read from `<results_dir>/runs/*/history.jsonl` when present.
pub fn write_report(results_dir: &Path, out_dir: &Path) -> Result<Report> {
    let rows = read_results(&results_dir.join(RESULTS_FILE))?;
    let report = make_report(&rows);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), &report.text)?;
    fs::write(out_dir.join("report.csv"), &report.csv)?;
    fs::write(out_dir.join("dice_vs_label_fraction.svg"), dice_vs_fraction_plot(&rows))?;
    let curves = loss_curves(&results_dir.join("runs"), &rows)?;
    fs::write(out_dir.join("loss_curves.svg"), line_plot("Training loss", "step", "loss", &curves, false))?;
    Ok(report)
}

fn dice_vs_fraction_plot(rows: &[ResultRow]) -> String {
    let mut series = Vec::new();
    for m in Method::ALL {
        let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.method == m).collect();
        if sel.is_empty() {
            continue;
        }
        let fr: BTreeSet<u64> = sel.iter().map(|r| r.label_fraction.to_bits()).collect();
        let mut pts: Vec<(f64, f64)> = fr
            .into_iter()
            .map(f64::from_bits)
            .map(|f| {
                let v: Vec<f64> = sel.iter().filter(|r| r.label_fraction == f).map(|r| r.mean_dice).collect();
                (f, stable_mean(&v))
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push((m.name().to_string(), pts));
    }
    line_plot("Dice vs label fraction", "label fraction", "mean Dice (%)", &series, false)
}

/// Mean training total per step for each method, over the runs listed in `rows`.
/// A named polyline of `(x, y)` points.
type Series = (String, Vec<(f64, f64)>);

fn loss_curves(runs_dir: &Path, rows: &[ResultRow]) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    for m in Method::ALL {
        let mut sums: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for row in rows.iter().filter(|r| r.method == m) {
            let path = runs_dir.join(&row.run_id).join("history.jsonl");
            if !path.exists() {
                continue;
            }
            for line in BufReader::new(File::open(&path)?).lines() {
                let v: serde_json::Value = serde_json::from_str(&line?)?;
                if v["split"] == "meta_test" {
                    continue;
                }
                let (Some(step), Some(total)) = (v["step"].as_u64(), v["total"].as_f64()) else { continue };
                let step = step as usize;
                if sums.len() <= step {
                    sums.resize(step + 1, 0.0);
                    counts.resize(step + 1, 0);
                }
                sums[step] += total;
                counts[step] += 1;
            }
        }
        if sums.is_empty() {
            continue;
        }
        // Moving average over 1% of the run keeps the plot readable.
        let raw: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
        let win = (raw.len() / 100).max(1);
        let pts = (0..raw.len())
            .step_by(win)
            .map(|i| {
                let w: Vec<f64> = raw[i..(i + win).min(raw.len())].iter().copied().filter(|v| v.is_finite()).collect();
                (i as f64, if w.is_empty() { f64::NAN } else { w.iter().sum::<f64>() / w.len() as f64 })
            })
            .filter(|p| p.1.is_finite())
            .collect();
        series.push((m.name().to_string(), pts));
    }
    Ok(series)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

/// Minimal SVG line chart.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)], log_x: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 140.0, 40.0, 50.0);
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().map(|&(x, y)| (tx(x), y))).collect();
    let bound = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = pts.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bound(|p| p.0);
    let (y0, y1) = bound(|p| p.1);
    let px = |x: f64| ml + (tx(x) - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{ml},{mt} V{} H{}" fill="none" stroke="black"/>"#,
        h - mb,
        w - mr
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let xv = if log_x { 10f64.powf(fx) } else { fx };
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ml - 6.0, py(fy) + 4.0, tick(fy));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ml + (w - ml - mr) * i as f64 / 4.0, h - mb + 18.0, tick(xv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ml + (w - ml - mr) / 2.0, h - 10.0, xml_escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (h - mb + mt) / 2.0,
        (h - mb + mt) / 2.0,
        xml_escape(ylabel)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        }
        if p.len() <= 12 {
            for &(x, y) in p {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = mt + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 36.0, ly + 4.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

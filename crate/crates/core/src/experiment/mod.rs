//! Sweep manifests: expansion into runs, execution, tidy result tables, plots.

pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::EvalTaskSpec;
use crate::evaluation::{linear_probe, mean_std, ProbeConfig};
use crate::model::{Checkpoint, SpatialModel};
use crate::patching::PatchMode;
use crate::training::{checkpoint_path, pretrain, pretrain_data, RunConfig};
use crate::{Error, Result};

pub use plot::{line_plot_svg, PlotPoint, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Patches cropped and rescaled to full size.
    Rescaled,
    /// Patches pasted onto a zero canvas; evaluated with a single pass.
    Additive,
    /// Untrained encoder; the lower-bound baseline.
    RandomWeights,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Rescaled => "rescaled",
            Variant::Additive => "additive",
            Variant::RandomWeights => "random_weights",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub patch_size: Vec<usize>,
    pub n: Vec<usize>,
    pub n_patches: Vec<usize>,
    pub variant: Vec<Variant>,
}

/// A published number kept next to a manifest for comparison. Never used as
/// a pass/fail gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValue {
    pub label: String,
    /// Sweep-axis value the numbers belong to, when the manifest sweeps.
    #[serde(default)]
    pub x: Option<f64>,
    /// Per-seed accuracies.
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default)]
    pub mean: Option<f64>,
    #[serde(default)]
    pub std: Option<f64>,
}

impl ReferenceValue {
    /// Reported mean, else the mean of `values`.
    pub fn mean(&self) -> Option<f64> {
        self.mean.or_else(|| (!self.values.is_empty()).then(|| mean_std(&self.values).0))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentManifest {
    pub name: String,
    pub description: Option<String>,
    pub output_dir: Option<PathBuf>,
    /// Evaluation task name; defaults to the pretraining dataset.
    pub task: Option<String>,
    pub seeds: Vec<u64>,
    /// Run configuration shared by every point; `output_dir`, `seed` and the
    /// swept keys are filled in per point. No base means no points.
    pub base: Option<toml::Table>,
    pub probe: ProbeConfig,
    pub sweep: SweepAxes,
    #[serde(rename = "reference")]
    pub references: Vec<ReferenceValue>,
}

/// One cell of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    /// Directory name shared by points that differ only in evaluation.
    pub train_label: String,
    pub variant: Variant,
    pub run: RunConfig,
    pub probe: ProbeConfig,
    pub task: EvalTaskSpec,
}

impl SweepPoint {
    pub fn run_for_seed(&self, out: &Path, seed: u64) -> RunConfig {
        let mut run = self.run.clone();
        run.seed = seed;
        run.output_dir = out.join("runs").join(&self.train_label).join(format!("seed-{seed}"));
        run
    }
}

fn opt<T: Copy>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().copied().map(Some).collect()
    }
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)?;
        m.points(Path::new("."))?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() && self.base.is_some() {
            vec![0]
        } else {
            self.seeds.clone()
        }
    }

    /// Expands the sweep axes into concrete, validated points.
    pub fn points(&self, out: &Path) -> Result<Vec<SweepPoint>> {
        let Some(base) = &self.base else {
            return Ok(Vec::new());
        };
        let mut table = base.clone();
        table.insert("output_dir".into(), toml::Value::String(out.display().to_string()));
        let template: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[base]: {e}")))?;
        let task = match &self.task {
            Some(t) => EvalTaskSpec::named(t)?,
            None => EvalTaskSpec::same_domain(template.dataset),
        };
        if task.pretrain.0 != template.dataset {
            return Err(Error::Config(format!(
                "task {} pretrains on {}, base config uses {}",
                task.name, task.pretrain.0, template.dataset
            )));
        }
        let hash = self.hash();
        let mut points = Vec::new();
        for variant in opt(&self.sweep.variant) {
            for patch_size in opt(&self.sweep.patch_size) {
                for n in opt(&self.sweep.n) {
                    for n_patches in opt(&self.sweep.n_patches) {
                        let variant = variant.unwrap_or(Variant::Rescaled);
                        let mut run = template.clone();
                        run.manifest_hash = Some(hash.clone());
                        if let Some(s) = patch_size {
                            run.patch_size_px = Some(s);
                        }
                        if let Some(n) = n {
                            run.n = n;
                        }
                        let mut probe = self.probe.clone();
                        if let Some(np) = n_patches {
                            probe.n_patches = np;
                        }
                        match variant {
                            Variant::Rescaled => run.patch_mode = PatchMode::Rescaled,
                            Variant::Additive => {
                                run.patch_mode = PatchMode::Additive;
                                probe.n_patches = 0;
                            }
                            Variant::RandomWeights => {}
                        }
                        if probe.patch_size_px.is_none() {
                            probe.patch_size_px = Some(run.patch_size());
                        }
                        run.validate()?;

                        let mut parts = Vec::new();
                        if self.sweep.variant.len() > 1 || variant != Variant::Rescaled {
                            parts.push(variant.name().to_string());
                        }
                        if let Some(s) = patch_size {
                            parts.push(format!("s{s}"));
                        }
                        if let Some(n) = n {
                            parts.push(format!("n{n}"));
                        }
                        let train_label = if parts.is_empty() { "base".to_string() } else { parts.join("_") };
                        if let Some(np) = n_patches {
                            parts.push(format!("p{np}"));
                        }
                        let label = if parts.is_empty() { "base".to_string() } else { parts.join("_") };
                        points.push(SweepPoint {
                            label,
                            train_label,
                            variant,
                            run,
                            probe,
                            task: task.clone(),
                        });
                    }
                }
            }
        }
        Ok(points)
    }
}

/// One row of the tidy results table: one seed of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub manifest_hash: String,
    pub point: String,
    pub variant: Variant,
    pub patch_size: usize,
    pub n: usize,
    pub n_patches: usize,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "manifest_hash",
            "point",
            "variant",
            "patch_size",
            "n",
            "n_patches",
            "seed",
            "test_accuracy",
            "train_accuracy",
            "error",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Per-point aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub manifest_hash: String,
    pub point: String,
    pub variant: Variant,
    pub patch_size: usize,
    pub n: usize,
    pub n_patches: usize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub train_mean: Option<f64>,
}

/// Groups rows by (manifest hash, point), keeping first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.manifest_hash.clone(), r.point.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let test: Vec<f64> = g.iter().filter_map(|r| r.test_accuracy).collect();
            let train: Vec<f64> = g.iter().filter_map(|r| r.train_accuracy).collect();
            let some = |v: f64| (!test.is_empty()).then_some(v);
            let (mean, std) = mean_std(&test);
            SummaryRow {
                manifest_hash: key.0,
                point: key.1,
                variant: g[0].variant,
                patch_size: g[0].patch_size,
                n: g[0].n,
                n_patches: g[0].n_patches,
                seeds_ok: test.len(),
                seeds_failed: g.len() - test.len(),
                mean: some(mean),
                std: some(std),
                min: some(test.iter().copied().fold(f64::INFINITY, f64::min)),
                max: some(test.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                train_mean: (!train.is_empty()).then(|| mean_std(&train).0),
            }
        })
        .collect()
}

type Axis = (&'static str, fn(&SummaryRow) -> usize);

/// Axis that varies across `rows`, used as the plot's x axis.
fn x_axis(rows: &[SummaryRow]) -> Axis {
    let axes: [Axis; 3] = [
        ("Patch size in pixels", |r| r.patch_size),
        ("Patch number per base image", |r| r.n),
        ("Number of patches", |r| r.n_patches),
    ];
    for (name, f) in axes {
        let first = rows.first().map(f);
        if rows.iter().any(|r| Some(f(r)) != first) {
            return (name, f);
        }
    }
    axes[2]
}

/// Plot series per variant plus one dashed series per group of references.
pub fn plot_series(rows: &[SummaryRow], references: &[ReferenceValue]) -> (String, Vec<Series>) {
    let (x_name, x_of) = x_axis(rows);
    let mut by_variant: BTreeMap<Variant, Vec<PlotPoint>> = BTreeMap::new();
    for r in rows {
        if let (Some(min), Some(mean), Some(max)) = (r.min, r.mean, r.max) {
            by_variant.entry(r.variant).or_default().push(PlotPoint {
                x: x_of(r) as f64,
                min,
                mean,
                max,
            });
        }
    }
    let mut series: Vec<Series> = by_variant
        .into_iter()
        .map(|(v, points)| Series {
            label: v.name().to_string(),
            points,
            reference: false,
        })
        .collect();
    let mut refs: BTreeMap<&str, Vec<PlotPoint>> = BTreeMap::new();
    for r in references {
        let (Some(x), Some(mean)) = (r.x, r.mean()) else { continue };
        let (min, max) = if r.values.is_empty() {
            (mean, mean)
        } else {
            (
                r.values.iter().copied().fold(f64::INFINITY, f64::min),
                r.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        refs.entry(&r.label).or_default().push(PlotPoint { x, min, mean, max });
    }
    series.extend(refs.into_iter().map(|(label, points)| Series {
        label: label.to_string(),
        points,
        reference: true,
    }));
    (x_name.to_string(), series)
}

/// Written report artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub markdown: PathBuf,
    pub plot: PathBuf,
}

pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| point | variant | s | N | n | seeds | mean | std | min | max | train |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {}/{} | {} | {} | {} | {} | {} |\n",
            r.point,
            r.variant.name(),
            r.patch_size,
            r.n,
            r.n_patches,
            r.seeds_ok,
            r.seeds_ok + r.seeds_failed,
            f(r.mean),
            f(r.std),
            f(r.min),
            f(r.max),
            f(r.train_mean)
        ));
    }
    s
}

/// Reduces tidy rows into a summary CSV, a Markdown table and an SVG plot.
pub fn write_report(rows: &[ResultRow], references: &[ReferenceValue], title: &str, out: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary = summarize(rows);
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.manifest_hash.as_str()).collect();
    hashes.dedup();
    let tag = hashes.join(",");

    let summary_csv = out.join("summary.csv");
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", summary_csv.display()));
    let mut w = csv::Writer::from_path(&summary_csv).map_err(csv_err)?;
    for r in &summary {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&summary_csv, e))?;

    let markdown = out.join("report.md");
    let mut md = format!("# {title}\n\nmanifest_hash: {tag}\n\n");
    md.push_str(&markdown_table(&summary));
    if !references.is_empty() {
        md.push_str("\nReference values:\n\n| label | x | mean | std | values |\n|---|---|---|---|---|\n");
        for r in references {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.2}")).collect();
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.label,
                r.x.map_or("-".into(), |x| x.to_string()),
                r.mean().map_or("-".into(), |m| format!("{m:.2}")),
                r.std.map_or("-".into(), |s| format!("{s:.2}")),
                vals.join(", ")
            ));
        }
    }
    std::fs::write(&markdown, md).map_err(|e| Error::io(&markdown, e))?;

    let plot = out.join("plot.svg");
    let (x_name, series) = plot_series(&summary, references);
    std::fs::write(&plot, line_plot_svg(title, &x_name, "Acc. on linear eval", &series, &tag)).map_err(|e| Error::io(&plot, e))?;
    Ok(ReportFiles {
        summary_csv,
        markdown,
        plot,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the manifest's output directory.
    pub output_dir: Option<PathBuf>,
    /// Run only points whose label contains this string.
    pub only: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ManifestOutcome {
    pub rows: Vec<ResultRow>,
    pub results_csv: PathBuf,
    pub report: ReportFiles,
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    found.sort();
    found.pop()
}

/// Pretrains (or reuses a finished run with the same config hash) and returns
/// the final checkpoint.
pub fn pretrained_checkpoint(run: &RunConfig) -> Result<Checkpoint> {
    let done = checkpoint_path(&run.output_dir, run.epochs);
    let hash = run.hash();
    if let Ok(ck) = Checkpoint::load(&done) {
        if ck.run_config_hash == hash {
            return Ok(ck);
        }
    }
    let resume = latest_checkpoint(&run.output_dir).filter(|p| Checkpoint::load(p).is_ok_and(|c| c.run_config_hash == hash));
    if resume.is_none() {
        let _ = std::fs::remove_file(run.output_dir.join("train_log.jsonl"));
    }
    let out = pretrain(run, resume.as_deref())?;
    Checkpoint::load(&out.final_checkpoint)
}

/// Untrained encoder under the pretraining split's normalization.
pub fn random_weights_checkpoint(run: &RunConfig) -> Result<Checkpoint> {
    let (_, _, stats) = pretrain_data(run)?;
    let model = SpatialModel::new(run.encoder_config(), &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let mut ck = Checkpoint::capture(&model, None, run.patch_mode, stats, &run.hash(), 0, 0);
    ck.manifest_hash.clone_from(&run.manifest_hash);
    Ok(ck)
}

fn run_point(point: &SweepPoint, out: &Path, seed: u64) -> Result<(f64, f64)> {
    let run = point.run_for_seed(out, seed);
    let ck = match point.variant {
        Variant::RandomWeights => random_weights_checkpoint(&run)?,
        _ => pretrained_checkpoint(&run)?,
    };
    let probe = ProbeConfig {
        seed,
        ..point.probe.clone()
    };
    let o = linear_probe(&ck, &point.task, &run.data_root()?, &probe)?;
    Ok((o.test_accuracy, o.train_accuracy))
}

/// Pretrains and probes every point for every seed. Failures are recorded in
/// the table and the sweep continues.
pub fn run_manifest(manifest: &ExperimentManifest, options: &RunOptions) -> Result<ManifestOutcome> {
    let out = options
        .output_dir
        .clone()
        .or_else(|| manifest.output_dir.clone())
        .ok_or_else(|| Error::Config("manifest has no output_dir and none was given".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let hash = manifest.hash();
    let mut rows = Vec::new();
    for point in manifest.points(&out)? {
        if options.only.as_deref().is_some_and(|f| !point.label.contains(f)) {
            continue;
        }
        for seed in manifest.seeds() {
            log::info!("point {} seed {seed}", point.label);
            let (test, train, error) = match run_point(&point, &out, seed) {
                Ok((t, tr)) => (Some(t), Some(tr), None),
                Err(e) => {
                    log::error!("point {} seed {seed} failed: {e}", point.label);
                    (None, None, Some(e.to_string()))
                }
            };
            rows.push(ResultRow {
                manifest_hash: hash.clone(),
                point: point.label.clone(),
                variant: point.variant,
                patch_size: point.run.patch_size(),
                n: point.run.n,
                n_patches: point.probe.n_patches,
                seed,
                test_accuracy: test,
                train_accuracy: train,
                error,
            });
        }
    }
    let results_csv = out.join("results.csv");
    write_rows(&results_csv, &rows)?;
    let title = if manifest.name.is_empty() { "sweep" } else { &manifest.name };
    let report = write_report(&rows, &manifest.references, title, &out)?;
    Ok(ManifestOutcome {
        rows,
        results_csv,
        report,
    })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spatial_reasoning::aggregation::{aggregate, verify_pairs, BatchLayout};
use spatial_reasoning::datasets::{load_dataset, DatasetId, EvalTaskSpec, IngestOptions, SplitPart, DATA_ROOT_ENV};
use spatial_reasoning::evaluation::{linear_probe, seed_sweep, EvalResult, ProbeConfig, SeedResult};
use spatial_reasoning::experiment::{read_rows, run_manifest, write_report, ExperimentManifest, RunOptions};
use spatial_reasoning::model::Checkpoint;
use spatial_reasoning::patching::{default_patch_size, sample_patch_positions, ImageGeometry, DEFAULT_REJECTION_ATTEMPTS};
use spatial_reasoning::representation::{EmbeddingFile, Representer};
use spatial_reasoning::training::{pretrain, RunConfig};
use spatial_reasoning::{Error, Result};

#[derive(Parser)]
#[command(name = "spatial", version, about = "Spatial reasoning pretraining and linear evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder from a run config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint; the config must hash identically.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen features over one or more seeds.
    LinearEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 9)]
        n_patches: usize,
        #[arg(long)]
        affine: bool,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: u64,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        train_limit: Option<usize>,
        #[arg(long)]
        test_limit: Option<usize>,
        /// Write the result as JSON here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Append a CSV row here, writing the header for a new file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write composite representations of one split.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 9)]
        n_patches: usize,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the pair-count formula with brute-force enumeration.
    VerifyPairs {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
    },
    /// Dump the aggregated pair table of one synthetic batch as CSV.
    DumpPairs {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        image_side: usize,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every point of a sweep manifest.
    RunManifest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Only points whose label contains this string.
        #[arg(long)]
        only: Option<String>,
    },
    /// Summarize tidy result CSVs into a table and plot.
    Report {
        #[arg(long = "results", required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Manifest whose reference values are added to the report.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Load a dataset, verify checksums and write the ingestion manifest.
    Ingest {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// JSON map of relative path to expected SHA-256.
        #[arg(long)]
        checksums: Option<PathBuf>,
        #[arg(long)]
        continue_on_mismatch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
    Validation,
    Unlabeled,
}

impl From<Split> for SplitPart {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitPart::Train,
            Split::Test => SplitPart::Test,
            Split::Validation => SplitPart::Validation,
            Split::Unlabeled => SplitPart::Unlabeled,
        }
    }
}

fn data_root(arg: Option<PathBuf>) -> Result<PathBuf> {
    arg.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("pass --data-root or set {DATA_ROOT_ENV}")))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let out = pretrain(&cfg, resume.as_deref())?;
            if let Some(last) = out.log.last() {
                println!("epoch {} step {} l_total {:.6}", last.epoch, last.step, last.l_total);
            }
            println!("{}", out.final_checkpoint.display());
        }
        Command::LinearEval {
            checkpoint,
            task,
            n_patches,
            affine,
            seeds,
            data_root: root,
            epochs,
            patch_size,
            train_limit,
            test_limit,
            json,
            csv,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let task = EvalTaskSpec::named(&task)?;
            let root = data_root(root)?;
            let base = ProbeConfig {
                n_patches,
                patch_size_px: patch_size,
                epochs,
                affine_augment: affine,
                train_limit,
                test_limit,
                ..ProbeConfig::default()
            };
            let probe = |seed| linear_probe(&ck, &task, &root, &ProbeConfig { seed, ..base.clone() });
            let result = if seeds.len() >= 2 {
                seed_sweep(&seeds, probe)?
            } else {
                let seed = seeds.first().copied().unwrap_or(0);
                let o = probe(seed)?;
                EvalResult::from_seeds(
                    vec![SeedResult {
                        seed,
                        test_accuracy: o.test_accuracy,
                        train_accuracy: o.train_accuracy,
                    }],
                    Vec::new(),
                )
            };
            write_or_print(json.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&result)?))?;
            if let Some(p) = csv {
                use std::io::Write;
                let fresh = !p.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::Io { path: p.clone(), source: e })?;
                let mut text = String::new();
                if fresh {
                    text.push_str(&format!("task,n_patches,affine,{}\n", EvalResult::CSV_HEADER));
                }
                text.push_str(&format!("{},{n_patches},{affine},{}\n", task.name, result.csv_row()));
                f.write_all(text.as_bytes()).map_err(|e| Error::Io { path: p, source: e })?;
            }
            if result.incomplete {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Embed {
            checkpoint,
            dataset,
            split,
            n_patches,
            patch_size,
            seed,
            limit,
            data_root: root,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(dataset, &data_root(root)?, &IngestOptions::default())?;
            let source = data.split(split.into())?;
            let count = limit.map_or(source.len(), |l| l.min(source.len()));
            let images = (0..count)
                .map(|i| source.record(i).map(|r| r.to_image()))
                .collect::<Result<Vec<_>>>()?;
            let mut rep = Representer::from_checkpoint(&ck)?;
            let s = patch_size.unwrap_or_else(|| default_patch_size(dataset.image_side()));
            let rows = rep.features(&images, s, n_patches, seed)?;
            let file = EmbeddingFile {
                feature_dim: rep.feature_dim() as u32,
                n_patches: if rows.is_empty() { n_patches as u32 } else { (rows[0].len() / rep.feature_dim() - 1) as u32 },
                rows,
            };
            file.save(&out)?;
            println!("{} rows of width {} -> {}", file.rows.len(), file.width(), out.display());
        }
        Command::VerifyPairs { m, k, n } => {
            let v = verify_pairs(m, k, n)?;
            println!(
                "M={m} K={k} N={n}: formula {} enumerated {} emitted {} (patch pairs {} enumerated, {} emitted) sets_match={}",
                v.formula, v.enumerated, v.emitted, v.enumerated_patch, v.emitted_patch, v.sets_match
            );
            if !v.ok() {
                eprintln!("pair count mismatch");
                return Ok(ExitCode::from(2));
            }
        }
        Command::DumpPairs {
            m,
            k,
            n,
            image_side,
            patch_size,
            seed,
            out,
        } => {
            let g = ImageGeometry::square(image_side);
            let s = patch_size.unwrap_or_else(|| default_patch_size(image_side));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patches = (0..m)
                .map(|i| {
                    if n == 0 {
                        Ok(Vec::new())
                    } else {
                        sample_patch_positions(g, n, s, i, DEFAULT_REJECTION_ATTEMPTS, &mut rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = aggregate(&BatchLayout::new(m, k, &patches)?)?;
            write_or_print(out.as_deref(), &batch.to_csv())?;
        }
        Command::RunManifest { manifest, output, only } => {
            let m = ExperimentManifest::load(&manifest)?;
            let out = run_manifest(&m, &RunOptions { output_dir: output, only })?;
            let failed = out.rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} rows ({failed} failed) -> {}\n{}",
                out.rows.len(),
                out.results_csv.display(),
                out.report.markdown.display()
            );
        }
        Command::Report { results, out, manifest } => {
            let mut rows = Vec::new();
            for p in &results {
                rows.extend(read_rows(p)?);
            }
            let (refs, title) = match manifest {
                Some(p) => {
                    let m = ExperimentManifest::load(&p)?;
                    (m.references, m.name)
                }
                None => (Vec::new(), "report".to_string()),
            };
            let files = write_report(&rows, &refs, &title, &out)?;
            print!("{}", std::fs::read_to_string(&files.markdown).map_err(|e| Error::Io { path: files.markdown, source: e })?);
        }
        Command::Ingest {
            dataset,
            data_root: root,
            checksums,
            continue_on_mismatch,
            out,
        } => {
            let mut options = IngestOptions {
                continue_on_checksum_mismatch: continue_on_mismatch,
                ..IngestOptions::default()
            };
            if let Some(p) = checksums {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?;
                options.expected_checksums = serde_json::from_str(&text)?;
            }
            let data = load_dataset(dataset, &data_root(root)?, &options)?;
            write_or_print(out.as_deref(), &format!("{}\n", data.manifest.to_json()?))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

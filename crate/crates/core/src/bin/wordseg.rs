use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wordseg_core::corpusio::{read_alignments, read_boundary_file, read_class_file, read_speakers};
use wordseg_core::evalmetrics::{cluster_report, format_cluster_report, NedMode};
use wordseg_core::pipeline::{
    cluster_segmentations, run_eskmeans_plus, run_eval, segment_corpus, with_workers,
    CandidateSource, Corpus, PipelineConfig,
};
use wordseg_core::synthcorpus::{generate, SynthSpec};
use wordseg_core::{CorpusManifest, Error, Result, Tier};

#[derive(Parser)]
#[command(name = "wordseg", version, about = "Unsupervised word segmentation and lexicon discovery")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lexicon_manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        utterances: usize,
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        distractor_rate: f64,
        #[arg(long, num_args = 2, default_values_t = [8, 8])]
        frames_per_word: Vec<usize>,
        #[arg(long, num_args = 2, default_values_t = [3, 6])]
        words_per_utterance: Vec<usize>,
        #[arg(long)]
        no_adjacent_repeats: bool,
    },
    /// Prominence segmentation; with --cluster, the full bottom-up system.
    Promseg {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        cluster: bool,
    },
    /// Cluster the segments of a boundary file into a lexicon.
    Cluster {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        boundaries: PathBuf,
    },
    /// ES-KMeans+ segmentation and clustering.
    Eskmeans {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_parser = parse_source)]
        candidates: Option<CandidateSource>,
        #[arg(long)]
        candidate_file: Option<PathBuf>,
    },
    /// Score boundaries (and a class file) against the manifest alignments.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        boundaries: PathBuf,
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        tolerance_ms: f64,
        #[arg(long, default_value = "word")]
        tier: Tier,
        #[arg(long)]
        per_cluster_ned: bool,
        /// Append the JSON line to this file as well.
        #[arg(long)]
        append_to: Option<PathBuf>,
    },
    /// Content of the largest clusters.
    Report {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        speakers: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

fn parse_source(s: &str) -> std::result::Result<CandidateSource, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        format!("unknown candidate source {s:?}; expected prominence, file, alignment, max-recall-prominence or union")
    })
}

fn apply(cfg: &mut PipelineConfig, args: &CorpusArgs) {
    if let Some(m) = &args.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(m) = &args.lexicon_manifest {
        cfg.lexicon_manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match cli.command {
        Command::Synth {
            out,
            vocab,
            dim,
            utterances,
            sigma,
            distractor_rate,
            frames_per_word,
            words_per_utterance,
            no_adjacent_repeats,
        } => {
            let spec = SynthSpec {
                vocab_size: vocab,
                dim,
                frames_per_word: (frames_per_word[0], frames_per_word[1]),
                words_per_utterance: (words_per_utterance[0], words_per_utterance[1]),
                n_utterances: utterances,
                noise_sigma: sigma,
                distractor_rate,
                allow_adjacent_repeats: !no_adjacent_repeats,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            let manifest = with_workers(cfg.workers, || generate(&spec)?.write_to_dir(&out))??;
            println!("{}", manifest.display());
        }
        Command::Promseg { corpus, cluster } => {
            apply(&mut cfg, &corpus);
            cfg.validate()?;
            with_workers(cfg.workers, || -> Result<()> {
                let corpus = Corpus::load(&cfg)?;
                let segs = segment_corpus(&cfg, &corpus, &cfg.promseg)?;
                if cluster {
                    cluster_segmentations(&cfg, &corpus, segs)?.write(&cfg.output_dir)
                } else {
                    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
                        path: cfg.output_dir.clone(),
                        source: e,
                    })?;
                    wordseg_core::corpusio::write_boundary_file(&segs, cfg.output_dir.join("boundaries.txt"))
                }
            })??;
        }
        Command::Cluster { corpus, boundaries } => {
            apply(&mut cfg, &corpus);
            cfg.validate()?;
            with_workers(cfg.workers, || -> Result<()> {
                let corpus = Corpus::load(&cfg)?;
                let segs = read_boundary_file(&boundaries)?;
                cluster_segmentations(&cfg, &corpus, segs)?.write(&cfg.output_dir)
            })??;
        }
        Command::Eskmeans { corpus, candidates, candidate_file } => {
            apply(&mut cfg, &corpus);
            if let Some(s) = candidates {
                cfg.candidates.source = s;
            }
            if let Some(f) = candidate_file {
                cfg.candidates.file = Some(f);
            }
            cfg.validate()?;
            with_workers(cfg.workers, || -> Result<()> {
                let corpus = Corpus::load(&cfg)?;
                let out = run_eskmeans_plus(&cfg, &corpus)?;
                for r in &out.log {
                    println!("{}", r.log_line());
                }
                out.write(&cfg.output_dir)
            })??;
        }
        Command::Eval {
            manifest,
            boundaries,
            classes,
            tolerance_ms,
            tier,
            per_cluster_ned,
            append_to,
        } => {
            if let Some(m) = manifest {
                cfg.manifest = m;
            }
            cfg.eval.tolerance_s = tolerance_ms / 1000.0;
            cfg.eval.tier = tier;
            if per_cluster_ned {
                cfg.eval.ned_mode = NedMode::PerCluster;
            }
            let report = with_workers(cfg.workers, || run_eval(&cfg, &boundaries, classes.as_deref()))??;
            let line = report.to_json_line()?;
            println!("{line}");
            if let Some(path) = append_to {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::Io { path: path.clone(), source: e })?;
                writeln!(f, "{line}").map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Report { manifest, classes, speakers, top } => {
            if let Some(m) = manifest {
                cfg.manifest = m;
            }
            let manifest = CorpusManifest::read(&cfg.manifest)?;
            let words_path = manifest
                .alignments
                .get(&Tier::Word)
                .ok_or_else(|| Error::Manifest("manifest declares no word alignment".into()))?;
            let words = read_alignments(words_path, Tier::Word)?;
            let classes = read_class_file(&classes, Some(&manifest))?;
            let speakers = speakers.map(read_speakers).transpose()?;
            let report = cluster_report(&classes, &words, speakers.as_ref(), top);
            print!("{}", format_cluster_report(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

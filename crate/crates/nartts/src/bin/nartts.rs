use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nartts::config::{NetworkKind, RunConfig};
use nartts::durations::write_durations;
use nartts::error::{Error, Result};
use nartts::features::write_features;
use nartts::manifest::read_manifest;
use nartts::pipeline;
use nartts_core::corpus::CorpusSpec;
use nartts_core::decoder::DecoderMode;
use nartts_core::frames::AcousticFrames;
use nartts_core::gradsuite::Suite;
use nartts_core::graph::DIFFERENTIABLE_OPS;

#[derive(Parser)]
#[command(name = "nartts", version, about = "Non-autoregressive acoustic model toolkit")]
struct Cli {
    /// Seed for corpus generation, initialisation, batching and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for duration extraction.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with ground-truth durations.
    GenCorpus(GenCorpus),
    /// Train the attention-based duration extractor.
    TrainExtractor(TrainExtractor),
    /// Extract per-token durations with a trained extractor.
    ExtractDurations(ExtractDurations),
    /// Train the acoustic model from durations.
    Train(Train),
    /// Synthesise features for a token sequence.
    Synth(Synth),
    /// Finite-difference gradient suites.
    Gradcheck(Gradcheck),
    /// Time non-autoregressive against autoregressive decoding.
    BenchDecoder(BenchDecoder),
}

#[derive(Args)]
struct GenCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    utts: Option<usize>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainExtractor {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Step cap; training stops earlier once the loss plateaus.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Alignment diagnostics log (`step, entropy, monotonic rate`).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    diag_every: usize,
}

#[derive(Args)]
struct ExtractDurations {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Duration file to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory for one alignment CSV per utterance.
    #[arg(long)]
    alignments: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    /// Ground-truth or extracted duration file.
    #[arg(long)]
    durations: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Plain stacked encoder blocks: no dense bypasses and no fine fusion.
    #[arg(long)]
    no_fusion: bool,
    /// Feed the previous frame back into the decoder.
    #[arg(long)]
    autoregressive: bool,
}

#[derive(Args)]
struct Synth {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Space-separated token ids.
    #[arg(long, conflicts_with = "id")]
    tokens: Option<String>,
    /// Utterance id looked up in --manifest.
    #[arg(long, requires = "manifest")]
    id: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feature file to write (post-postnet frames).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// all, encoder, duration, attention, decoder or postnet.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Corrupt one operation's backward rule (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct BenchDecoder {
    #[arg(long, default_value_t = 512)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    repeat: usize,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        pipeline::apply_seed(&mut run, seed);
    }
    run.validate()?;
    Ok(run)
}

fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Usage(format!("bad token id `{t}`"))))
        .collect()
}

fn write_dir_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
}

fn gen_corpus(run: RunConfig, a: GenCorpus) -> Result<()> {
    let d = run.corpus;
    let spec = CorpusSpec {
        vocab_size: a.vocab.unwrap_or(d.vocab_size),
        n_utterances: a.utts.unwrap_or(d.n_utterances),
        min_tokens: a.min_tokens.unwrap_or(d.min_tokens),
        max_tokens: a.max_tokens.unwrap_or(d.max_tokens),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        seed: d.seed,
    };
    spec.validate()?;
    let data = pipeline::gen_corpus(&spec, &a.out)?;
    let frames: usize = data.iter().map(|u| u.frames.len()).sum();
    println!("utterances={} frames={frames} out={}", data.len(), a.out.display());
    Ok(())
}

fn train_extractor(mut run: RunConfig, a: TrainExtractor) -> Result<()> {
    if let Some(s) = a.steps {
        run.extractor_train.max_steps = s;
    }
    run.validate()?;
    let data = pipeline::load_corpus(&a.manifest, None, run.extractor.encoder.vocab_size)?;
    let r = pipeline::train_extractor(&run, &data, a.log.as_deref(), a.diagnostics.as_deref(), a.diag_every)?;
    pipeline::save(&a.out, &run, NetworkKind::Extractor, &r.params)?;
    let first = r.records.first().map_or(f64::NAN, |x| x.total);
    let last = r.records.last().map_or(f64::NAN, |x| x.total);
    let stats = pipeline::alignment_stats(&r.extractor, &r.params, &data)?;
    println!(
        "steps={} plateau={} first_loss={first} final_loss={last} entropy={} monotonic={}",
        r.records.len(),
        r.plateau_step.is_some(),
        stats.mean_entropy,
        stats.monotonic
    );
    Ok(())
}

fn extract_durations(jobs: usize, a: ExtractDurations) -> Result<()> {
    let (ckpt_run, ex, params) = pipeline::load_extractor(&a.checkpoint)?;
    let data = pipeline::load_corpus(&a.manifest, None, ckpt_run.extractor.encoder.vocab_size)?;
    let aligned = pipeline::extract_all(&ex, &params, &data, jobs)?;
    if let Some(dir) = &a.alignments {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (id, m) in &aligned {
            write_dir_file(dir, &format!("{id}.csv"), &pipeline::alignment_csv(m))?;
        }
    }
    let entries: Vec<(String, Vec<usize>)> = aligned.iter().map(|(id, m)| (id.clone(), m.durations())).collect();
    write_durations(&a.out, &entries)?;
    let mono = aligned.iter().map(|(_, m)| m.monotonic_fraction()).sum::<f64>() / aligned.len() as f64;
    println!("utterances={} monotonic={mono} out={}", entries.len(), a.out.display());
    Ok(())
}

fn train(mut run: RunConfig, a: Train) -> Result<()> {
    let Some(durations) = a.durations else {
        return Err(Error::Usage(
            "train needs --durations: use the durations.txt written by gen-corpus, \
             or run extract-durations with a trained extractor first"
                .into(),
        ));
    };
    if let Some(s) = a.steps {
        run.train.max_steps = s;
    }
    if let Some(lr) = a.lr {
        run.train.lr = lr;
    }
    if let Some(b) = a.batch {
        run.train.batch_size = b;
    }
    if a.no_fusion {
        run.model.encoder = run.model.encoder.with_fusion_enabled(false);
    }
    if a.autoregressive {
        run.model.decoder.mode = DecoderMode::Autoregressive;
    }
    run.validate()?;
    let data = pipeline::load_corpus(&a.manifest, Some(&durations), run.model.encoder.vocab_size)?;
    let r = pipeline::train_main(&run, &data, a.log.as_deref())?;
    pipeline::save(&a.out, &run, NetworkKind::Model, &r.params)?;
    let m = r.metrics;
    println!(
        "steps={} final_loss={} l1_before={} l1_after={} dur_l1={} dur_mae={} length_error={}",
        r.records.len(),
        r.records.last().map_or(f64::NAN, |x| x.total),
        m.l1_before,
        m.l1_after,
        m.dur_l1,
        m.dur_mae,
        m.length_error
    );
    Ok(())
}

fn synth(a: Synth) -> Result<()> {
    let (_, model, params) = pipeline::load_model(&a.checkpoint)?;
    let tokens = match (a.tokens, a.id, a.manifest) {
        (Some(t), _, _) => parse_tokens(&t)?,
        (None, Some(id), Some(m)) => read_manifest(&m)?
            .into_iter()
            .find(|e| e.id == id)
            .map(|e| e.tokens)
            .ok_or_else(|| Error::Usage(format!("no utterance `{id}` in {}", m.display())))?,
        _ => return Err(Error::Usage("synth needs --tokens or --id with --manifest".into())),
    };
    let s = pipeline::synthesize(&model, &params, &tokens)?;
    write_features(&a.out, &AcousticFrames::new(s.after)?)?;
    let durs: Vec<String> = s.durations.frames.iter().map(usize::to_string).collect();
    println!(
        "frames={} durations={} out={}",
        s.durations.total(),
        durs.join(","),
        a.out.display()
    );
    Ok(())
}

fn gradcheck(run: RunConfig, a: Gradcheck) -> Result<()> {
    let suites: Vec<Suite> = if a.module == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::from_name(&a.module).ok_or_else(|| Error::Usage(format!("unknown module `{}`", a.module)))?]
    };
    if !(a.tol > 0.0) {
        return Err(Error::Usage(format!("--tol must be positive, got {}", a.tol)));
    }
    let corrupt = match &a.corrupt {
        None => None,
        Some(op) => Some(
            *DIFFERENTIABLE_OPS
                .iter()
                .find(|&&o| o == op)
                .ok_or_else(|| Error::Usage(format!("unknown operation `{op}`")))?,
        ),
    };
    let reports = pipeline::gradcheck(&suites, corrupt, run.train.seed)?;
    let mut worst = 0.0f64;
    for r in &reports {
        for e in &r.entries {
            println!(
                "group={}/{} elements={} max_rel_err={:e}",
                r.suite.name(),
                e.name,
                e.elements,
                e.max_rel_err
            );
            worst = worst.max(e.max_rel_err);
        }
    }
    let pass = worst <= a.tol;
    println!("worst={worst:e} tol={:e} pass={pass}", a.tol);
    if pass {
        Ok(())
    } else {
        Err(nartts_core::Error::Numeric(format!("gradient check exceeded tolerance: {worst:e} > {:e}", a.tol)).into())
    }
}

fn bench_decoder(run: RunConfig, a: BenchDecoder) -> Result<()> {
    let b = pipeline::bench_decoder(&run, a.frames, a.repeat)?;
    println!(
        "frames={} repeat={} nar_shape={}x{} ar_shape={}x{} nar_mean_s={} ar_mean_s={} ratio={}",
        b.frames,
        b.repeat,
        b.nar_shape.0,
        b.nar_shape.1,
        b.ar_shape.0,
        b.ar_shape.1,
        b.nar_seconds,
        b.ar_seconds,
        b.ratio()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let run = run_config(&cli)?;
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(run, a),
        Command::TrainExtractor(a) => train_extractor(run, a),
        Command::ExtractDurations(a) => extract_durations(cli.jobs, a),
        Command::Train(a) => train(run, a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(run, a),
        Command::BenchDecoder(a) => bench_decoder(run, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

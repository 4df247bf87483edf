//! End-to-end stages shared by the command-line tool and the tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nartts_core::corpus::{generate_toy_corpus, CorpusSpec, Utterance};
use nartts_core::decoder::{Decoder, DecoderMode};
use nartts_core::duration::DurationSeq;
use nartts_core::encoder::TokenSequence;
use nartts_core::extractor::{AlignmentMatrix, DurationExtractor};
use nartts_core::gradcheck::DEFAULT_STEP;
use nartts_core::gradsuite::{run_suite, Suite, SuiteReport};
use nartts_core::model::{AcousticModel, Synthesis};
use nartts_core::train::{evaluate, EvalMetrics, PlateauDetector, TrainRecord, Trainer};
use nartts_core::{Graph, ParamBuilder, ParamStore, RngStream, StreamKind, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{NetworkKind, RunConfig};
use crate::durations::{read_durations, write_durations, DurationEntry};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features};
use crate::log::LineLog;
use crate::manifest::{read_manifest, write_manifest, ManifestEntry};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DURATIONS_FILE: &str = "durations.txt";
pub const FEATURES_DIR: &str = "feats";

/// Sets every seed in the configuration.
pub fn apply_seed(run: &mut RunConfig, seed: u64) {
    run.corpus.seed = seed;
    run.train.seed = seed;
    run.extractor_train.seed = seed;
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `feats/<id>.feat`, `durations.txt` and `manifest.tsv` under `out`.
pub fn gen_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let data = generate_toy_corpus(spec)?;
    create_dir(&out.join(FEATURES_DIR))?;
    let mut manifest = Vec::with_capacity(data.len());
    let mut durs = Vec::with_capacity(data.len());
    for u in &data {
        let rel = PathBuf::from(FEATURES_DIR).join(format!("{}.feat", u.id));
        write_features(&out.join(&rel), &u.frames)?;
        manifest.push(ManifestEntry {
            id: u.id.clone(),
            tokens: u.tokens.ids().to_vec(),
            features: rel,
        });
        if let Some(d) = &u.durations {
            durs.push((u.id.clone(), d.frames.clone()));
        }
    }
    write_durations(&out.join(DURATIONS_FILE), &durs)?;
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(data)
}

/// Reads a manifest and its feature files, attaching durations when a
/// duration file is given. Every utterance must then have an entry whose
/// frames sum to its feature length.
pub fn load_corpus(manifest: &Path, durations: Option<&Path>, vocab_size: usize) -> Result<Vec<Utterance>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Usage(format!(
            "{}: manifest lists no utterances",
            manifest.display()
        )));
    }
    let durs: Option<Vec<DurationEntry>> = durations.map(read_durations).transpose()?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let tokens = TokenSequence::new(e.tokens, vocab_size)?;
        let frames = read_features(&e.features)?;
        let durations = match &durs {
            None => None,
            Some(all) => {
                let (_, d) = all
                    .iter()
                    .find(|(id, _)| *id == e.id)
                    .ok_or_else(|| nartts_core::Error::Contract(format!("no durations for utterance `{}`", e.id)))?;
                if d.len() != tokens.len() || d.iter().sum::<usize>() != frames.len() {
                    return Err(nartts_core::Error::Contract(format!(
                        "durations for `{}` ({} values, sum {}) do not fit {} tokens and {} frames",
                        e.id,
                        d.len(),
                        d.iter().sum::<usize>(),
                        tokens.len(),
                        frames.len()
                    ))
                    .into());
                }
                Some(DurationSeq::from_frames(d.clone()))
            }
        };
        out.push(Utterance {
            id: e.id,
            tokens,
            frames,
            durations,
        });
    }
    Ok(out)
}

pub fn build_model(run: &RunConfig) -> Result<(AcousticModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(run.train.seed, StreamKind::ParamInit);
    let model = AcousticModel::new(&mut ParamBuilder::new(&mut store, &mut rng), run.model.clone())?;
    Ok((model, store))
}

pub fn build_extractor(run: &RunConfig) -> Result<(DurationExtractor, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(run.extractor_train.seed, StreamKind::ParamInit);
    let ex = DurationExtractor::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        "extractor",
        run.extractor.clone(),
    )?;
    Ok((ex, store))
}

pub fn checkpoint_of(run: &RunConfig, kind: NetworkKind, store: &ParamStore) -> Checkpoint {
    let mut run = run.clone();
    run.kind = Some(kind);
    Checkpoint::from_store(store, run.to_toml())
}

fn load_kind(path: &Path, kind: NetworkKind) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let run = RunConfig::from_toml(&ckpt.config)?;
    if run.kind != Some(kind) {
        return Err(Error::Usage(format!(
            "{}: checkpoint holds {:?}, expected {kind:?}",
            path.display(),
            run.kind
        )));
    }
    Ok((run, ckpt))
}

pub fn load_model(path: &Path) -> Result<(RunConfig, AcousticModel, ParamStore)> {
    let (run, ckpt) = load_kind(path, NetworkKind::Model)?;
    let (model, mut store) = build_model(&run)?;
    ckpt.apply_to(&mut store)?;
    Ok((run, model, store))
}

pub fn load_extractor(path: &Path) -> Result<(RunConfig, DurationExtractor, ParamStore)> {
    let (run, ckpt) = load_kind(path, NetworkKind::Extractor)?;
    let (ex, mut store) = build_extractor(&run)?;
    ckpt.apply_to(&mut store)?;
    Ok((run, ex, store))
}

pub struct MainRun {
    pub model: AcousticModel,
    pub params: ParamStore,
    pub records: Vec<TrainRecord>,
    pub metrics: EvalMetrics,
}

/// Main-phase training for `run.train.max_steps` steps. Every utterance must
/// carry durations.
pub fn train_main(run: &RunConfig, data: &[Utterance], log: Option<&Path>) -> Result<MainRun> {
    if let Some(u) = data.iter().find(|u| u.durations.is_none()) {
        return Err(Error::Usage(format!(
            "utterance `{}` has no durations; pass --durations with a ground-truth or extracted duration file",
            u.id
        )));
    }
    let (model, mut params) = build_model(run)?;
    let mut trainer = Trainer::new(run.train.clone(), &params, data.len())?;
    let mut log = log.map(LineLog::append).transpose()?;
    let mut records = Vec::with_capacity(run.train.max_steps);
    while trainer.step() < run.train.max_steps {
        let r = trainer.train_step(&model, &mut params, data)?;
        if let Some(l) = log.as_mut() {
            l.record(&r)?;
        }
        records.push(r);
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    let metrics = evaluate(&model, &params, data)?;
    Ok(MainRun {
        model,
        params,
        records,
        metrics,
    })
}

/// Attention health over a set of utterances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentStats {
    pub mean_entropy: f64,
    pub monotonic: f64,
}

pub fn alignment_stats(ex: &DurationExtractor, params: &ParamStore, data: &[Utterance]) -> Result<AlignmentStats> {
    let (mut ent, mut mono) = (0.0, 0.0);
    for u in data {
        let a = ex.align(params, &u.tokens, &u.frames)?;
        ent += a.mean_entropy();
        mono += a.monotonic_fraction();
    }
    let n = data.len() as f64;
    Ok(AlignmentStats {
        mean_entropy: ent / n,
        monotonic: mono / n,
    })
}

pub struct ExtractorRun {
    pub extractor: DurationExtractor,
    pub params: ParamStore,
    pub records: Vec<TrainRecord>,
    /// Step at which the loss stopped improving, if it did before the cap.
    pub plateau_step: Option<usize>,
    pub diagnostics: Vec<(usize, AlignmentStats)>,
}

/// Extractor training until the loss plateaus or `max_steps` is reached.
/// Alignment diagnostics are computed every `diag_every` steps (0 disables)
/// and appended to `diag_log` as `step<TAB>entropy<TAB>monotonic`.
pub fn train_extractor(
    run: &RunConfig,
    data: &[Utterance],
    log: Option<&Path>,
    diag_log: Option<&Path>,
    diag_every: usize,
) -> Result<ExtractorRun> {
    let cfg = &run.extractor_train;
    let (extractor, mut params) = build_extractor(run)?;
    let mut trainer = Trainer::new(cfg.clone(), &params, data.len())?;
    let mut plateau = PlateauDetector::new(cfg.plateau_patience);
    let mut log = log.map(LineLog::append).transpose()?;
    let mut diag = diag_log.map(LineLog::append).transpose()?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut plateau_step = None;
    while trainer.step() < cfg.max_steps {
        let r = trainer.train_extractor_step(&extractor, &mut params, data)?;
        if let Some(l) = log.as_mut() {
            l.record(&r)?;
        }
        records.push(r);
        let stop = plateau.update(r.total);
        if diag_every > 0 && (r.step % diag_every == 0 || stop) {
            let s = alignment_stats(&extractor, &params, data)?;
            if let Some(l) = diag.as_mut() {
                l.line(&format!("{}\t{}\t{}", r.step, s.mean_entropy, s.monotonic))?;
            }
            diagnostics.push((r.step, s));
        }
        if stop {
            plateau_step = Some(r.step);
            break;
        }
    }
    for l in log.iter_mut().chain(diag.iter_mut()) {
        l.flush()?;
    }
    Ok(ExtractorRun {
        extractor,
        params,
        records,
        plateau_step,
        diagnostics,
    })
}

/// Ground-truth-aligned extraction over `data`, split across `jobs` threads.
/// Results keep the input order.
pub fn extract_all(
    ex: &DurationExtractor,
    params: &ParamStore,
    data: &[Utterance],
    jobs: usize,
) -> Result<Vec<(String, AlignmentMatrix)>> {
    let jobs = jobs.clamp(1, data.len().max(1));
    let chunk = data.len().div_ceil(jobs).max(1);
    let parts: Vec<Result<Vec<(String, AlignmentMatrix)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|u| Ok((u.id.clone(), ex.align(params, &u.tokens, &u.frames)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("extraction thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `T_dec` lines of `T_text` comma-separated weights.
pub fn alignment_csv(a: &AlignmentMatrix) -> String {
    let w = a.weights();
    let mut out = String::new();
    for i in 0..w.rows() {
        let row: Vec<String> = w.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn synthesize(model: &AcousticModel, params: &ParamStore, tokens: &[usize]) -> Result<Synthesis> {
    let tokens = TokenSequence::new(tokens.to_vec(), model.config.encoder.vocab_size)?;
    Ok(model.synthesize(params, &tokens)?)
}

/// Worst relative error per parameter tensor, per suite.
pub fn gradcheck(suites: &[Suite], corrupt: Option<&'static str>, seed: u64) -> Result<Vec<SuiteReport>> {
    suites
        .iter()
        .map(|&s| Ok(run_suite(s, DEFAULT_STEP, corrupt, seed)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub frames: usize,
    pub repeat: usize,
    pub nar_seconds: f64,
    pub ar_seconds: f64,
    pub nar_shape: (usize, usize),
    pub ar_shape: (usize, usize),
}

impl BenchResult {
    pub fn ratio(&self) -> f64 {
        self.ar_seconds / self.nar_seconds
    }
}

/// Times inference decoding of the same expanded input with the
/// non-autoregressive and autoregressive decoders of `run.model`.
pub fn bench_decoder(run: &RunConfig, frames: usize, repeat: usize) -> Result<BenchResult> {
    if frames == 0 || repeat == 0 {
        return Err(Error::Usage("--frames and --repeat must be positive".into()));
    }
    let d = run.model.encoder.d_model;
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(run.train.seed, StreamKind::ParamInit);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let mut cfg = run.model.decoder.clone();
    cfg.mode = DecoderMode::NonAutoregressive;
    let nar = Decoder::new(&mut pb, "nar", d, cfg.clone())?;
    cfg.mode = DecoderMode::Autoregressive;
    let ar = Decoder::new(&mut pb, "ar", d, cfg)?;
    let mut data_rng = RngStream::new(run.train.seed, StreamKind::Data);
    let input = Tensor::new(
        &[frames, d],
        (0..frames * d).map(|_| data_rng.uniform(-1.0, 1.0)).collect(),
    )?;

    // passes alternate so drift in machine load hits both decoders alike
    let once = |dec: &Decoder| -> Result<(f64, (usize, usize))> {
        let start = Instant::now();
        let mut g = Graph::new(&store);
        let x = g.input(input.clone());
        let (y, _) = dec.forward(&mut g, x, None)?;
        Ok((start.elapsed().as_secs_f64(), g.dims(y)))
    };
    let (mut nar_seconds, mut ar_seconds) = (0.0, 0.0);
    let (mut nar_shape, mut ar_shape) = ((0, 0), (0, 0));
    for _ in 0..repeat {
        let (s, shape) = once(&nar)?;
        nar_seconds += s / repeat as f64;
        nar_shape = shape;
        let (s, shape) = once(&ar)?;
        ar_seconds += s / repeat as f64;
        ar_shape = shape;
    }
    Ok(BenchResult {
        frames,
        repeat,
        nar_seconds,
        ar_seconds,
        nar_shape,
        ar_shape,
    })
}

/// Saves a trained network under its run configuration.
pub fn save(path: &Path, run: &RunConfig, kind: NetworkKind, store: &ParamStore) -> Result<()> {
    save_checkpoint(path, &checkpoint_of(run, kind, store))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use blockflow_core::backbone::{load_checkpoint, save_checkpoint, upsample_tokens, GateInit};
use blockflow_core::corpus::{read_corpus, write_corpus, Corpus, CorpusConfig};
use blockflow_core::flow::{
    cfm_loss_value, evaluation_batch, train_loop, write_loss_csv, SamplerConfig, TrainConfig,
};
use blockflow_core::masks::empirical_receptive_field;
use blockflow_core::numerics::sftn;
use blockflow_core::streaming::{
    generate_full, measure_chunk_latency, stream_generate, write_latency_csv, LatencyMode,
    LatencyRow, LatencyTable, StreamConfig, TokenEvent,
};
use blockflow_core::{
    receptive_field, Matrix, MaskSchedule, Model, ModelConfig, ModelParams, Preset, ReceptiveField,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::eval::heldout_accuracy;
use crate::{Failure, Outcome};

/// Utterances in the fixed batch used to report loss before and after training.
const EVAL_BATCH: usize = 64;
const MIN_BENCH_CHUNKS: usize = 10;
/// Latency slope allowed for sliding windows, as a fraction of the median.
pub const FLAT_SLOPE_LIMIT: f64 = 0.01;
/// Rank correlation required of the cumulative-history emulation.
pub const GROWTH_SPEARMAN_LIMIT: f64 = 0.9;

pub(crate) fn dispatch(g: &GlobalArgs, command: &Command) -> Result<Outcome, Failure> {
    match command {
        Command::MakeData(a) => make_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Generate(a) => generate(g, a),
        Command::AnalyzeRf(a) => analyze_rf(g, a),
        Command::Bench(a) => bench(g, a),
        Command::Replay(_) => Err(Failure::Usage("a manifest cannot replay another replay".into())),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn make_data(g: &GlobalArgs, a: &MakeDataArgs) -> Result<Outcome, Failure> {
    let mut config: CorpusConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => CorpusConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    let corpus = Corpus::generate(&config)?;
    let out = a.out.clone().unwrap_or_else(|| g.out_dir().join("corpus"));
    let manifest = write_corpus(&corpus, &out)?;
    log::info!(
        "{} utterances, separability {:.1}, written to {}",
        corpus.utterances.len(),
        config.separability(),
        out.display()
    );
    Ok(Outcome {
        config: json!({ "corpus": config }),
        seeds: vec![("corpus_seed", config.seed)],
        outputs: vec![manifest],
        failed_check: None,
    })
}

/// Tiny model shaped to a corpus.
fn model_for_corpus(corpus: &CorpusConfig, preset: Preset) -> Result<ModelConfig, Failure> {
    let mut config = ModelConfig::tiny();
    config.feature_dim = corpus.feature_dim;
    config.token_vocab = corpus.token_vocab;
    config.speaker_dim = corpus.speaker_dim;
    config.upsample_factor = corpus.upsample_factor;
    Ok(config.with_preset(preset)?)
}

fn check_compatible(model: &ModelConfig, corpus: &CorpusConfig) -> Result<(), Failure> {
    let pairs = [
        ("feature_dim", model.feature_dim, corpus.feature_dim),
        ("token_vocab", model.token_vocab, corpus.token_vocab),
        ("speaker_dim", model.speaker_dim, corpus.speaker_dim),
        ("upsample_factor", model.upsample_factor, corpus.upsample_factor),
    ];
    for (name, m, c) in pairs {
        if m != c {
            return Err(Failure::Usage(format!("model {name} {m} does not match corpus {name} {c}")));
        }
    }
    Ok(())
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<Outcome, Failure> {
    let seed = g.seed();
    let corpus = match &a.data {
        Some(dir) => read_corpus(dir)?,
        None => Corpus::generate(&CorpusConfig {
            seed,
            ..CorpusConfig::default()
        })?,
    };
    let mut model = match &a.init {
        Some(dir) => load_checkpoint(dir)?,
        None => Model::init(model_for_corpus(&corpus.config, a.preset)?, seed)?,
    };
    check_compatible(&model.config, &corpus.config)?;
    let config = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        batch_frames: a.batch_frames,
        cond_drop_rate: a.drop_rate,
        t_sampler: a.t_sampler,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    config.validate()?;

    let eval = evaluation_batch(&model, &corpus.utterances, EVAL_BATCH, &config.t_sampler, seed)?;
    let initial = if eval.is_empty() { f64::NAN } else { cfm_loss_value(&model, &eval)? };
    let report = train_loop(&mut model, &corpus.utterances, &config, seed, |p| {
        log::info!("step {:>5}  loss {:.5}", p.step, p.loss)
    })?;
    let last = if eval.is_empty() { f64::NAN } else { cfm_loss_value(&model, &eval)? };

    let out_dir = g.out_dir();
    ensure_dir(&out_dir)?;
    let ckpt = a.out.clone().unwrap_or_else(|| out_dir.join("checkpoint"));
    save_checkpoint(&model, &ckpt)?;
    let loss_csv = out_dir.join("loss.csv");
    write_loss_csv(&loss_csv, &report.trace)?;

    let sampler = SamplerConfig {
        steps: a.ode_steps,
        cfg_alpha: a.cfg_alpha,
        seed,
    };
    let heldout = if a.eval_utterances > 0 {
        let acc = heldout_accuracy(&model, &corpus.config, a.eval_utterances, &sampler)?;
        log::info!(
            "held-out class accuracy {}/{} = {:.3}",
            acc.hits,
            acc.segments,
            acc.accuracy()
        );
        Some(acc)
    } else {
        None
    };
    log::info!("eval loss {initial:.5} -> {last:.5}");
    let summary_path = out_dir.join("train_summary.json");
    write_json(
        &summary_path,
        &json!({
            "initial_eval_loss": initial,
            "final_eval_loss": last,
            "first_step_loss": report.losses.first(),
            "last_step_loss": report.losses.last(),
            "heldout": heldout,
            "heldout_accuracy": heldout.map(|h| h.accuracy()),
        }),
    )?;
    Ok(Outcome {
        config: json!({
            "train": config,
            "model": model.config,
            "corpus": corpus.config,
            "eval_sampler": sampler,
        }),
        seeds: vec![("init_seed", seed), ("train_seed", seed), ("corpus_seed", corpus.config.seed)],
        outputs: vec![ckpt, loss_csv, summary_path],
        failed_check: None,
    })
}

fn read_tokens(path: &Path) -> Result<Vec<u32>, Failure> {
    read_json(path)
}

fn read_speaker(path: Option<&Path>, dim: usize) -> Result<Vec<f32>, Failure> {
    let Some(path) = path else {
        return Ok(vec![0.0; dim]);
    };
    let t = sftn::read(path)?;
    if t.dims != [dim] {
        return Err(Failure::Usage(format!(
            "{}: speaker vector has dims {:?}, model expects [{dim}]",
            path.display(),
            t.dims
        )));
    }
    Ok(t.data)
}

fn generate(g: &GlobalArgs, a: &GenerateArgs) -> Result<Outcome, Failure> {
    let seed = g.seed();
    let mut model = match &a.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => Model::init(ModelConfig::tiny(), seed)?,
    };
    if let Some(p) = a.preset {
        model.config = model.config.clone().with_preset(p)?;
    }
    let tokens = read_tokens(&a.tokens)?;
    let speaker = read_speaker(a.speaker.as_deref(), model.config.speaker_dim)?;
    let sampler = SamplerConfig {
        steps: a.ode_steps,
        cfg_alpha: a.cfg_alpha,
        seed: a.noise_seed,
    };
    let config = StreamConfig {
        chunk_blocks: a.chunk_blocks,
        context_multiplier: a.context_mult,
        sampler,
        noise_seed: a.noise_seed,
        max_inflight_chunks: a.max_inflight,
        ..StreamConfig::default()
    };
    config.validate()?;

    let out_dir = g.out_dir();
    ensure_dir(&out_dir)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("features.sftn"));
    let mut outputs = vec![out.clone()];
    let features = match a.mode {
        GenerateMode::Batch => {
            let ids = upsample_tokens(&tokens, model.config.upsample_factor);
            generate_full(&model, &ids, &speaker, &sampler, a.noise_seed)?
        }
        GenerateMode::Stream => {
            let (features, rows, first) = run_stream(&model, &tokens, &speaker, &config)?;
            if let Some(frames) = first {
                log::info!("first chunk started with {frames} condition frames");
            }
            let csv = out_dir.join("generate_chunks.csv");
            write_latency_csv(
                &csv,
                &LatencyTable {
                    mode: LatencyMode::SlidingWindow,
                    rows,
                },
            )?;
            outputs.push(csv);
            features
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    sftn::write_matrix(&out, &features)?;
    log::info!("{} frames written to {}", features.rows(), out.display());
    Ok(Outcome {
        config: json!({ "model": model.config, "stream": config, "mode": a.mode }),
        seeds: vec![("init_seed", seed), ("noise_seed", a.noise_seed)],
        outputs,
        failed_check: None,
    })
}

/// Feeds tokens one at a time from a producer thread through the stream driver.
fn run_stream(
    model: &Model,
    tokens: &[u32],
    speaker: &[f32],
    config: &StreamConfig,
) -> Result<(Matrix, Vec<LatencyRow>, Option<usize>), Failure> {
    let (tx, rx) = mpsc::channel();
    let feed = tokens.to_vec();
    let producer = thread::spawn(move || {
        for t in feed {
            if tx.send(TokenEvent::Tokens(vec![t])).is_err() {
                return;
            }
        }
        let _ = tx.send(TokenEvent::End);
    });
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    let report = stream_generate(model, &rx, speaker, config, |chunk| {
        rows.push(LatencyRow {
            chunk_index: chunk.plan.chunk_index,
            frames: chunk.plan.window_frames(),
            millis: chunk.compute.as_secs_f64() * 1e3,
        });
        parts.push(chunk.features);
    });
    drop(rx);
    producer
        .join()
        .map_err(|_| Failure::Check("token producer panicked".into()))?;
    let report = report?;
    let features = if parts.is_empty() {
        Matrix::zeros(0, model.config.feature_dim)
    } else {
        Matrix::concat_rows(&parts)?
    };
    Ok((features, rows, report.first_packet_frames))
}

pub fn describe_field(rf: &ReceptiveField, block_size: usize) -> String {
    let side = |s: Option<usize>| s.map_or_else(|| "unbounded".to_string(), |n| n.to_string());
    let span = rf
        .span_frames(block_size)
        .map_or_else(|| "entire sequence".to_string(), |f| format!("{f} frames"));
    format!(
        "past={} future={} span={span}",
        side(rf.past_blocks),
        side(rf.future_blocks)
    )
}

fn analyze_rf(g: &GlobalArgs, a: &AnalyzeRfArgs) -> Result<Outcome, Failure> {
    let seed = g.seed();
    let requested = match (&a.schedule, a.preset) {
        (Some(path), _) => Some(MaskSchedule::load(path)?),
        (None, Some(p)) => Some(p.schedule(ModelConfig::tiny().layers, a.block_size)?),
        (None, None) => None,
    };
    let model = match &a.checkpoint {
        Some(dir) => {
            let mut m = load_checkpoint(dir)?;
            if let Some(s) = requested {
                if s.len() != m.config.layers {
                    return Err(Failure::Usage(format!(
                        "schedule has {} layers, checkpoint has {}",
                        s.len(),
                        m.config.layers
                    )));
                }
                m.config = m.config.clone().with_schedule(s)?;
            }
            m
        }
        None => {
            let schedule = match requested {
                Some(s) => s,
                None => Preset::Sr.schedule(ModelConfig::tiny().layers, a.block_size)?,
            };
            let config = ModelConfig::tiny().with_schedule(schedule)?;
            let params = ModelParams::init_with(&config, seed, GateInit::Random(0.5));
            Model::new(config, params)?
        }
    };
    let b = model.config.block_size();
    let analytic = receptive_field(&model.config.schedule);
    // Interior probe with one spare block beyond each bounded side.
    let probe = analytic.future_blocks.map_or(2, |q| q + 2);
    let blocks = probe + analytic.past_blocks.map_or(2, |p| p + 2) + 1;
    let frames = blocks * b;
    let mut empirical = Vec::new();
    for k in 0..a.probes.max(1) as u64 {
        empirical.push(empirical_receptive_field(&model, frames, probe, seed.wrapping_add(k))?);
    }
    let matched = empirical.iter().all(|e| *e == analytic);
    let line = format!(
        "{}; empirical: {}",
        describe_field(&analytic, b),
        if matched { "MATCH".to_string() } else { format!("MISMATCH ({empirical:?})") }
    );
    println!("{line}");

    let out_dir = g.out_dir();
    let report = out_dir.join("rf_report.json");
    write_json(
        &report,
        &json!({
            "schedule": model.config.schedule,
            "block_size": b,
            "analytic": analytic,
            "span_frames": analytic.span_frames(b),
            "probe_block": probe,
            "sequence_blocks": blocks,
            "empirical": empirical,
            "match": matched,
        }),
    )?;
    Ok(Outcome {
        config: json!({ "model": model.config }),
        seeds: vec![("init_seed", seed), ("probe_seed", seed)],
        outputs: vec![report],
        failed_check: (!matched).then(|| format!("receptive field mismatch: {line}")),
    })
}

fn bench(g: &GlobalArgs, a: &BenchArgs) -> Result<Outcome, Failure> {
    if a.chunks < MIN_BENCH_CHUNKS {
        return Err(Failure::Usage(format!(
            "bench needs at least {MIN_BENCH_CHUNKS} chunks, got {}",
            a.chunks
        )));
    }
    let seed = g.seed();
    let mut model = match &a.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => Model::init(ModelConfig::tiny(), seed)?,
    };
    if let Some(p) = a.preset {
        model.config = model.config.clone().with_preset(p)?;
    }
    let config = StreamConfig {
        chunk_blocks: a.chunk_blocks,
        context_multiplier: a.context_mult,
        sampler: SamplerConfig {
            steps: a.ode_steps,
            cfg_alpha: a.cfg_alpha,
            seed,
        },
        noise_seed: seed,
        ..StreamConfig::default()
    };
    let table = measure_chunk_latency(&model, &config, a.chunks, a.mode, a.repeats, seed)?;
    let s = table.summary();
    let (passed, criterion) = match a.mode {
        LatencyMode::SlidingWindow => (
            s.relative_slope < FLAT_SLOPE_LIMIT,
            format!("|slope| < {:.0}% of median", FLAT_SLOPE_LIMIT * 100.0),
        ),
        LatencyMode::CausalCumulative => (
            s.spearman > GROWTH_SPEARMAN_LIMIT,
            format!("spearman > {GROWTH_SPEARMAN_LIMIT}"),
        ),
    };
    let line = format!(
        "mode={} chunks={} median={:.3} ms slope={:.5} ms/chunk ({:.2}% of median) spearman={:.3}; {criterion}: {}",
        a.mode,
        s.chunks,
        s.median_millis,
        s.slope_millis_per_chunk,
        s.relative_slope * 100.0,
        s.spearman,
        if passed { "PASS" } else { "FAIL" }
    );
    println!("{line}");

    let out_dir = g.out_dir();
    ensure_dir(&out_dir)?;
    let csv = a
        .csv
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("latency_{}.csv", a.mode)));
    write_latency_csv(&csv, &table)?;
    let summary_path: PathBuf = out_dir.join(format!("bench_{}.json", a.mode));
    write_json(&summary_path, &json!({ "summary": s, "passed": passed, "criterion": criterion }))?;
    Ok(Outcome {
        config: json!({ "model": model.config, "stream": config, "mode": a.mode, "repeats": a.repeats }),
        seeds: vec![("init_seed", seed), ("latency_seed", seed)],
        outputs: vec![csv, summary_path],
        failed_check: (!passed).then(|| format!("latency criterion not met: {line}")),
    })
}

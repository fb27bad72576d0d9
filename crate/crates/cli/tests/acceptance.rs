//! Acceptance checks 1-12. Runs as a plain binary so every verdict line shows
//! up in `cargo test` output; the process fails if any check fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command as Process;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use blockflow_cli::args::{Command, MakeDataArgs, TrainArgs};
use blockflow_cli::eval::heldout_accuracy;
use blockflow_cli::{describe_field, execute, GlobalArgs};
use blockflow_core::backbone::{
    dit_block_forward, load_checkpoint, save_checkpoint, upsample_tokens, GateInit,
};
use blockflow_core::corpus::{read_corpus, CorpusConfig};
use blockflow_core::flow::{
    cfg_vector_field, cfm_loss, cfm_loss_value, evaluation_batch, FlowSample, SamplerConfig,
    TimeSampler,
};
use blockflow_core::masks::{build_mask, empirical_receptive_field};
use blockflow_core::numerics::sftn;
use blockflow_core::streaming::{
    first_packet_frames, generate_full, generate_offline, measure_chunk_latency, plan_chunks,
    stream_generate, LatencyMode, StreamConfig, TokenEvent,
};
use blockflow_core::{
    receptive_field, MaskKind, MaskSchedule, Matrix, Model, ModelConfig, ModelParams, Preset,
    ReceptiveField, SeededRng,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

type Check = fn() -> Verdict;

fn main() {
    let checks: [(u32, &str, Duration, Check); 12] = [
        (1, "mask correctness", secs(10), masks_match_oracle),
        (2, "receptive-field formula", secs(60), receptive_field_formula),
        (3, "adaLN-zero identity", secs(60), fresh_blocks_are_identity),
        (4, "flow-matching gradient check", secs(600), gradient_check),
        (5, "guidance affinity", secs(60), guidance_affinity),
        (6, "streaming equivalence, one step", secs(120), one_step_equivalence),
        (7, "streaming equivalence, four steps", secs(300), multi_step_containment),
        (8, "stream driver vs offline loop", secs(120), driver_matches_offline),
        (9, "latency shape", secs(300), latency_shape),
        (10, "first-packet arithmetic", secs(60), first_packet_arithmetic),
        (11, "end-to-end toy training", secs(900), toy_training),
        (12, "generate replay", secs(120), generate_replay),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (n, name, budget, check) in checks {
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= budget;
        let passed = v.passed && in_time;
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {n:>2} {name}: {} ({}) [{:.1} s of {} s]",
            if passed { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 12 passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn random_gate_model(config: ModelConfig, seed: u64) -> Model {
    let params = ModelParams::init_with(&config, seed, GateInit::Random(0.5));
    Model::new(config, params).unwrap()
}

fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian() as f32)
}

fn random_ids(n: usize, vocab: usize, rng: &mut SeededRng) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

fn random_speaker(dim: usize, rng: &mut SeededRng) -> Vec<f32> {
    (0..dim).map(|_| rng.next_gaussian() as f32).collect()
}

/// `max |a - b| / max |b|`.
fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b) as f64;
    let scale = b.max_abs() as f64;
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

// 1 --------------------------------------------------------------------------

fn oracle_allows(kind: MaskKind, i: usize, j: usize, b: usize) -> bool {
    let (bi, bj) = (i / b, j / b);
    match kind {
        MaskKind::Block => bi == bj,
        MaskKind::Backward => bj == bi || bj + 1 == bi,
        MaskKind::Forward => bj == bi || bj == bi + 1,
        MaskKind::Causal => bj <= bi,
        MaskKind::Full => true,
    }
}

fn masks_match_oracle() -> Verdict {
    use MaskKind::*;
    let (mut entries, mut wrong) = (0u64, 0u64);
    for kind in [Block, Backward, Forward, Causal, Full] {
        for b in [1, 2, 3, 8, 24] {
            for n in 1..=96 {
                let m = build_mask(kind, n, b);
                for i in 0..n {
                    for j in 0..n {
                        entries += 1;
                        wrong += u64::from(m.get(i, j) != oracle_allows(kind, i, j, b));
                    }
                }
            }
        }
    }
    verdict(wrong == 0, format!("{wrong} of {entries} entries differ"))
}

// 2 --------------------------------------------------------------------------

/// Probes the interior of a sequence sized for the schedule's analytic field.
fn probed_field(model: &Model, seed: u64) -> (ReceptiveField, ReceptiveField) {
    let analytic = receptive_field(&model.config.schedule);
    let probe = analytic.future_blocks.map_or(2, |q| q + 2);
    let blocks = probe + analytic.past_blocks.map_or(2, |p| p + 2) + 1;
    let frames = blocks * model.config.block_size();
    let empirical = empirical_receptive_field(model, frames, probe, seed).unwrap();
    (analytic, empirical)
}

fn receptive_field_formula() -> Verdict {
    use MaskKind::*;
    let mut rng = SeededRng::new(2, 0);
    let mut mismatches = Vec::new();
    let kinds = [Block, Backward, Forward];
    for case in 0..50u64 {
        let layers = 1 + rng.below(8);
        let masks: Vec<MaskKind> = (0..layers).map(|_| kinds[rng.below(3)]).collect();
        let b = [1, 2, 3, 4, 8][rng.below(5)];
        let formula = ReceptiveField::bounded(
            masks.iter().filter(|&&k| k == Backward).count(),
            masks.iter().filter(|&&k| k == Forward).count(),
        );
        let schedule = MaskSchedule::new(masks.clone(), b).unwrap();
        let config = ModelConfig::tiny().with_schedule(schedule).unwrap();
        let model = random_gate_model(config, case);
        let (analytic, empirical) = probed_field(&model, case);
        if analytic != formula || empirical != formula {
            mismatches.push(format!("{masks:?} b={b}: {analytic:?} / {empirical:?}"));
        }
    }

    let three = MaskSchedule::new(vec![Forward, Block, Backward], 8).unwrap();
    let model = random_gate_model(ModelConfig::tiny().with_schedule(three).unwrap(), 60);
    let (a3, e3) = probed_field(&model, 60);
    let three_ok = a3 == e3 && e3 == ReceptiveField::bounded(1, 1) && e3.span_blocks() == Some(3);

    let sr = Preset::Sr.schedule(4, 24).unwrap();
    let model = random_gate_model(ModelConfig::tiny().with_schedule(sr).unwrap(), 61);
    let (asr, esr) = probed_field(&model, 61);
    let sr_ok = asr == esr && esr == ReceptiveField::bounded(2, 1) && esr.span_frames(24) == Some(96);

    verdict(
        mismatches.is_empty() && three_ok && sr_ok,
        format!(
            "{} of 50 random schedules match; three-mask stack {}; SR at b=24 {}{}",
            50 - mismatches.len(),
            describe_field(&e3, 8),
            describe_field(&esr, 24),
            mismatches.first().map(|m| format!("; first mismatch {m}")).unwrap_or_default()
        ),
    )
}

// 3 --------------------------------------------------------------------------

fn fresh_blocks_are_identity() -> Verdict {
    let config = ModelConfig::tiny();
    let model = Model::init(config.clone(), 3).unwrap();
    let mut rng = SeededRng::new(3, 0);
    let mut identical = 0;
    for _ in 0..20 {
        let frames = 1 + rng.below(64);
        let x = gaussian(frames, config.hidden_dim, &mut rng);
        let temb = model.timestep_embedding(rng.next_uniform()).unwrap();
        let all = model.params.layers.iter().enumerate().all(|(l, layer)| {
            let mask = build_mask(config.schedule.layer_masks[l], frames, config.block_size());
            dit_block_forward(&x, &temb, &mask, layer, &config)
                .unwrap()
                .bits_eq(&x)
        });
        identical += usize::from(all);
    }
    verdict(identical == 20, format!("{identical} of 20 inputs unchanged bitwise by every block"))
}

// 4 --------------------------------------------------------------------------

fn gradient_check() -> Verdict {
    let corpus = CorpusConfig::default();
    let data: Vec<_> = (0..3)
        .map(|i| blockflow_core::corpus::synth_utterance(&corpus, i))
        .collect();
    let eps = 1e-3;
    let (mut good, mut total) = (0usize, 0usize);
    let mut worst_seed = (0u64, 1.0f64);
    for seed in 0..5u64 {
        let model = random_gate_model(ModelConfig::tiny(), 100 + seed);
        let mut batch =
            evaluation_batch(&model, &data, data.len(), &TimeSampler::default(), seed).unwrap();
        batch[1].cond_dropped = true;
        let (_, grads) = cfm_loss(&model, &batch, None).unwrap();
        let model64 = model.cast::<f64>();
        let batch64: Vec<FlowSample<f64>> = batch.iter().map(|s| s.cast()).collect();
        let count = model.params.parameter_count();
        let mut rng = SeededRng::new(seed, 4);
        let mut seed_good = 0;
        for _ in 0..500 {
            let (ti, ei) = model.params.coordinate(rng.below(count));
            let shifted = |delta: f64| {
                let mut m = model64.clone();
                m.params.tensors_mut()[ti].as_mut_slice()[ei] += delta;
                cfm_loss_value(&m, &batch64).unwrap()
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let an = grads.tensors()[ti].as_slice()[ei] as f64;
            let scale = fd.abs().max(an.abs());
            if scale < 1e-7 || (fd - an).abs() / scale < 1e-2 {
                seed_good += 1;
            }
        }
        let frac = seed_good as f64 / 500.0;
        if frac < worst_seed.1 {
            worst_seed = (seed, frac);
        }
        good += seed_good;
        total += 500;
    }
    verdict(
        worst_seed.1 >= 0.99,
        format!(
            "{good} of {total} coordinates within 1e-2; worst seed {} at {:.1}%",
            worst_seed.0,
            worst_seed.1 * 100.0
        ),
    )
}

// 5 --------------------------------------------------------------------------

fn guidance_affinity() -> Verdict {
    let mut rng = SeededRng::new(5, 0);
    let mut worst: f64 = 0.0;
    let mut bitwise = 0;
    for trial in 0..10 {
        let model = random_gate_model(ModelConfig::tiny(), 200 + trial);
        let c = &model.config;
        let frames = 8 + rng.below(40);
        let x = gaussian(frames, c.feature_dim, &mut rng);
        let ids = random_ids(frames, c.token_vocab, &mut rng);
        let cond = model
            .assemble_condition(&ids, &random_speaker(c.speaker_dim, &mut rng))
            .unwrap();
        let t = rng.next_uniform();
        let conditional = model.vector_field(&x, t, &cond, 0).unwrap();
        let v = |a: f32| cfg_vector_field(&model, &x, t, &cond, a, 0).unwrap();
        let (v0, vh, v1) = (v(0.0), v(0.5), v(1.0));
        bitwise += usize::from(v0.bits_eq(&conditional));
        let midpoint = v0.zip_map(&v1, |a, b| 0.5 * (a + b)).unwrap();
        worst = worst.max(relative_error(&vh, &midpoint));
        // Independent two-branch oracle in f64.
        let uncond = model.vector_field(&x, t, &cond.null_like(), 0).unwrap();
        let oracle = Matrix::from_fn(frames, c.feature_dim, |i, j| {
            let (vc, vu) = (conditional.get(i, j) as f64, uncond.get(i, j) as f64);
            (1.5 * vc - 0.5 * vu) as f32
        });
        worst = worst.max(relative_error(&vh, &oracle));
    }
    verdict(
        worst <= 1e-6 && bitwise == 10,
        format!("worst collinearity error {worst:.2e}; alpha=0 bitwise equal to the conditional branch in {bitwise} of 10"),
    )
}

// 6, 7 -----------------------------------------------------------------------

fn equivalence(steps: usize, multiplier: usize, runs: u64, tolerance: f64) -> Verdict {
    let mut rng = SeededRng::new(6, steps as u64);
    let mut worst: f64 = 0.0;
    let mut bitwise = 0;
    for run in 0..runs {
        let model = random_gate_model(ModelConfig::tiny(), 300 + run);
        let c = &model.config;
        let tokens = 8 + rng.below(40);
        let ids = upsample_tokens(&random_ids(tokens, c.token_vocab, &mut rng), c.upsample_factor);
        let speaker = random_speaker(c.speaker_dim, &mut rng);
        let config = StreamConfig {
            context_multiplier: multiplier,
            sampler: SamplerConfig {
                steps,
                cfg_alpha: 0.5,
                seed: run,
            },
            noise_seed: run,
            ..StreamConfig::default()
        };
        let streamed = generate_offline(&model, &ids, &speaker, &config).unwrap();
        let full = generate_full(&model, &ids, &speaker, &config.sampler, run).unwrap();
        bitwise += usize::from(streamed.bits_eq(&full));
        worst = worst.max(relative_error(&streamed, &full));
    }
    verdict(
        worst <= tolerance,
        format!("worst relative error {worst:.2e} over {runs} inputs ({bitwise} bitwise equal)"),
    )
}

fn one_step_equivalence() -> Verdict {
    equivalence(1, 1, 20, 1e-5)
}

fn multi_step_containment() -> Verdict {
    equivalence(4, 4, 20, 1e-4)
}

// 8 --------------------------------------------------------------------------

fn driver_matches_offline() -> Verdict {
    let mut rng = SeededRng::new(8, 0);
    let mut equal = 0;
    for run in 0..10u64 {
        let preset = if run % 2 == 0 { Preset::Sr } else { Preset::Lr };
        let model = random_gate_model(ModelConfig::tiny().with_preset(preset).unwrap(), 400 + run);
        let c = &model.config;
        let tokens = random_ids(6 + rng.below(40), c.token_vocab, &mut rng);
        let speaker = random_speaker(c.speaker_dim, &mut rng);
        let config = StreamConfig {
            chunk_blocks: 1 + rng.below(3),
            max_inflight_chunks: 1 + rng.below(4),
            noise_seed: 1000 + run,
            ..StreamConfig::default()
        };
        let piece = 1 + rng.below(5);
        let (tx, rx) = mpsc::channel();
        let feed = tokens.clone();
        let producer = thread::spawn(move || {
            for part in feed.chunks(piece) {
                tx.send(TokenEvent::Tokens(part.to_vec())).unwrap();
            }
            tx.send(TokenEvent::End).unwrap();
        });
        let mut parts = Vec::new();
        stream_generate(&model, &rx, &speaker, &config, |chunk| parts.push(chunk.features)).unwrap();
        producer.join().unwrap();
        let streamed = Matrix::concat_rows(&parts).unwrap();
        let ids = upsample_tokens(&tokens, c.upsample_factor);
        let offline = generate_offline(&model, &ids, &speaker, &config).unwrap();
        equal += usize::from(streamed.bits_eq(&offline));
    }
    verdict(equal == 10, format!("{equal} of 10 runs bitwise identical"))
}

// 9 --------------------------------------------------------------------------

fn latency_shape() -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let model = Model::init(ModelConfig::tiny(), 9).unwrap();
        // One vector-field evaluation per chunk: the per-step unit of work.
        let config = StreamConfig {
            sampler: SamplerConfig {
                steps: 1,
                cfg_alpha: 0.0,
                seed: 0,
            },
            ..StreamConfig::default()
        };
        let sliding =
            measure_chunk_latency(&model, &config, 100, LatencyMode::SlidingWindow, 3, 9).unwrap();
        let causal =
            measure_chunk_latency(&model, &config, 100, LatencyMode::CausalCumulative, 1, 9).unwrap();
        let (s, c) = (sliding.summary(), causal.summary());
        verdict(
            s.relative_slope < 0.01 && c.spearman > 0.9 && c.slope_millis_per_chunk > 0.0,
            format!(
                "sliding median {:.3} ms, |slope| {:.3}% of median; causal spearman {:.3}, slope {:.3} ms/chunk",
                s.median_millis,
                s.relative_slope * 100.0,
                c.spearman,
                c.slope_millis_per_chunk
            ),
        )
    })
}

// 10 -------------------------------------------------------------------------

fn first_packet_arithmetic() -> Verdict {
    let sr = ReceptiveField::bounded(2, 1);
    let headline = first_packet_frames(&plan_chunks(24 * 50, 24, 2, sr, 1));
    let mut wrong = Vec::new();
    for (preset, q) in [(Preset::Sr, 1), (Preset::Lr, 2)] {
        let rf = receptive_field(&preset.schedule(4, 8).unwrap());
        for b in [8, 24] {
            for chunk in 1..=4 {
                for m in 1..=3 {
                    let got = first_packet_frames(&plan_chunks(b * 60, b, chunk, rf, m));
                    if got != (chunk + m * q) * b {
                        wrong.push(format!("{preset:?} b={b} chunk={chunk} m={m}: {got}"));
                    }
                }
            }
        }
    }
    // The driver starts chunk 0 the moment that many frames have arrived.
    let mut driver = Vec::new();
    for (chunk, m) in [(2, 1), (1, 2), (3, 1)] {
        let sr24 = Preset::Sr.schedule(4, 24).unwrap();
        let model = random_gate_model(ModelConfig::tiny().with_schedule(sr24).unwrap(), 10);
        let config = StreamConfig {
            chunk_blocks: chunk,
            context_multiplier: m,
            sampler: SamplerConfig {
                steps: 1,
                cfg_alpha: 0.0,
                seed: 0,
            },
            ..StreamConfig::default()
        };
        let (tx, rx) = mpsc::channel();
        for t in 0..60u32 {
            tx.send(TokenEvent::Tokens(vec![t % 32])).unwrap();
        }
        tx.send(TokenEvent::End).unwrap();
        let report = stream_generate(&model, &rx, &[0.0; 8], &config, |_| {}).unwrap();
        let expected = (chunk + m) * 24;
        if report.first_packet_frames != Some(expected) {
            wrong.push(format!("driver chunk={chunk} m={m}: {:?}", report.first_packet_frames));
        }
        driver.push(expected);
    }
    verdict(
        headline == 72 && wrong.is_empty(),
        format!(
            "SR, 2-block chunks, multiplier 1: {headline} frames; 48 planner cases and driver starts at {driver:?} frames{}",
            wrong.first().map(|w| format!("; first mismatch {w}")).unwrap_or_default()
        ),
    )
}

// 11 -------------------------------------------------------------------------

fn global(dir: &Path, threads: usize) -> GlobalArgs {
    GlobalArgs {
        threads: Some(threads),
        seed: Some(0),
        out_dir: Some(dir.to_path_buf()),
    }
}

fn toy_training() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    execute(
        global(dir.path(), 1),
        Command::MakeData(MakeDataArgs { config: None, out: None }),
        vec![],
    )
    .unwrap();
    let corpus_dir = dir.path().join("corpus");
    let train_args = TrainArgs {
        data: Some(corpus_dir.clone()),
        init: None,
        preset: Preset::Sr,
        steps: 2000,
        lr: 1e-3,
        drop_rate: 0.3,
        t_sampler: TimeSampler::default(),
        batch_frames: 128,
        log_every: 100,
        cfg_alpha: 0.5,
        ode_steps: 10,
        eval_utterances: 0,
        out: None,
    };
    execute(global(dir.path(), 1), Command::Train(train_args), vec![]).unwrap();

    // Losses and accuracy recomputed from the files the run left behind.
    let corpus = read_corpus(&corpus_dir).unwrap();
    let trained = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    let fresh = Model::init(trained.config.clone(), 0).unwrap();
    let eval = evaluation_batch(&fresh, &corpus.utterances, 64, &TimeSampler::default(), 0).unwrap();
    let initial = cfm_loss_value(&fresh, &eval).unwrap();
    let last = cfm_loss_value(&trained, &eval).unwrap();
    let sampler = SamplerConfig {
        steps: 10,
        cfg_alpha: 0.5,
        seed: 0,
    };
    let acc = heldout_accuracy(&trained, &corpus.config, 100, &sampler).unwrap();
    let trace = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    verdict(
        last < 0.5 * initial && acc.accuracy() >= 0.95,
        format!(
            "eval loss {initial:.4} -> {last:.4} (ratio {:.3}); held-out accuracy {}/{} = {:.3}; {} trace rows",
            last / initial,
            acc.hits,
            acc.segments,
            acc.accuracy(),
            trace.lines().count() - 1
        ),
    )
}

// 12 -------------------------------------------------------------------------

fn blockflow(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_blockflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn generate_replay() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let model = random_gate_model(ModelConfig::tiny(), 12);
    save_checkpoint(&model, Path::new(&d("ckpt"))).unwrap();
    let mut rng = SeededRng::new(12, 0);
    let tokens = random_ids(37, 32, &mut rng);
    fs::write(d("tokens.json"), serde_json::to_string(&tokens).unwrap()).unwrap();
    sftn::write(
        Path::new(&d("speaker.sftn")),
        &sftn::Tensor::vector(random_speaker(8, &mut rng)),
    )
    .unwrap();

    let mut notes = Vec::new();
    let mut all_equal = true;
    for (mode, threads) in [("stream", "2"), ("batch", "1")] {
        let first = d(&format!("{mode}-a"));
        let out = blockflow(&[
            "--out-dir", &first, "--threads", threads, "--seed", "3", "generate", "--checkpoint", &d("ckpt"),
            "--mode", mode, "--noise-seed", "41", "--ode-steps", "6", "--cfg-alpha", "0.5",
            "--tokens", &d("tokens.json"), "--speaker", &d("speaker.sftn"),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let second = d(&format!("{mode}-b"));
        let manifest = format!("{first}/generate.manifest.json");
        let out = blockflow(&["--out-dir", &second, "--threads", "4", "replay", &manifest]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let a = fs::read(format!("{first}/features.sftn")).unwrap();
        let b = fs::read(format!("{second}/features.sftn")).unwrap();
        let equal = a == b && !a.is_empty();
        all_equal &= equal;
        notes.push(format!(
            "{mode}: {} bytes {}",
            a.len(),
            if equal { "identical" } else { "DIFFER" }
        ));
    }
    verdict(all_equal, notes.join("; "))
}

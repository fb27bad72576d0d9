use proptest::prelude::*;

use super::*;
use crate::backbone::{GateInit, ModelConfig, ModelParams};
use crate::corpus::{Corpus, CorpusConfig};

fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian() as f32)
}

fn random_model(seed: u64) -> Model {
    let config = ModelConfig::tiny();
    let params = ModelParams::init_with(&config, seed, GateInit::Random(0.5));
    Model::new(config, params).unwrap()
}

fn random_cond(model: &Model, frames: usize, rng: &mut SeededRng) -> ConditionBundle {
    let c = &model.config;
    let ids: Vec<u32> = (0..frames).map(|_| rng.below(c.token_vocab) as u32).collect();
    let spk: Vec<f32> = (0..c.speaker_dim).map(|_| rng.next_gaussian() as f32).collect();
    model.assemble_condition(&ids, &spk).unwrap()
}

fn random_batch(model: &Model, seed: u64, sizes: &[usize]) -> Vec<FlowSample> {
    let mut rng = SeededRng::new(seed, 3);
    sizes
        .iter()
        .enumerate()
        .map(|(i, &frames)| FlowSample {
            x0: gaussian(frames, 8, &mut rng),
            x1: gaussian(frames, 8, &mut rng),
            t: rng.next_uniform(),
            cond: random_cond(model, frames, &mut rng),
            cond_dropped: i % 2 == 1,
            start_frame: 0,
        })
        .collect()
}

proptest! {
    #[test]
    fn flow_point_endpoints_are_exact(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = SeededRng::new(seed, 0);
        let x0 = gaussian(rows, cols, &mut rng);
        let x1 = gaussian(rows, cols, &mut rng);
        prop_assert!(ot_flow_point(&x0, &x1, 0.0).unwrap().bits_eq(&x0));
        prop_assert!(ot_flow_point(&x0, &x1, 1.0).unwrap().bits_eq(&x1));
    }
}

#[test]
fn flow_point_examples() {
    let m = Matrix::from_vec(1, 3, vec![1.0f32, -2.0, 0.5]).unwrap();
    let zero = Matrix::zeros(1, 3);
    let mid = ot_flow_point(&zero, &m.scale(2.0), 0.5).unwrap();
    assert!(mid.bits_eq(&m));

    let mut rng = SeededRng::new(4, 0);
    let x0 = gaussian(5, 4, &mut rng);
    let x1 = gaussian(5, 4, &mut rng);
    let got = ot_flow_point(&x0, &x1, 0.3).unwrap();
    for i in 0..5 {
        for j in 0..4 {
            let want = (1.0 - 0.3f32) * x0.get(i, j) + 0.3f32 * x1.get(i, j);
            assert_eq!(got.get(i, j).to_bits(), want.to_bits());
        }
    }
    let short = gaussian(4, 4, &mut rng);
    assert!(matches!(ot_flow_point(&x0, &short, 0.5), Err(Error::Input(_))));
    assert!(matches!(ot_flow_point(&x0, &x1, 1.5), Err(Error::Input(_))));
}

#[test]
fn target_examples() {
    let mut rng = SeededRng::new(5, 0);
    let x0 = gaussian(3, 4, &mut rng);
    let x1 = gaussian(3, 4, &mut rng);
    assert!(ot_target(&x0, &x0).unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(ot_target(&Matrix::zeros(3, 4), &x1).unwrap().bits_eq(&x1));
    let got = ot_target(&x0, &x1).unwrap();
    for (k, &v) in got.as_slice().iter().enumerate() {
        assert_eq!(v.to_bits(), (x1.as_slice()[k] - x0.as_slice()[k]).to_bits());
    }
    assert!(matches!(ot_target(&x0, &gaussian(2, 4, &mut rng)), Err(Error::Input(_))));
}

#[test]
fn logit_normal_centre_and_median() {
    assert_eq!(sigmoid(0.0), 0.5);
    let sampler = TimeSampler::default();
    let mut rng = SeededRng::new(11, 0);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_t(&sampler, &mut rng)).collect();
    assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
    draws.sort_by(f64::total_cmp);
    let median = draws[draws.len() / 2];
    assert!((median - 0.5).abs() < 0.01, "median {median}");
}

#[test]
fn uniform_sampler_passes_ks() {
    let mut rng = SeededRng::new(12, 0);
    let n = 10_000;
    let mut draws: Vec<f64> = (0..n).map(|_| sample_t(&TimeSampler::Uniform, &mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let lo = x - i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64 - x;
            lo.max(hi)
        })
        .fold(0.0, f64::max);
    assert!(d < 0.02, "KS statistic {d}");
}

#[test]
fn planted_exact_field_has_zero_loss() {
    let model = random_model(0);
    let batch = random_batch(&model, 1, &[8, 12]);
    // The exact OT velocity along a straight path is x1 - x0, recoverable from
    // x_t for a known pair; plant it by matching rows.
    let pairs: Vec<(Matrix, Matrix)> = batch.iter().map(|s| (s.x0.clone(), s.x1.clone())).collect();
    let field = FieldFn(move |x: &Matrix, _t: f64, _c: &ConditionBundle| {
        let (x0, x1) = pairs.iter().find(|(a, _)| a.rows() == x.rows()).unwrap();
        ot_target(x0, x1).unwrap()
    });
    assert_eq!(cfm_loss_value(&field, &batch).unwrap(), 0.0);
}

#[test]
fn constant_output_loss_matches_closed_form() {
    let mut model = Model::init(ModelConfig::tiny(), 2).unwrap();
    model.params.out_w.fill(0.0);
    let mut rng = SeededRng::new(9, 9);
    let o: Vec<f32> = (0..8).map(|_| rng.next_gaussian() as f32).collect();
    model.params.out_b = Matrix::row_vector(o.clone());
    let batch = random_batch(&model, 3, &[8, 16, 5]);

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for s in &batch {
        for i in 0..s.x0.rows() {
            for (c, &oc) in o.iter().enumerate() {
                let u = (s.x1.get(i, c) - s.x0.get(i, c)) as f64;
                sum += (u - oc as f64).powi(2);
                count += 1;
            }
        }
    }
    let want = sum / count as f64;
    let got = cfm_loss_value(&model, &batch).unwrap();
    assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
    let (with_grads, _) = cfm_loss(&model, &batch, None).unwrap();
    assert_eq!(with_grads.to_bits(), got.to_bits());
}

#[test]
fn empty_batch_is_an_input_error() {
    let model = random_model(0);
    assert!(matches!(cfm_loss(&model, &[], None), Err(Error::Input(_))));
}

/// Analytic f32 gradients against central differences taken in f64.
#[test]
fn gradients_match_finite_differences() {
    let model = random_model(7);
    let batch = random_batch(&model, 7, &[16, 24]);
    let (_, grads) = cfm_loss(&model, &batch, None).unwrap();
    let model64 = model.cast::<f64>();
    let batch64: Vec<FlowSample<f64>> = batch.iter().map(|s| s.cast()).collect();
    let total = model.params.parameter_count();
    let eps = 1e-3;
    let mut rng = SeededRng::new(70, 0);
    let mut good = 0;
    let n = 100;
    for _ in 0..n {
        let (ti, ei) = model.params.coordinate(rng.below(total));
        let shifted = |delta: f64| {
            let mut m = model64.clone();
            m.params.tensors_mut()[ti].as_mut_slice()[ei] += delta;
            cfm_loss_value(&m, &batch64).unwrap()
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let an = grads.tensors()[ti].as_slice()[ei] as f64;
        let scale = fd.abs().max(an.abs());
        if scale < 1e-7 || (fd - an).abs() / scale < 1e-2 {
            good += 1;
        }
    }
    assert!(good >= 99, "{good}/{n} coordinates within tolerance");
}

#[test]
fn dropout_seed_changes_gradients_only_when_enabled() {
    let model = random_model(1);
    let batch = random_batch(&model, 2, &[16]);
    let a = cfm_loss(&model, &batch, Some(1)).unwrap();
    let b = cfm_loss(&model, &batch, None).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());

    let mut config = ModelConfig::tiny();
    config.dropout = 0.1;
    let noisy = Model::new(config, model.params.clone()).unwrap();
    let c = cfm_loss(&noisy, &batch, Some(1)).unwrap();
    let d = cfm_loss(&noisy, &batch, Some(1)).unwrap();
    assert_eq!(c.0.to_bits(), d.0.to_bits());
    assert_ne!(c.0.to_bits(), b.0.to_bits());
}

#[test]
fn cfg_zero_alpha_is_the_conditional_branch() {
    let model = random_model(3);
    let mut rng = SeededRng::new(1, 0);
    let x = gaussian(24, 8, &mut rng);
    let cond = random_cond(&model, 24, &mut rng);
    let vc = model.vector_field(&x, 0.2, &cond, 0).unwrap();
    assert!(cfg_vector_field(&model, &x, 0.2, &cond, 0.0, 0).unwrap().bits_eq(&vc));
}

#[test]
fn cfg_matches_extrapolation_and_is_affine() {
    let model = random_model(4);
    let mut rng = SeededRng::new(2, 0);
    let x = gaussian(16, 8, &mut rng);
    let cond = random_cond(&model, 16, &mut rng);
    let vc = model.vector_field(&x, 0.6, &cond, 0).unwrap();
    let vu = model.vector_field(&x, 0.6, &cond.null_like(), 0).unwrap();
    let half = cfg_vector_field(&model, &x, 0.6, &cond, 0.5, 0).unwrap();
    for k in 0..half.len() {
        let want = 1.5 * vc.as_slice()[k] - 0.5 * vu.as_slice()[k];
        assert_eq!(half.as_slice()[k].to_bits(), want.to_bits());
    }
    let one = cfg_vector_field(&model, &x, 0.6, &cond, 1.0, 0).unwrap();
    // out(0.5) must sit halfway between out(0) and out(1).
    for k in 0..half.len() {
        let mid = 0.5 * (vc.as_slice()[k] as f64 + one.as_slice()[k] as f64);
        let scale = vc.as_slice()[k].abs().max(one.as_slice()[k].abs()).max(1.0) as f64;
        assert!((half.as_slice()[k] as f64 - mid).abs() <= 1e-6 * scale);
    }
}

#[test]
fn cfg_fixed_point_when_condition_is_ignored() {
    let field = FieldFn(|x: &Matrix, t: f64, _c: &ConditionBundle| x.map(|v| v * t as f32 + 0.25));
    let model = random_model(0);
    let mut rng = SeededRng::new(3, 0);
    let x = gaussian(8, 8, &mut rng);
    let cond = random_cond(&model, 8, &mut rng);
    let branch = field.eval(&x, 0.7, &cond, 0).unwrap();
    for alpha in [0.5f32, 1.0, 3.0] {
        let out = cfg_vector_field(&field, &x, 0.7, &cond, alpha, 0).unwrap();
        for (a, b) in out.as_slice().iter().zip(branch.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}

#[test]
fn euler_integrates_constant_fields() {
    let mut rng = SeededRng::new(6, 0);
    let x0 = gaussian(8, 8, &mut rng);
    let c0 = gaussian(1, 8, &mut rng);
    let model = random_model(0);
    let cond = random_cond(&model, 8, &mut rng);
    let c = c0.clone();
    let field = FieldFn(move |x: &Matrix, _t: f64, _c: &ConditionBundle| {
        Matrix::from_fn(x.rows(), x.cols(), |_, j| c.get(0, j))
    });
    for steps in [1, 3, 10] {
        let sampler = SamplerConfig {
            steps,
            cfg_alpha: 0.0,
            seed: 0,
        };
        let out = euler_sample(&field, &x0, &cond, &sampler, 0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = x0.get(i, j) + c0.get(0, j);
                assert!((out.get(i, j) - want).abs() < 1e-5, "steps {steps}");
            }
        }
    }

    let x1 = gaussian(8, 8, &mut rng);
    let u = ot_target(&x0, &x1).unwrap();
    let planted = FieldFn(move |_x: &Matrix, _t: f64, _c: &ConditionBundle| u.clone());
    let one = SamplerConfig { steps: 1, cfg_alpha: 0.0, seed: 0 };
    let ten = SamplerConfig { steps: 10, cfg_alpha: 0.0, seed: 0 };
    let a = euler_sample(&planted, &x0, &cond, &one, 0).unwrap();
    let b = euler_sample(&planted, &x0, &cond, &ten, 0).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
    assert!(a.max_abs_diff(&x1) < 1e-5);
}

#[test]
fn reference_sampler_settings_run_and_repeat() {
    let model = random_model(5);
    let mut rng = SeededRng::new(7, 0);
    let cond = random_cond(&model, 32, &mut rng);
    let x0 = position_noise(0, 32, 8, 3);
    let sampler = SamplerConfig::default();
    assert_eq!((sampler.steps, sampler.cfg_alpha), (10, 0.5));
    let a = euler_sample(&model, &x0, &cond, &sampler, 0).unwrap();
    let b = euler_sample(&model, &x0, &cond, &sampler, 0).unwrap();
    assert!(a.all_finite());
    assert!(a.bits_eq(&b));
    let bad = SamplerConfig { steps: 0, ..sampler };
    assert!(matches!(euler_sample(&model, &x0, &cond, &bad, 0), Err(Error::Config(_))));
}

#[test]
fn nan_field_reports_the_step() {
    let field = FieldFn(|x: &Matrix, t: f64, _c: &ConditionBundle| {
        x.map(|_| if t > 0.25 { f32::NAN } else { 0.0 })
    });
    let model = random_model(0);
    let mut rng = SeededRng::new(8, 0);
    let cond = random_cond(&model, 8, &mut rng);
    let x0 = gaussian(8, 8, &mut rng);
    let sampler = SamplerConfig { steps: 4, cfg_alpha: 0.0, seed: 0 };
    match euler_sample(&field, &x0, &cond, &sampler, 0) {
        Err(Error::Numerical { location }) => assert_eq!(location, "euler step 2"),
        other => panic!("unexpected {other:?}"),
    }
}

fn tiny_corpus() -> Corpus {
    Corpus::generate(&CorpusConfig {
        num_utterances: 12,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_params_untouched() {
    let corpus = tiny_corpus();
    let mut model = Model::init(ModelConfig::tiny(), 1).unwrap();
    let before = model.params.clone();
    let config = TrainConfig {
        steps: 3,
        learning_rate: 0.0,
        batch_frames: 32,
        ..TrainConfig::default()
    };
    train_loop(&mut model, &corpus.utterances, &config, 0, |_| {}).unwrap();
    assert!(model.params.bits_eq(&before));
}

#[test]
fn training_is_reproducible_and_logs_the_trace() {
    let corpus = tiny_corpus();
    let config = TrainConfig {
        steps: 6,
        batch_frames: 48,
        log_every: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::init(ModelConfig::tiny(), 2).unwrap();
        let report = train_loop(&mut model, &corpus.utterances, &config, 5, |_| {}).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert!(m1.params.bits_eq(&m2.params));
    let steps: Vec<usize> = r1.trace.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![0, 4, 5]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, &r1.trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,loss\n0,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn divergence_needs_a_sustained_blowup() {
    let mut monitor = DivergenceMonitor::default();
    monitor.observe(0, 1.0).unwrap();
    for step in 1..100 {
        monitor.observe(step, 50.0).unwrap();
    }
    monitor.observe(100, 2.0).unwrap();
    for step in 101..200 {
        monitor.observe(step, 11.0).unwrap();
    }
    assert!(matches!(monitor.observe(200, 11.0), Err(Error::Diverged { step: 200, .. })));
}

#[test]
fn time_sampler_parses_cli_names() {
    assert_eq!("uniform".parse::<TimeSampler>().unwrap(), TimeSampler::Uniform);
    assert_eq!("logitnormal".parse::<TimeSampler>().unwrap(), TimeSampler::default());
    assert!("beta".parse::<TimeSampler>().is_err());
}

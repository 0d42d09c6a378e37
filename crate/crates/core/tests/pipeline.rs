//! End-to-end: generate, train, checkpoint, evaluate.

use fairflow::datagen::{generate, DatasetBundle, GeneratorConfig};
use fairflow::encoder::{EncoderConfig, Model};
use fairflow::eval::{evaluate, MetricsRecord};
use fairflow::harness::{ablation_specs, run_many, RunSpec};
use fairflow::train::{train, Event, NullSink, RunDirs, TrainConfig, Trainer};

fn bundle() -> DatasetBundle {
    generate(&GeneratorConfig {
        n_train: 320,
        n_id: 60,
        n_stress: 60,
        n_ood: 60,
        n_transfer: 60,
        ..Default::default()
    })
    .unwrap()
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 2,
        d_ff: 16,
        vocab_size: 46,
        ..Default::default()
    }
}

fn views() -> Vec<fairflow::perturb::PerturbationSpec> {
    ["shuffle", "drop_constituent:1", "drop_constituent:2", "fractional_drop:0.5", "layer_truncate:1", "rep_zero:0.9"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        branches: views(),
        eval_views: views(),
        ..Default::default()
    }
}

fn strip_clock(mut r: MetricsRecord) -> MetricsRecord {
    r.wall_clock_s = 0.0;
    r
}

#[test]
fn identical_config_gives_identical_metrics() {
    let b = bundle();
    let evals = [("id", &b.id_test[..]), ("stress", &b.stress_test[..])];
    let run = || train::<f64>(&encoder(), &config(), &b.train, &evals, &mut NullSink, &RunDirs::default()).unwrap();
    let (x, y) = (run(), run());
    let a: Vec<_> = x.history.into_iter().map(strip_clock).collect();
    let c: Vec<_> = y.history.into_iter().map(strip_clock).collect();
    assert_eq!(a, c);
}

#[test]
fn checkpoint_and_stripped_model_evaluate_identically() {
    let b = bundle();
    let out = train::<f64>(&encoder(), &config(), &b.train, &[], &mut NullSink, &RunDirs::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.model.save(dir.path()).unwrap();
    let loaded = Model::<f64>::load(dir.path()).unwrap();
    let mut stripped = loaded.clone();
    stripped.strip_branches();
    let full = evaluate(&out.model, "ood", &b.ood_test, &views(), 0, 32, 0, 0.0).unwrap();
    let re = evaluate(&loaded, "ood", &b.ood_test, &views(), 0, 32, 0, 0.0).unwrap();
    let st = evaluate(&stripped, "ood", &b.ood_test, &views(), 0, 32, 0, 0.0).unwrap();
    assert_eq!(full, re);
    assert_eq!((full.accuracy, full.f1, full.tv_uniform, full.ce), (st.accuracy, st.f1, st.tv_uniform, st.ce));
}

#[test]
fn loss_decomposes_every_step() {
    let b = bundle();
    for lambda in [0.0, 0.1, 2.5] {
        let mut cfg = config();
        cfg.debias.lambda = lambda;
        let mut t = Trainer::<f64>::new(encoder(), cfg, 20).unwrap();
        for (step, chunk) in b.train.chunks(16).take(5).enumerate() {
            let batch: Vec<_> = chunk.iter().collect();
            let ids: Vec<usize> = (step * 16..step * 16 + chunk.len()).collect();
            let l = t.train_step(&batch, &ids, 0).unwrap();
            assert!((l.total - (l.ce + lambda * l.debias)).abs() <= 1e-9, "{l:?}");
        }
    }
}

#[test]
fn single_precision_trains() {
    let b = bundle();
    let mut events = Vec::new();
    let out = train::<f32>(&encoder(), &config(), &b.train, &[("id", &b.id_test[..])], &mut events, &RunDirs::default()).unwrap();
    assert_eq!(out.epochs.len(), 2);
    assert!(out.epochs.iter().all(|e| e.total.is_finite()));
    assert_eq!(events.iter().filter(|e| matches!(e, Event::Eval { .. })).count(), 2);
}

#[test]
fn ablation_runs_every_configuration() {
    let b = bundle();
    let mut cfg = config();
    cfg.epochs = 1;
    cfg.branches = views()[..2].to_vec();
    let base = RunSpec {
        name: "a".into(),
        encoder: encoder(),
        train: cfg,
    };
    let specs = ablation_specs(&base);
    assert_eq!(specs.len(), 6);
    let res = run_many(&specs, &b.train, &[("stress", &b.stress_test[..])]).unwrap();
    assert_eq!(res.len(), 6);
    assert_eq!(res[0].branches.len(), 0);
    assert_eq!(res[3].branches.len(), 2);
    assert!(res.iter().all(|r| r.metrics["stress"].n == 60));
}

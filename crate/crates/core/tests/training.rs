use hapo_core::metrics::read_metrics;
use hapo_core::run::METRICS_FILE;
use hapo_core::{run, Algo, TrainConfig};

#[test]
fn default_hapo_learns_branching_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.algo, cfg.steps), (Algo::Hapo, 200));
    let summary = run(&cfg, dir.path()).unwrap();
    let success = summary.final_eval_sampled.unwrap();
    assert!(success >= 0.9, "final sampled success {success}");
}

#[test]
fn empty_component_set_tracks_dapo() {
    let base = TrainConfig {
        steps: 20,
        batch_size: 8,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ablated = TrainConfig {
        hapo_components: String::new(),
        ..base.clone()
    };
    let dapo = TrainConfig {
        algo: Algo::Dapo,
        ..base
    };
    run(&ablated, a.path()).unwrap();
    run(&dapo, b.path()).unwrap();
    let ma = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    let mb = read_metrics(&b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
}

mod common;

use dera::harness::metrics::read_rows;
use dera::harness::{train_ar, train_tokenizer, ArTrainOptions, MetricsRow, RunConfig, TeacherSpec, TrainOptions};
use dera::objective::LossWeights;
use dera::tokenizer::Checkpoint;

fn opts(dir: &std::path::Path, tag: &str) -> TrainOptions {
    TrainOptions {
        checkpoint: dir.join(format!("{tag}.dckp")),
        metrics: dir.join(format!("{tag}.csv")),
        ..Default::default()
    }
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run();
    train_tokenizer(&cfg, &opts(dir.path(), "a")).unwrap();
    train_tokenizer(&cfg, &opts(dir.path(), "b")).unwrap();
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(std::fs::read(dir.path().join("a.dckp")).unwrap(), std::fs::read(dir.path().join("b.dckp")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("step,loss_total,loss_rec,loss_vq,"));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { steps: 100, checkpoint_every: 25, eval_every: 50, ..common::tiny_run() };
    train_tokenizer(&cfg, &opts(dir.path(), "full")).unwrap();

    let mut split = opts(dir.path(), "split");
    split.stop_after = Some(50);
    assert_eq!(train_tokenizer(&cfg, &split).unwrap().step, 50);
    split.stop_after = None;
    split.resume = true;
    assert_eq!(train_tokenizer(&cfg, &split).unwrap().step, 100);

    let full = std::fs::read(dir.path().join("full.dckp")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("split.dckp")).unwrap(), full);
    assert_eq!(
        std::fs::read(dir.path().join("full.csv")).unwrap(),
        std::fs::read(dir.path().join("split.csv")).unwrap()
    );
}

#[test]
fn resume_drops_rows_logged_after_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { steps: 30, checkpoint_every: 10, ..common::tiny_run() };
    let o = opts(dir.path(), "r");
    train_tokenizer(&cfg, &TrainOptions { stop_after: Some(20), ..o.clone() }).unwrap();
    // Simulate a crash after step 20's checkpoint but with rows up to 20 logged:
    // roll the checkpoint back to step 10.
    let mut ten = opts(dir.path(), "ten");
    ten.stop_after = Some(10);
    train_tokenizer(&cfg, &ten).unwrap();
    std::fs::copy(&ten.checkpoint, &o.checkpoint).unwrap();
    train_tokenizer(&cfg, &TrainOptions { resume: true, ..o.clone() }).unwrap();
    let rows: Vec<MetricsRow> = read_rows(&o.metrics).unwrap();
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=30).collect::<Vec<_>>());
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let o = opts(dir.path(), "c");
    train_tokenizer(&RunConfig { steps: 3, ..common::tiny_run() }, &o).unwrap();
    let bytes = std::fs::read(&o.checkpoint).unwrap();
    let again = dir.path().join("again.dckp");
    Checkpoint::load(&o.checkpoint).unwrap().save(&again).unwrap();
    assert_eq!(std::fs::read(again).unwrap(), bytes);
}

#[test]
fn zero_alignment_weights_equal_the_no_teacher_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig { steps: 12, ..common::tiny_run() };
    let zero = RunConfig { loss: LossWeights { lambda_a: 0.0, lambda_m: 0.0, ..base.loss.clone() }, ..base.clone() };
    let none = RunConfig { teacher: TeacherSpec::None, ..base };
    let a = train_tokenizer(&zero, &opts(dir.path(), "zero")).unwrap();
    let b = train_tokenizer(&none, &opts(dir.path(), "none")).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits(), "step {}", x.step);
        assert_eq!(x.loss_rec.to_bits(), y.loss_rec.to_bits(), "step {}", x.step);
        assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits(), "step {}", x.step);
    }
}

#[test]
fn generator_training_reuses_its_token_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { steps: 4, ..common::tiny_run() };
    let tok = opts(dir.path(), "tok");
    train_tokenizer(&cfg, &tok).unwrap();
    let ar = |tag: &str| ArTrainOptions {
        tokenizer_ckpt: tok.checkpoint.clone(),
        checkpoint: dir.path().join(format!("{tag}.dckp")),
        metrics: dir.path().join(format!("{tag}.csv")),
        cache: Some(dir.path().join("tokens.dtok")),
    };
    let first = train_ar(&cfg, &ar("ar1")).unwrap();
    let cached = std::fs::read(dir.path().join("tokens.dtok")).unwrap();
    let second = train_ar(&cfg, &ar("ar2")).unwrap();
    assert!(!first.cache_reused && second.cache_reused);
    assert_eq!(std::fs::read(dir.path().join("tokens.dtok")).unwrap(), cached);
    assert_eq!(first.rows, second.rows);
    assert_eq!(
        std::fs::read(dir.path().join("ar1.dckp")).unwrap(),
        std::fs::read(dir.path().join("ar2.dckp")).unwrap()
    );
}

#[test]
fn generator_rejects_a_mismatched_tokenizer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { steps: 2, ..common::tiny_run() };
    let tok = opts(dir.path(), "tok");
    train_tokenizer(&cfg, &tok).unwrap();
    let mut other = cfg.clone();
    other.tokenizer.k = 32;
    other.ar.k = 32;
    let err = train_ar(
        &other,
        &ArTrainOptions {
            tokenizer_ckpt: tok.checkpoint.clone(),
            checkpoint: dir.path().join("ar.dckp"),
            metrics: dir.path().join("ar.csv"),
            cache: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, dera::Error::Config(_)), "{err}");
}

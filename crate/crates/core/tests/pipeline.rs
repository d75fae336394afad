use std::cell::Cell;
use std::fs;
use std::path::Path;

use avsl_core::dataio::{AVClip, SyntheticSpec};
use avsl_core::evalkit::EvalMode;
use avsl_core::guidance::CaptionClient;
use avsl_core::pipeline::*;
use avsl_core::Result;
use proptest::prelude::*;

fn small_config(dir: &Path, n_clips: usize) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        ..Default::default()
    };
    cfg.dataset.synthetic.n_clips = n_clips;
    cfg.train.batch_size = 4;
    cfg.train.max_steps = Some(3);
    cfg
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).map(|t| t.lines().count()).unwrap_or(0)
}

struct CountingClient {
    calls: Cell<usize>,
    /// Clips whose every response is malformed.
    broken: Vec<String>,
}

impl CaptionClient for CountingClient {
    fn model(&self) -> &str {
        "stub-mllm"
    }

    fn generate(&self, clip: &AVClip, _prompt: &str) -> Result<String> {
        self.calls.set(self.calls.get() + 1);
        if self.broken.contains(&clip.clip_id) {
            return Ok("I cannot see any objects.".into());
        }
        let fg: Vec<String> = clip.class_labels.iter().map(|c| format!("a {c}")).collect();
        Ok(serde_json::json!({"foreground": fg, "background": "a grey wall"}).to_string())
    }
}

#[test]
fn fixture_captioning_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 100);
    let client = CountingClient {
        calls: Cell::new(0),
        broken: Vec::new(),
    };
    let first = cmd_caption(&cfg, Some(&client)).unwrap();
    assert_eq!(first.generated, 100);
    assert_eq!(line_count(&cfg.cache_path()), 100);
    assert_eq!(client.calls.get(), 0);

    let again = cmd_caption(&cfg, Some(&client)).unwrap();
    assert_eq!((again.generated, again.cached), (0, 100));
    assert_eq!(line_count(&cfg.cache_path()), 100);
}

#[test]
fn malformed_responses_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 100);
    cfg.guidance.mode = GuidanceMode::Client;
    cfg.guidance.model = "stub-mllm".into();
    let source = ClipSource::from_config(&cfg.dataset).unwrap();
    let broken = vec![source.clip_id(17), source.clip_id(58)];
    let client = CountingClient {
        calls: Cell::new(0),
        broken: broken.clone(),
    };
    let report = cmd_caption(&cfg, Some(&client)).unwrap();
    assert_eq!(report.generated, 98);
    assert_eq!(line_count(&cfg.cache_path()), 98);
    let flagged: Vec<String> = report.flagged.iter().map(|(id, _)| id.clone()).collect();
    assert_eq!(flagged, broken);
    assert_eq!(client.calls.get(), 98 + 2 * 3);

    // Training skips the clips without captions.
    let summary = cmd_train(&cfg).unwrap();
    assert_eq!(summary.n_clips, 98);
    assert_eq!(summary.excluded_clips, broken);
}

#[test]
fn train_without_captions_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 8);
    let err = cmd_train(&cfg).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let mut cfg = RunConfig::default();
    cfg.dataset.synthetic.n_clips = 8;
    cfg.train.batch_size = 4;
    cfg.loss.lambda1 = 0.0;
    cfg.loss.lambda2 = 0.0;
    let preparer = Preparer::new(&cfg.encoder, &cfg.audio).unwrap();
    let data = ClipSource::from_config(&cfg.dataset).unwrap().prepare_all(&preparer).unwrap();
    let (model, logs) = train_in_memory(&cfg, &data, &fixture_caption_set(&data), 5, |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 5);
    assert_eq!(model, Model::new(&cfg.encoder).unwrap());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = |dir: &Path| {
        let cfg = small_config(dir, 12);
        cmd_caption(&cfg, None).unwrap();
        let summary = cmd_train(&cfg).unwrap();
        let log = fs::read_to_string(&summary.log_path).unwrap();
        let report = cmd_eval(&cfg, Some(&summary.checkpoint), EvalMode::Single).unwrap();
        (log, report.to_json().unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (log_a, rep_a) = run(a.path());
    let (log_b, rep_b) = run(b.path());
    assert_eq!(log_a.lines().count(), 3);
    assert_eq!(log_a, log_b);
    assert_eq!(rep_a, rep_b);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 12);
    cmd_caption(&cfg, None).unwrap();
    let summary = cmd_train(&cfg).unwrap();
    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.config, cfg);
    let copy = dir.path().join("copy.json");
    ck.save(&copy).unwrap();
    assert_eq!(Checkpoint::load(&copy).unwrap(), ck);

    let mut other = cfg.clone();
    other.encoder.feature_channels = 8;
    assert!(cmd_eval(&other, Some(&summary.checkpoint), EvalMode::Single).is_err());
}

#[test]
fn oracle_heatmaps_score_perfectly() {
    let spec = SyntheticSpec {
        n_clips: 6,
        duet: true,
        ..Default::default()
    };
    let cfg = RunConfig::default();
    let preparer = Preparer::new(&cfg.encoder, &cfg.audio).unwrap();
    let clips = ClipSource::Synthetic(spec).prepare_all(&preparer).unwrap();
    let preds: Vec<_> = clips.iter().map(|c| Some(oracle_prediction(c))).collect();
    let report = evaluate_predictions(&clips, &preds, EvalMode::Multi, &cfg.eval).unwrap();
    assert_eq!(report.ciou_at_03, Some(1.0));

    // A missing prediction is flagged and scored as a failure.
    let mut partial = preds.clone();
    partial[0] = None;
    let report = evaluate_predictions(&clips, &partial, EvalMode::Multi, &cfg.eval).unwrap();
    assert!((report.ciou_at_03.unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn visualize_writes_files_and_lists_missing_clips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 4);
    cfg.dataset.synthetic.duet = true;
    let out = dir.path().join("vis");
    let ids = vec!["duet_00001".to_string(), "nope".to_string()];
    let report = cmd_visualize(&cfg, None, &ids, &out).unwrap();
    assert_eq!(report.missing, vec!["nope".to_string()]);
    assert_eq!(report.written.len(), 2);
    for s in &report.written {
        assert!(s.heatmap.exists() && s.overlay.exists());
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2 * 2 + 2);
}

#[test]
fn training_lowers_the_loss() {
    let mut cfg = RunConfig::default();
    cfg.dataset.synthetic.n_clips = 64;
    cfg.optimizer.lr = 1e-3;
    let preparer = Preparer::new(&cfg.encoder, &cfg.audio).unwrap();
    let data = ClipSource::from_config(&cfg.dataset).unwrap().prepare_all(&preparer).unwrap();
    let (_, logs) = train_in_memory(&cfg, &data, &fixture_caption_set(&data), 200, |_, _| Ok(())).unwrap();
    let mean = |s: &[StepLog]| s.iter().map(|l| l.l_total).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&logs[..20]), mean(&logs[180..]));
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn config_toml_round_trip() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").unwrap_err().is_validation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn planned_steps_respects_the_cap(n in 1usize..500, bs in 1usize..64, epochs in 1usize..5, cap in 1usize..400) {
        let train = TrainConfig { batch_size: bs, epochs, max_steps: Some(cap), checkpoint_every: 0 };
        let steps = planned_steps(n, &train);
        prop_assert!(steps <= cap);
        prop_assert_eq!(steps, cap.min(n.div_ceil(bs) * epochs));
    }
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::load(&root.join("desk.toml")).unwrap();
    assert_eq!(planned_steps(desk.dataset.synthetic.n_clips, &desk.train), 500);
    let eval = RunConfig::load(&root.join("desk_eval.toml")).unwrap();
    assert_eq!(eval.encoder, desk.encoder);
}

//! End-to-end properties of the three training stages on a tiny dataset:
//! determinism, resume equivalence and stage isolation.

use std::path::Path;

use duskforge::checkpoint::Checkpoint;
use duskforge::cli::load_split;
use duskforge::config::{Config, Settings, StageSettings};
use duskforge::darken::Darkener;
use duskforge::data::shapescenes::generate;
use duskforge::data::Dataset;
use duskforge::model::AdaptationModel;
use duskforge::tensor::Real;
use duskforge::train::{adapt, make_darkener, pretrain_day, train_darkener, RunLog};

fn tiny(root: &Path, extra: &[(&str, &str)]) -> Settings {
    let mut c = Config::default();
    for (k, v) in [
        ("data.root", root.to_str().unwrap()),
        ("data.num_classes", "3"),
        ("data.image_size", "16"),
        ("data.train_per_class", "6"),
        ("data.val_per_class", "2"),
        ("data.test_per_class", "2"),
        ("model.widths", "4,6"),
        ("model.head_hidden", "8"),
        ("model.head_out", "6"),
        ("darkener.widths", "4,4"),
        ("train.batch_size", "4"),
        ("pretrain.steps", "6"),
        ("pretrain.eval_every", "3"),
        ("stage1.steps", "6"),
        ("stage2.steps", "6"),
        ("eval.batch_size", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    for (k, v) in extra {
        c.set(k, *v).unwrap();
    }
    c.settings().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    s: Settings,
    train: Dataset<Real>,
    val: Dataset<Real>,
}

fn fixture(extra: &[(&str, &str)]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let s = tiny(dir.path(), extra);
    generate(&s.scenes, 3, dir.path()).unwrap();
    let train = load_split(dir.path(), "train").unwrap();
    let val = load_split(dir.path(), "val").unwrap();
    Fixture { _dir: dir, s, train, val }
}

fn day_model(f: &Fixture) -> AdaptationModel<Real> {
    pretrain_day(&f.s, &f.train, &f.val, None, &mut RunLog::in_memory()).unwrap().model
}

fn learned(f: &Fixture, day: &AdaptationModel<Real>) -> Darkener<Real> {
    let out = train_darkener(&f.s, day, &f.train, None, &mut RunLog::in_memory()).unwrap();
    let mut ck = Checkpoint::new();
    out.darkener.save_into(&mut ck);
    make_darkener(&f.s, Some(&ck)).unwrap()
}

fn stopped_at(f: &Fixture, k: usize) -> Settings {
    Settings {
        stop_at: Some(k),
        ..f.s.clone()
    }
}

#[test]
fn identical_runs_give_identical_logs() {
    let f = fixture(&[]);
    let mut a = RunLog::in_memory();
    let mut b = RunLog::in_memory();
    let ma = pretrain_day(&f.s, &f.train, &f.val, None, &mut a).unwrap();
    let mb = pretrain_day(&f.s, &f.train, &f.val, None, &mut b).unwrap();
    assert_eq!(a.lines(), b.lines());
    assert_eq!(ma.model.online_fingerprint(), mb.model.online_fingerprint());

    let (mut da, mut db) = (RunLog::in_memory(), RunLog::in_memory());
    train_darkener(&f.s, &ma.model, &f.train, None, &mut da).unwrap();
    train_darkener(&f.s, &ma.model, &f.train, None, &mut db).unwrap();
    assert_eq!(da.lines(), db.lines());

    let dk = learned(&f, &ma.model);
    let (mut sa, mut sb) = (RunLog::in_memory(), RunLog::in_memory());
    adapt(&f.s, ma.model.clone(), dk.clone(), &f.train, None, &mut sa).unwrap();
    adapt(&f.s, ma.model.clone(), dk, &f.train, None, &mut sb).unwrap();
    assert_eq!(sa.lines(), sb.lines());
    assert!(sa.lines().iter().all(|l| l.contains("l_sim_f")));
}

#[test]
fn first_pretrain_loss_is_near_uniform() {
    let f = fixture(&[]);
    let out = pretrain_day(&f.s, &f.train, &f.val, None, &mut RunLog::in_memory()).unwrap();
    let l0 = out.first.unwrap().l_task.unwrap();
    assert!((l0 - 3f64.ln()).abs() < 0.5, "{l0}");
}

#[test]
fn pretrain_resume_matches_uninterrupted() {
    let f = fixture(&[]);
    let mut full_log = RunLog::in_memory();
    let full = pretrain_day(&f.s, &f.train, &f.val, None, &mut full_log).unwrap();
    for k in [1, 3, 4] {
        let mut log = RunLog::in_memory();
        let stopped = pretrain_day(&stopped_at(&f, k), &f.train, &f.val, None, &mut log).unwrap();
        let state = Checkpoint::from_bytes(&stopped.state.unwrap().to_bytes()).unwrap();
        let resumed = pretrain_day(&f.s, &f.train, &f.val, Some(&state), &mut log).unwrap();
        assert_eq!(resumed.model.online_fingerprint(), full.model.online_fingerprint(), "k = {k}");
        assert_eq!(resumed.best_val_top1, full.best_val_top1);
        assert_eq!(log.lines(), full_log.lines());
    }
}

#[test]
fn darkener_resume_matches_uninterrupted() {
    let f = fixture(&[]);
    let day = day_model(&f);
    let mut full_log = RunLog::in_memory();
    let full = train_darkener(&f.s, &day, &f.train, None, &mut full_log).unwrap();
    let mut log = RunLog::in_memory();
    let stopped = train_darkener(&stopped_at(&f, 2), &day, &f.train, None, &mut log).unwrap();
    let state = Checkpoint::from_bytes(&stopped.state.unwrap().to_bytes()).unwrap();
    let resumed = train_darkener(&f.s, &day, &f.train, Some(&state), &mut log).unwrap();
    assert_eq!(resumed.darkener.params.fingerprint(), full.darkener.params.fingerprint());
    assert_eq!(log.lines(), full_log.lines());
}

fn adapted_fingerprint(m: &AdaptationModel<Real>) -> Vec<u64> {
    vec![
        m.online_fingerprint(),
        m.head_q.fingerprint(),
        m.head_z.fingerprint(),
        m.target_extractor.fingerprint(),
        m.target_bn.fingerprint(),
        m.target_q.fingerprint(),
    ]
}

#[test]
fn adapt_resume_matches_uninterrupted() {
    for mode in ["stepwise", "alternating"] {
        let f = fixture(&[("stage2.mode", mode), ("stage2.block", "2")]);
        let day = day_model(&f);
        let dk = learned(&f, &day);
        let mut full_log = RunLog::in_memory();
        let full = adapt(&f.s, day.clone(), dk.clone(), &f.train, None, &mut full_log).unwrap();
        let mut log = RunLog::in_memory();
        let stopped = adapt(&stopped_at(&f, 3), day.clone(), dk.clone(), &f.train, None, &mut log).unwrap();
        let state = Checkpoint::from_bytes(&stopped.state.unwrap().to_bytes()).unwrap();
        let resumed = adapt(&f.s, day.clone(), dk, &f.train, Some(&state), &mut log).unwrap();
        assert_eq!(adapted_fingerprint(&resumed.model), adapted_fingerprint(&full.model), "{mode}");
        assert_eq!(resumed.darkener.fingerprint(), full.darkener.fingerprint(), "{mode}");
        assert_eq!(log.lines(), full_log.lines(), "{mode}");
    }
}

#[test]
fn stages_leave_frozen_parameters_untouched() {
    let f = fixture(&[]);
    let day = day_model(&f);
    let before = adapted_fingerprint(&day);
    let out = train_darkener(&f.s, &day, &f.train, None, &mut RunLog::in_memory()).unwrap();
    assert_eq!(adapted_fingerprint(&day), before);
    let untrained = Settings {
        stage1: StageSettings { steps: 0, ..f.s.stage1 },
        ..f.s.clone()
    };
    let fresh = train_darkener(&untrained, &day, &f.train, None, &mut RunLog::in_memory()).unwrap();
    assert_ne!(out.darkener.params.fingerprint(), fresh.darkener.params.fingerprint());

    let mut ck = Checkpoint::new();
    out.darkener.save_into(&mut ck);
    let dk = make_darkener(&f.s, Some(&ck)).unwrap();
    let dk_before = dk.fingerprint();
    let adapted = adapt(&f.s, day.clone(), dk, &f.train, None, &mut RunLog::in_memory()).unwrap();
    assert_eq!(adapted.darkener.fingerprint(), dk_before);
    assert_ne!(adapted.model.online_fingerprint(), day.online_fingerprint());
}

#[test]
fn alternating_mode_trains_both_players() {
    let f = fixture(&[("stage2.mode", "alternating"), ("stage2.block", "2")]);
    let day = day_model(&f);
    let dk = learned(&f, &day);
    let before = dk.fingerprint();
    let mut log = RunLog::in_memory();
    let out = adapt(&f.s, day.clone(), dk, &f.train, None, &mut log).unwrap();
    assert_ne!(out.darkener.fingerprint(), before);
    assert_ne!(out.model.online_fingerprint(), day.online_fingerprint());
    // Steps 0-1 and 4-5 train the darkener, 2-3 the model.
    assert!(log.lines()[0].contains("\"l_sim_d\":"));
    assert!(log.lines()[2].contains("\"l_sim_f\":"));
}

#[test]
fn heuristic_darkener_adapts_without_checkpoint() {
    let f = fixture(&[("curve.family", "gamma_correction")]);
    let day = day_model(&f);
    let dk = make_darkener(&f.s, None).unwrap();
    let out = adapt(&f.s, day.clone(), dk, &f.train, None, &mut RunLog::in_memory()).unwrap();
    assert!(out.last.unwrap().total.is_finite());
}

#[test]
fn day_checkpoint_reload_matches_in_memory_model() {
    let f = fixture(&[]);
    let day = day_model(&f);
    let mut ck = Checkpoint::new();
    day.save_day(&mut ck);
    let mut loaded = duskforge::train::init_model(&f.s).unwrap();
    loaded.load(&ck).unwrap();
    assert_eq!(adapted_fingerprint(&loaded), adapted_fingerprint(&day));
    // The target starts as a copy of the pretrained online branch.
    assert_eq!(day.target_extractor.fingerprint(), day.extractor.fingerprint());
}

use std::fs;

use mnsp_core::autograd::Tape;
use mnsp_core::data::render::{synth_corpus, RenderStyle};
use mnsp_core::data::{build_views, ViewFlags};
use mnsp_core::pretrain::engine::{CHECKPOINT_DIR, EMERGENCY_DIR, METRICS_FILE};
use mnsp_core::pretrain::step::ENCODER_PREFIX;
use mnsp_core::pretrain::{
    compute_targets, pretrain_step, read_metrics, run_pretraining, sample_losses, AdamW, RunOptions, TeacherMode,
    Trainer,
};
use mnsp_core::rng::rng_from;
use mnsp_core::{Checkpoint, Error, Matrix, ParamStore, RunConfig, TextSample};

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.seed = 7;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.epochs = 50;
    cfg.pretrain.base_lr = 1e-3;
    cfg
}

/// 8 images, batch 4, 3 epochs with 1 warm-up epoch: 6 steps, 2 of warm-up.
fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.seed = seed;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.epochs = 3;
    cfg.pretrain.warmup_epochs = 1;
    cfg.pretrain.base_lr = 1e-3;
    cfg
}

fn small_corpus() -> Vec<TextSample> {
    synth_corpus(8, 17, &RenderStyle::default()).unwrap()
}

fn arrays(store: &ParamStore, prefix: &str) -> Vec<(String, Matrix)> {
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(_, n, v)| (n.to_string(), v.clone()))
        .collect()
}

#[test]
fn tiny_profile_overfits_64_images() {
    let corpus = synth_corpus(64, 3, &RenderStyle::default()).unwrap();
    let cfg = overfit_config();
    let out = run_pretraining(&corpus, &cfg, RunOptions::default()).unwrap();
    let at = |s: u64| out.metrics.iter().find(|r| r.step == s).unwrap().losses.total;
    assert_eq!(out.plan.total_steps, 200);
    assert!(at(200) < 0.25 * at(10), "{} vs {}", at(200), at(10));
}

#[test]
fn fixed_bundle_with_frozen_teacher_is_fitted() {
    // One bundle, a teacher frozen at the initial weights, constant rate.
    let cfg = small_config(3);
    let corpus = small_corpus();
    let tr = Trainer::new(&cfg).unwrap();
    let bundle = build_views(&corpus[0], &cfg.scales, &mut rng_from(5), ViewFlags::default(), 0.8, 1).unwrap();
    let bundles = [bundle];
    let mut online = tr.online.clone();
    let mut opt = AdamW::new(&online, cfg.pretrain.optimizer);
    let first = pretrain_step(&bundles, &tr.model, &online, &tr.teacher, &cfg.pretrain).unwrap().losses.total;
    let mut last = first;
    for _ in 0..500 {
        let r = pretrain_step(&bundles, &tr.model, &online, &tr.teacher, &cfg.pretrain).unwrap();
        last = r.losses.total;
        opt.step(&mut online, &r.grads, 1e-3);
    }
    assert!(last < 0.1 * first, "{last} vs {first}");
}

#[test]
fn logged_total_is_the_sum_of_its_parts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1);
    let out = run_pretraining(&small_corpus(), &cfg, RunOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap();
    let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(logged.len(), 6);
    for (row, mem) in logged.iter().zip(&out.metrics) {
        let l = row.losses;
        assert!(l.nsp > 0.0 && l.mim > 0.0 && l.mla > 0.0);
        assert_eq!(l.total, l.nsp + l.mim + l.mla);
        assert_eq!(row, mem);
    }
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next(), Some("step,lr,nsp,mim,mla,total"));
    let steps: Vec<u64> = logged.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    // Linear warm-up over 2 steps, then cosine decay.
    assert_eq!(logged[0].lr, 0.0);
    assert_eq!(logged[1].lr, 5e-4);
    assert_eq!(logged[2].lr, 1e-3);
}

#[test]
fn disabling_alignment_zeroes_its_column() {
    let mut cfg = small_config(1);
    cfg.pretrain.flags.mla = false;
    let out = run_pretraining(&small_corpus(), &cfg, RunOptions { stop_after: Some(3), ..Default::default() }).unwrap();
    for r in &out.metrics {
        assert_eq!(r.losses.mla, 0.0);
        assert_eq!(r.losses.total, r.losses.nsp + r.losses.mim);
    }
}

#[test]
fn teacher_receives_no_gradient_and_never_moves() {
    let mut cfg = small_config(2);
    cfg.pretrain.teacher_mode = TeacherMode::FrozenRandom;
    let corpus = small_corpus();
    let mut tr = Trainer::new(&cfg).unwrap();
    let before = arrays(&tr.teacher, "");
    assert_ne!(arrays(&tr.online, ENCODER_PREFIX), arrays(&tr.teacher, ENCODER_PREFIX));
    let plan = cfg.pretrain.plan(corpus.len()).unwrap();
    for _ in 0..plan.total_steps {
        tr.train_step(&corpus, &plan).unwrap();
    }
    assert_eq!(arrays(&tr.teacher, ""), before);

    // On the online tape the teacher's outputs are constants.
    let bundle = &tr.batch_views(&corpus, &plan, 0).unwrap()[0];
    let targets = compute_targets(&tr.model, &tr.teacher, bundle, &cfg.pretrain).unwrap();
    let mut t = Tape::new(&tr.online);
    let vars = sample_losses(&mut t, &tr.model, bundle, &targets, &cfg.pretrain).unwrap();
    let g = t.backward(vars.total);
    for target in vars.targets.into_iter().flatten() {
        let norm: f64 = g.wrt(target).map_or(0.0, |m| m.iter().map(|v| v * v).sum());
        assert_eq!(norm, 0.0);
    }
}

#[test]
fn warmup_snapshot_replaces_the_teacher_exactly_once() {
    let cfg = small_config(4);
    let corpus = small_corpus();
    let plan = cfg.pretrain.plan(corpus.len()).unwrap();
    assert_eq!((plan.total_steps, plan.warmup_steps), (6, 2));
    let mut tr = Trainer::new(&cfg).unwrap();
    let initial = arrays(&tr.online, ENCODER_PREFIX);
    assert_eq!(arrays(&tr.teacher, ENCODER_PREFIX), initial);

    tr.train_step(&corpus, &plan).unwrap();
    assert_eq!(arrays(&tr.teacher, ENCODER_PREFIX), initial);
    tr.train_step(&corpus, &plan).unwrap();
    let snapshot = arrays(&tr.online, ENCODER_PREFIX);
    assert_ne!(snapshot, initial);
    assert_eq!(arrays(&tr.teacher, ENCODER_PREFIX), snapshot);
    tr.train_step(&corpus, &plan).unwrap();
    assert_eq!(arrays(&tr.teacher, ENCODER_PREFIX), snapshot);
    assert_ne!(arrays(&tr.online, ENCODER_PREFIX), snapshot);
}

#[test]
fn guidance_only_changes_the_masked_branch() {
    let corpus = small_corpus();
    let guided = small_config(5);
    let mut unguided = guided.clone();
    unguided.pretrain.flags.guidance = false;
    let (a, b) = (Trainer::new(&guided).unwrap(), Trainer::new(&unguided).unwrap());
    let plan = guided.pretrain.plan(corpus.len()).unwrap();
    let bundles = a.batch_views(&corpus, &plan, 0).unwrap();
    assert_eq!(bundles, b.batch_views(&corpus, &plan, 0).unwrap());
    let la = pretrain_step(&bundles, &a.model, &a.online, &a.teacher, &guided.pretrain).unwrap().losses;
    let lb = pretrain_step(&bundles, &b.model, &b.online, &b.teacher, &unguided.pretrain).unwrap().losses;
    assert_eq!(la.nsp, lb.nsp);
    assert_eq!(la.mla, lb.mla);
    assert_ne!(la.mim, lb.mim);
}

#[test]
fn masked_loss_reaches_the_next_scale_decoder_only_when_guided() {
    let corpus = small_corpus();
    let mut cfg = small_config(6);
    cfg.pretrain.flags.mla = false;
    for guided in [true, false] {
        cfg.pretrain.flags.guidance = guided;
        let tr = Trainer::new(&cfg).unwrap();
        let plan = cfg.pretrain.plan(corpus.len()).unwrap();
        let bundle = &tr.batch_views(&corpus, &plan, 0).unwrap()[0];
        let targets = compute_targets(&tr.model, &tr.teacher, bundle, &cfg.pretrain).unwrap();
        let mut t = Tape::new(&tr.online);
        let vars = sample_losses(&mut t, &tr.model, bundle, &targets, &cfg.pretrain).unwrap();
        let g = t.backward(vars.mim.unwrap());
        let norm = g.params().norm_with_prefix(&tr.online, "nsp_decoder.");
        if guided {
            assert!(norm > 1e-10, "guided norm {norm}");
        } else {
            assert_eq!(norm, 0.0);
        }
    }
}

#[test]
fn identical_seeds_write_identical_metrics() {
    let corpus = small_corpus();
    let cfg = small_config(8);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_pretraining(&corpus, &cfg, RunOptions { out_dir: Some(d.path()), stop_after: Some(4), ..Default::default() })
            .unwrap();
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join(METRICS_FILE)).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    let params = |d: &tempfile::TempDir| fs::read(d.path().join(CHECKPOINT_DIR).join("params.bin")).unwrap();
    assert_eq!(params(&dirs[0]), params(&dirs[1]));

    let mut other = cfg.clone();
    other.seed = 9;
    let third = tempfile::tempdir().unwrap();
    run_pretraining(&corpus, &other, RunOptions { out_dir: Some(third.path()), stop_after: Some(4), ..Default::default() })
        .unwrap();
    assert_ne!(read(&dirs[0]), read(&third));
}

#[test]
fn resumed_runs_match_an_unbroken_run() {
    let corpus = small_corpus();
    let cfg = small_config(10);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_pretraining(&corpus, &cfg, RunOptions { out_dir: Some(full_dir.path()), ..Default::default() }).unwrap();

    // Interrupt once inside warm-up (teacher not yet snapshotted) and once after.
    for stop in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let first = run_pretraining(
            &corpus,
            &cfg,
            RunOptions { out_dir: Some(dir.path()), stop_after: Some(stop), ..Default::default() },
        )
        .unwrap();
        assert_eq!(first.metrics.len() as u64, stop);
        let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(ckpt.step, stop);
        let rest = run_pretraining(&corpus, &cfg, RunOptions { out_dir: Some(dir.path()), resume: Some(ckpt), ..Default::default() })
            .unwrap();
        assert_eq!(rest.metrics.len() as u64, 6 - stop);
        for (r, u) in rest.metrics.iter().zip(&full.metrics[stop as usize..]) {
            assert_eq!(r.step, u.step);
            for (a, b) in [
                (r.losses.nsp, u.losses.nsp),
                (r.losses.mim, u.losses.mim),
                (r.losses.mla, u.losses.mla),
                (r.losses.total, u.losses.total),
            ] {
                assert!((a - b).abs() <= 1e-6, "step {}: {a} vs {b}", r.step);
            }
        }
        assert_eq!(
            fs::read(dir.path().join(METRICS_FILE)).unwrap(),
            fs::read(full_dir.path().join(METRICS_FILE)).unwrap(),
            "stitched metrics log differs after resuming at {stop}"
        );
    }
}

#[test]
fn checkpoint_teacher_is_loaded_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let source = Trainer::new(&small_config(11)).unwrap();
    source.checkpoint().save(&dir.path().join("src"), Default::default()).unwrap();

    let mut cfg = small_config(12);
    cfg.pretrain.teacher_mode = TeacherMode::LoadCheckpoint;
    cfg.pretrain.teacher_checkpoint = Some(dir.path().join("src"));
    let tr = Trainer::new(&cfg).unwrap();
    assert_eq!(arrays(&tr.teacher, ENCODER_PREFIX), arrays(&source.online, ENCODER_PREFIX));
    assert_ne!(arrays(&tr.online, ENCODER_PREFIX), arrays(&source.online, ENCODER_PREFIX));
}

#[test]
fn non_finite_loss_stops_with_an_emergency_checkpoint() {
    let mut corpus = small_corpus();
    for s in corpus.iter_mut() {
        s.image.data.iter_mut().for_each(|v| *v = f32::NAN);
    }
    let mut cfg = small_config(13);
    cfg.pretrain.flags.augment = false;
    let dir = tempfile::tempdir().unwrap();
    let err = run_pretraining(&corpus, &cfg, RunOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap_err();
    match err {
        Error::Numerical(msg) => assert!(msg.contains("grad_norm[encoder]"), "{msg}"),
        other => panic!("expected a numerical failure, got {other:?}"),
    }
    let ckpt = Checkpoint::load(&dir.path().join(EMERGENCY_DIR)).unwrap();
    assert_eq!(ckpt.step, 0);
    assert!(!dir.path().join(CHECKPOINT_DIR).exists());
    assert!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
}

#[test]
fn empty_corpus_is_an_input_error() {
    let err = run_pretraining(&[], &small_config(1), RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

use std::fs;

use mnsp_core::autograd::Tape;
use mnsp_core::data::render::{synth_corpus, RenderStyle};
use mnsp_core::pretrain::engine::{CHECKPOINT_DIR, METRICS_FILE};
use mnsp_core::pretrain::Trainer;
use mnsp_core::recognizer::{
    greedy_decode, load_recognizer, recognize_all, run_finetune, sequence_cross_entropy, word_accuracy, FinetuneInit,
    FinetuneOptions, FinetuneTrainer, DECODER_PREFIX,
};
use mnsp_core::rng::rng_from;
use mnsp_core::{Charset, Checkpoint, Error, Matrix, ParamStore, RunConfig};
use rand::Rng;

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.seed = 5;
    cfg.recognizer.batch_size = 8;
    cfg.recognizer.epochs = 75;
    cfg.recognizer.lr = 3e-3;
    cfg.recognizer.augment = false;
    cfg
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.seed = seed;
    cfg.recognizer.batch_size = 4;
    cfg.recognizer.epochs = 2;
    cfg.recognizer.lr = 1e-3;
    cfg
}

fn arrays(store: &ParamStore, prefix: &str) -> Vec<(String, Matrix)> {
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(_, n, v)| (n.to_string(), v.clone()))
        .collect()
}

#[test]
fn tiny_recognizer_memorizes_32_words() {
    let corpus = synth_corpus(32, 11, &RenderStyle::default()).unwrap();
    let cfg = overfit_config();
    let out = run_finetune(&corpus, &cfg, FinetuneInit::Scratch, FinetuneOptions { out_dir: None, stop_after: None })
        .unwrap();
    assert_eq!(out.metrics.len(), 300);
    let tr = FinetuneTrainer::new(&cfg, FinetuneInit::Resume(&out.checkpoint)).unwrap();
    let images: Vec<_> = corpus.iter().map(|s| s.image.clone()).collect();
    let preds = recognize_all(&tr.model, &tr.store, &images).unwrap();
    let labels: Vec<_> = corpus.iter().map(|s| s.label_str().to_string()).collect();
    assert_eq!(word_accuracy(&preds, &labels).unwrap(), 1.0, "{preds:?}");
}

#[test]
fn uniform_logits_cost_log_vocabulary_per_token() {
    let cs = Charset::default();
    assert_eq!(cs.class_count(), 39);
    let (_, target) = cs.teacher_forcing("word9", None).unwrap();
    let logits = Matrix::zeros((target.len(), 39));
    let (sum, count) = sequence_cross_entropy(&logits, &target, cs.pad()).unwrap();
    assert_eq!(count, 6);
    assert!((sum / count as f64 - 39f64.ln()).abs() < 1e-12);
    assert!((39f64.ln() - 3.664).abs() < 1e-3);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let cs = Charset::default();
    let (_, target) = cs.teacher_forcing("abc", None).unwrap();
    let logits = Matrix::from_shape_fn((target.len(), 39), |(i, j)| if j == target[i] { 60.0 } else { 0.0 });
    let (sum, _) = sequence_cross_entropy(&logits, &target, cs.pad()).unwrap();
    assert!(sum < 1e-20);
}

#[test]
fn pad_logits_do_not_affect_the_loss() {
    let cs = Charset::default();
    let (_, target) = cs.teacher_forcing("pad", Some(10)).unwrap();
    let mut rng = rng_from(3);
    let mut logits = Matrix::from_shape_fn((10, 39), |_| rng.random_range(-3.0..3.0));
    let before = sequence_cross_entropy(&logits, &target, cs.pad()).unwrap();
    for (i, &t) in target.iter().enumerate() {
        if t == cs.pad() {
            logits.row_mut(i).mapv_inplace(|_| rng.random_range(-50.0..50.0));
        }
    }
    assert_eq!(sequence_cross_entropy(&logits, &target, cs.pad()).unwrap(), before);
    assert_eq!(before.1, 4);
}

#[test]
fn padded_and_unpadded_sequences_give_the_same_loss() {
    let cfg = small_config(1);
    let tr = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    let (m, store) = (&tr.model, &tr.store);
    let image = &synth_corpus(1, 2, &RenderStyle::default()).unwrap()[0].image;
    let cs = &m.charset;
    let mut losses = Vec::new();
    for pad_to in [None, Some(cfg.recognizer.max_len + 1)] {
        let (input, target) = cs.teacher_forcing("tokens", pad_to).unwrap();
        let mut t = Tape::new(store);
        let mem = m.memory(&mut t, &m.prepare(image)).unwrap();
        let logits = m.logits(&mut t, mem, &input).unwrap();
        losses.push(sequence_cross_entropy(t.value(logits), &target, cs.pad()).unwrap());
    }
    assert_eq!(losses[0].1, losses[1].1);
    assert!((losses[0].0 - losses[1].0).abs() < 1e-12, "{losses:?}");
}

#[test]
fn decoder_is_causal() {
    let cfg = small_config(2);
    let tr = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    let (m, store) = (&tr.model, &tr.store);
    let image = &synth_corpus(1, 4, &RenderStyle::default()).unwrap()[0].image;
    let mut t = Tape::new(store);
    let mem = m.memory(&mut t, &m.prepare(image)).unwrap();
    let mut rng = rng_from(5);
    let base: Vec<usize> = (0..12).map(|_| rng.random_range(0..39)).collect();
    let reference = {
        let l = m.logits(&mut t, mem, &base).unwrap();
        t.value(l).clone()
    };
    for j in 0..base.len() {
        let mut perturbed = base.clone();
        perturbed[j] = (perturbed[j] + 1 + rng.random_range(0..37)) % 39;
        let l = m.logits(&mut t, mem, &perturbed).unwrap();
        let l = t.value(l);
        for i in 0..j {
            assert_eq!(l.row(i), reference.row(i), "position {i} saw input {j}");
        }
        if j + 1 < base.len() {
            assert_ne!(l.row(j), reference.row(j));
        }
    }
}

#[test]
fn forced_end_token_decodes_to_empty_string() {
    let cfg = small_config(3);
    let mut tr = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    let head = tr.model.head.clone();
    tr.store.get_mut(head.w).fill(0.0);
    let eos = tr.model.charset.eos();
    let b = tr.store.get_mut(head.b.unwrap());
    b.fill(0.0);
    b[[0, eos]] = 10.0;
    let image = &synth_corpus(1, 6, &RenderStyle::default()).unwrap()[0].image;
    assert_eq!(greedy_decode(&tr.model, &tr.store, image).unwrap(), "");
}

#[test]
fn decoding_stops_at_the_length_limit() {
    let cfg = small_config(4);
    let mut tr = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    let head = tr.model.head.clone();
    tr.store.get_mut(head.w).fill(0.0);
    let a = tr.model.charset.index_of('a').unwrap();
    let b = tr.store.get_mut(head.b.unwrap());
    b.fill(0.0);
    b[[0, a]] = 10.0;
    // BOS and PAD are never emitted even when they score highest.
    b[[0, tr.model.charset.bos()]] = 20.0;
    b[[0, tr.model.charset.pad()]] = 20.0;
    let image = &synth_corpus(1, 7, &RenderStyle::default()).unwrap()[0].image;
    let out = greedy_decode(&tr.model, &tr.store, image).unwrap();
    assert_eq!(out, "a".repeat(25));
}

#[test]
fn greedy_decoding_is_deterministic() {
    let tr = FinetuneTrainer::new(&small_config(5), FinetuneInit::Scratch).unwrap();
    let images: Vec<_> = synth_corpus(4, 8, &RenderStyle::default()).unwrap().into_iter().map(|s| s.image).collect();
    let a = recognize_all(&tr.model, &tr.store, &images).unwrap();
    let b = recognize_all(&tr.model, &tr.store, &images).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.chars().count() <= 25));
}

#[test]
fn word_accuracy_examples() {
    assert_eq!(word_accuracy(&["abc", "xyz"], &["abc", "xyz"]).unwrap(), 1.0);
    assert_eq!(word_accuracy(&["abc", "xyz"], &["abc", "xy"]).unwrap(), 0.5);
    assert_eq!(word_accuracy(&["ABC"], &["abc"]).unwrap(), 1.0);
    assert_eq!(word_accuracy(&["its"], &["it's"]).unwrap(), 1.0);
    let empty: [&str; 0] = [];
    assert!(matches!(word_accuracy(&empty, &empty), Err(Error::Contract(_))));
    assert!(matches!(word_accuracy(&["a"], &["a", "b"]), Err(Error::Contract(_))));
}

#[test]
fn resumed_finetuning_matches_an_unbroken_run() {
    let corpus = synth_corpus(8, 9, &RenderStyle::default()).unwrap();
    let cfg = small_config(6);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_finetune(
        &corpus,
        &cfg,
        FinetuneInit::Scratch,
        FinetuneOptions { out_dir: Some(full_dir.path()), stop_after: None },
    )
    .unwrap();
    assert_eq!(full.metrics.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    run_finetune(&corpus, &cfg, FinetuneInit::Scratch, FinetuneOptions { out_dir: Some(dir.path()), stop_after: Some(2) })
        .unwrap();
    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!((ckpt.kind.as_str(), ckpt.step), ("recognizer", 2));
    let rest = run_finetune(&corpus, &cfg, FinetuneInit::Resume(&ckpt), FinetuneOptions { out_dir: Some(dir.path()), stop_after: None })
        .unwrap();
    for (r, u) in rest.metrics.iter().zip(&full.metrics[2..]) {
        assert_eq!(r.step, u.step);
        assert!((r.ce - u.ce).abs() <= 1e-6);
    }
    assert_eq!(
        fs::read(dir.path().join(METRICS_FILE)).unwrap(),
        fs::read(full_dir.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn pretrained_init_copies_the_encoder_and_starts_a_fresh_decoder() {
    let cfg = small_config(7);
    let pre = Trainer::new(&cfg).unwrap().checkpoint();
    let from_pre = FinetuneTrainer::new(&cfg, FinetuneInit::Pretrained(&pre)).unwrap();
    let scratch = FinetuneTrainer::new(&cfg, FinetuneInit::Scratch).unwrap();
    let pre_store = pre.param_store();
    assert_eq!(arrays(&from_pre.store, "encoder."), arrays(&pre_store, "encoder."));
    assert_ne!(arrays(&scratch.store, "encoder."), arrays(&pre_store, "encoder."));
    assert_eq!(arrays(&from_pre.store, DECODER_PREFIX), arrays(&scratch.store, DECODER_PREFIX));
}

#[test]
fn encoder_shape_mismatch_names_the_array() {
    let mut wide = small_config(8);
    wide.encoder.embed_dim = 16;
    let pre = Trainer::new(&wide).unwrap().checkpoint();
    let err = FinetuneTrainer::new(&small_config(8), FinetuneInit::Pretrained(&pre)).err().unwrap();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("encoder."), "{msg}");
}

#[test]
fn saved_recognizer_reloads_with_identical_predictions() {
    let corpus = synth_corpus(4, 12, &RenderStyle::default()).unwrap();
    let cfg = small_config(9);
    let dir = tempfile::tempdir().unwrap();
    let out = run_finetune(&corpus, &cfg, FinetuneInit::Scratch, FinetuneOptions { out_dir: Some(dir.path()), stop_after: None })
        .unwrap();
    let (cfg_back, model, store) = load_recognizer(&Checkpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
    let tr = FinetuneTrainer::new(&cfg, FinetuneInit::Resume(&out.checkpoint)).unwrap();
    let images: Vec<_> = corpus.iter().map(|s| s.image.clone()).collect();
    assert_eq!(
        recognize_all(&model, &store, &images).unwrap(),
        recognize_all(&tr.model, &tr.store, &images).unwrap()
    );
}

#[test]
fn unlabeled_samples_cannot_be_finetuned_on() {
    let mut corpus = synth_corpus(2, 13, &RenderStyle::default()).unwrap();
    corpus[1].label = None;
    let err = run_finetune(&corpus, &small_config(10), FinetuneInit::Scratch, FinetuneOptions { out_dir: None, stop_after: None })
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

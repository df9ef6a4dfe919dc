mod common;

use davam::models::ModelKind;
use davam::train::{train_stage_one, train_stage_two, Checkpoint, TrainConfig, TrainLog};

#[test]
fn stage_two_touches_only_the_prior() {
    common::stage_two_freezes_stage_one().unwrap();
}

#[test]
fn identical_seeds_reproduce_logs_and_checkpoints() {
    common::log_determinism().unwrap();
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    common::persistence().unwrap();
}

#[test]
fn stage_two_is_reproducible_and_beats_the_uniform_bound() {
    let corpus = common::tiny_corpus();
    let mut cfg = common::tiny_config(ModelKind::Davam);
    cfg.prior_epochs = 4;
    let stage_one = train_stage_one(&corpus, &cfg).unwrap().checkpoint;
    let (mut a, mut b) = (stage_one.clone(), stage_one);
    let ha = train_stage_two(&mut a, &corpus).unwrap();
    let hb = train_stage_two(&mut b, &corpus).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(a.model.prior_trained);
    let last = ha.last().unwrap();
    assert!(last.valid_nll < last.uniform_nll, "{last:?}");
    assert!(ha[0].valid_nll >= last.valid_nll);
}

#[test]
fn checkpoint_files_survive_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.davam");
    let ck = common::random_checkpoint(ModelKind::DavamQ, 4);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert!(!path.with_extension("tmp").exists());
    assert!(Checkpoint::load(&dir.path().join("missing.davam")).is_err());
}

#[test]
fn training_logs_round_trip_through_jsonl() {
    let corpus = common::tiny_corpus();
    let run = train_stage_one(&corpus, &common::tiny_config(ModelKind::Vae)).unwrap();
    let text = run.log.to_jsonl();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(TrainLog::from_jsonl(&text).unwrap(), run.log);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    run.log.save(&p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), text);
}

#[test]
fn config_files_use_field_names_as_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    let cfg = TrainConfig::large_scale();
    std::fs::write(&p, cfg.to_text()).unwrap();
    assert_eq!(TrainConfig::load(&p).unwrap(), cfg);
    assert_eq!((cfg.codes, cfg.beta_max, cfg.lr, cfg.warmup_epochs), (512, 5.0, 1.0, 10));
    std::fs::write(&p, "codes = 0\n").unwrap();
    assert!(TrainConfig::load(&p).is_err());
}

#[test]
fn learning_rate_decays_only_on_plateaus() {
    let corpus = common::tiny_corpus();
    let mut cfg = common::tiny_config(ModelKind::LstmLm);
    cfg.epochs = 4;
    let run = train_stage_one(&corpus, &cfg).unwrap();
    let lrs: Vec<f64> = run.log.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], cfg.lr);
    assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] * cfg.lr_decay_factor));
    let betas: Vec<f64> = run.log.records.iter().map(|r| r.beta).collect();
    assert!(betas.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn memorized_sentence_reconstruction_approaches_zero() {
    let sentence: Vec<String> = "the cat sat on the mat".split(' ').map(String::from).collect();
    let splits = davam::corpus::CorpusSplits {
        train: vec![sentence.clone(); 32],
        valid: vec![sentence.clone(); 4],
        test: vec![sentence],
    };
    let corpus = davam::train::EncodedCorpus::new(&splits, 100, 40).unwrap();
    let mut cfg = common::tiny_config(ModelKind::LstmLm);
    cfg.epochs = 30;
    let run = train_stage_one(&corpus, &cfg).unwrap();
    let first = run.log.records[0].valid_rec;
    let last = run.log.records.last().unwrap().valid_rec;
    assert!(last < 0.05 * first && last < 0.5, "{first} → {last}");
}

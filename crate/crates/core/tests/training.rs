use snakevit::data::{self, Dataset, Labels, SynthSpec};
use snakevit::model::{Model, ModelConfig};
use snakevit::simmim::{self, PretrainConfig};
use snakevit::trainer::{self, TrainConfig};
use snakevit::Tensor;

fn corpus(n: usize) -> Dataset {
    data::generate(&SynthSpec { n, ..SynthSpec::default() }).unwrap()
}

fn short_pretrain(seed: u64, epochs: usize) -> PretrainConfig {
    PretrainConfig { epochs, batch_size: 8, warmup_epochs: 0, mask_patch: 8, seed, ..PretrainConfig::default() }
}

#[test]
fn pretraining_loss_falls_over_fifty_steps() {
    let ds = corpus(8);
    let mut model = Model::build(&ModelConfig::tiny(64)).unwrap();
    let (_, log) = simmim::pretrain(&mut model, &ds, &short_pretrain(0, 50)).unwrap();
    assert_eq!(log.len(), 50);
    assert_eq!(log.last().unwrap().step, 50);
    let head: f64 = log[..5].iter().map(|e| e.loss).sum();
    let tail: f64 = log[45..].iter().map(|e| e.loss).sum();
    assert!(tail < head, "first five {head:.4}, last five {tail:.4}");
    assert!(log[49].loss < log[0].loss, "{:?}", log.iter().map(|e| e.loss).collect::<Vec<_>>());
}

#[test]
fn pretraining_is_deterministic_and_leaves_head_untouched() {
    let ds = corpus(8);
    let run = || {
        let mut model = Model::build(&ModelConfig::tiny(64)).unwrap();
        let (_, log) = simmim::pretrain(&mut model, &ds, &short_pretrain(3, 3)).unwrap();
        (model, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(a.store.bitwise_eq(&b.store));
    let fresh = Model::build(&ModelConfig::tiny(64)).unwrap();
    for e in fresh.store.entries().iter().filter(|e| e.name.starts_with("head.")) {
        let id = a.store.find(&e.name).unwrap();
        assert!(a.store.get(id).bitwise_eq(&e.value), "{} moved during pretraining", e.name);
    }
}

#[test]
fn two_epochs_log_two_entries_and_replay_exactly() {
    let train = corpus(16);
    let test = data::generate(&SynthSpec { n: 8, offset: 16, ..SynthSpec::default() }).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut model = Model::build(&ModelConfig { seed: 5, ..ModelConfig::tiny(64) }).unwrap();
        let log = trainer::train(&mut model, &train, Some(&test), &cfg).unwrap();
        (model, log)
    };
    let (ma, a) = run();
    let (mb, b) = run();
    assert_eq!(a.entries.len(), 2);
    assert_eq!(a.entries[1].step, 4);
    assert!(a.entries.iter().all(|e| e.metrics.is_some() && e.loss.is_finite()));
    assert_eq!(a.to_csv(), b.to_csv());
    assert!(ma.store.bitwise_eq(&mb.store));
}

#[test]
fn separable_toy_is_fit() {
    // bright versus dark images
    let n = 8;
    let per = 3 * 64 * 64;
    let images = Tensor::from_fn(&[n, 3, 64, 64], |i| if (i / per) % 2 == 0 { 0.8 } else { 0.2 });
    let ds = Dataset {
        images,
        labels: Labels::Classes((0..n).map(|i| i % 2).collect()),
        classes: vec!["dark".into(), "bright".into()],
    };
    let mut model = Model::build(&ModelConfig::tiny(64)).unwrap();
    let cfg = TrainConfig { epochs: 100, batch_size: 8, ..TrainConfig::default() };
    let log = trainer::train(&mut model, &ds, None, &cfg).unwrap();
    let last = log.entries.last().unwrap().loss;
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let ds = corpus(4);
    let mut model = Model::build(&ModelConfig::tiny(64)).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    trainer::train(&mut model, &ds, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stk");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert!(model.store.bitwise_eq(&back.store));
    assert_eq!(trainer::predict(&model, &ds.images, 2).unwrap(), trainer::predict(&back, &ds.images, 4).unwrap());
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use snakevit::data::{self, SynthSpec, SynthTask};
use snakevit::dsc::{DscArgs, DscBlock};
use snakevit::explain;
use snakevit::model::{Model, ModelConfig, DOWNSAMPLE};
use snakevit::nn::uniform;
use snakevit::params::{Ctx, Mode, ParamStore};
use snakevit::simmim;
use snakevit::{Error, Graph, Tensor};

const FLAGS: [(bool, bool); 4] = [(true, true), (true, false), (false, true), (false, false)];

#[test]
fn zero_predictor_dsc_equals_standard_block() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = DscBlock::new(&mut store, &mut rng, "d", DscArgs { c_in: 3, c_out: 5, hidden: 4, k: 9 }).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let x = g.constant(uniform(&mut rng, &[2, 3, 10, 12], 1.0));
        let d = b.forward(&cx, x).unwrap().tensor().max_abs_diff(&b.forward_standard(&cx, x).unwrap().tensor());
        assert!(d <= 1e-10, "seed {seed}: {d}");
    }
}

#[test]
fn every_flag_combination_downsamples_by_32() {
    for (v, s) in FLAGS {
        for cfg in [ModelConfig::default(), ModelConfig::tiny(64)] {
            let m = Model::build(&cfg.with_flags(v, s)).unwrap();
            assert_eq!(m.downsample_factor().unwrap(), DOWNSAMPLE, "V={v} S={s}");
        }
        let cfg = ModelConfig { num_classes: 4, ..ModelConfig::tiny(64) }.with_flags(v, s);
        let m = Model::build(&cfg).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &m.store, Mode::Eval).frozen();
        let y = m.forward(&cx, g.constant(Tensor::zeros(&[3, 3, 64, 64]))).unwrap();
        assert_eq!(y.shape(), vec![3, 4]);
    }
}

#[test]
fn input_not_divisible_by_32_is_rejected() {
    let m = Model::build(&ModelConfig::tiny(64)).unwrap();
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store, Mode::Eval);
    let r = m.forward(&cx, g.constant(Tensor::zeros(&[1, 3, 48, 64])));
    assert!(matches!(r, Err(Error::IndivisibleInput { .. })));
}

#[test]
fn mask_loss_ignores_visible_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = simmim::sample_mask(7, 7, 0.6, 32, &mut rng).unwrap();
    assert_eq!(m.count(), 29);
    let target = uniform(&mut rng, &[1, 3, 224, 224], 1.0);
    let g = Graph::new();
    let p = g.param(uniform(&mut rng, &[1, 3, 224, 224], 1.0));
    let loss = simmim::simmim_loss(p, g.constant(target), &m).unwrap();
    let grad = g.backward(loss).unwrap().wrt(p);
    let pm = m.pixel_mask();
    let plane = 224 * 224;
    for (i, &gv) in grad.data().iter().enumerate() {
        assert_eq!(gv == 0.0, pm.data()[i % plane] == 0.0, "pixel {i}");
    }
}

#[test]
fn grad_cam_is_normalized_on_every_layer() {
    let m = Model::build(&ModelConfig::tiny(64)).unwrap();
    let image = data::generate(&SynthSpec { n: 1, ..SynthSpec::default() }).unwrap().image(0);
    for layer in explain::cam_layers(&m) {
        let h = explain::grad_cam(&m, &image, 1, &layer).unwrap();
        let v = h.values.data();
        let max = v.iter().cloned().fold(0.0, f64::max);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)), "{layer}");
        assert!(max == 0.0 || max == 1.0, "{layer}: max {max}");
    }
    assert!(matches!(explain::grad_cam(&m, &image, 0, "nope"), Err(Error::UnknownLayer(_))));
    assert!(matches!(explain::grad_cam(&m, &image, 2, "down"), Err(Error::ClassOutOfRange { .. })));
}

#[test]
fn corpus_round_trips_and_detects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n: 6, task: SynthTask::Both, ..SynthSpec::default() };
    let (ds, manifest) = data::gen_dataset(&spec, dir.path()).unwrap();
    let back = data::load_dataset(dir.path()).unwrap();
    assert!(back.images.bitwise_eq(&ds.images));
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.classes, ds.classes);

    std::fs::remove_file(dir.path().join(&manifest.labels)).unwrap();
    assert!(matches!(data::load_dataset(dir.path()), Err(Error::CorruptManifest(_))));

    let (_, manifest) = data::gen_dataset(&spec, dir.path()).unwrap();
    let img = dir.path().join(&manifest.images);
    let mut bytes = std::fs::read(&img).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    std::fs::write(&img, bytes).unwrap();
    assert!(matches!(data::load_dataset(dir.path()), Err(Error::CorruptManifest(_))));
}

#[test]
fn disjoint_offsets_give_disjoint_images() {
    let a = data::generate(&SynthSpec { n: 4, ..SynthSpec::default() }).unwrap();
    let b = data::generate(&SynthSpec { n: 4, offset: 4, ..SynthSpec::default() }).unwrap();
    let ab = data::generate(&SynthSpec { n: 8, ..SynthSpec::default() }).unwrap();
    for i in 0..4 {
        assert!(ab.image(i).bitwise_eq(&a.image(i)));
        assert!(ab.image(i + 4).bitwise_eq(&b.image(i)));
        assert!(!a.image(i).bitwise_eq(&b.image(i)));
    }
}

use std::sync::Arc;

use lethe_core::attacks::{
    AttackContext, AttackParams, AttackRegistry, AttackStream, CorruptionStream, FgsmStream, FgsmTarget,
    LetheanStream, RandomPixelStream,
};
use lethe_core::data::{rotate90k, synth_blobs, ImageSet, LabeledImage, PixelStats, Split};
use lethe_core::model::{ArchConfig, Model};
use lethe_core::numerics::gradcheck::{numeric_input_gradient, FD_STEP};
use lethe_core::numerics::Tensor;

fn model() -> Model {
    Model::build(ArchConfig::conv_stack(1, 8, 3, (4, 8, 8)), 2).unwrap()
}

fn train() -> Arc<ImageSet> {
    Arc::new(synth_blobs(3, 4, &[1, 8, 8], 0.8, 1).unwrap())
}

fn ctx() -> AttackContext {
    let t = train();
    AttackContext {
        train: t.clone(),
        test: t,
        stats: vec![PixelStats { mean: 0.4, std: 0.2 }],
        input_shape: vec![1, 8, 8],
        pretrained: Some(Arc::new(model())),
        params: AttackParams::default(),
    }
}

fn take(s: &mut dyn AttackStream, m: &Model, n: usize) -> Vec<Tensor> {
    (0..n).map(|_| s.next_item(m).unwrap().unwrap().pixels).collect()
}

#[test]
fn every_registered_stream_is_deterministic() {
    let reg = AttackRegistry::standard();
    let m = model();
    for name in reg.names() {
        let a = take(reg.build(name, &ctx(), 42).unwrap().as_mut(), &m, 100);
        let b = take(reg.build(name, &ctx(), 42).unwrap().as_mut(), &m, 100);
        assert_eq!(a, b, "{name}");
        let c = take(reg.build(name, &ctx(), 43).unwrap().as_mut(), &m, 100);
        assert_ne!(a, c, "{name}");
        for t in &a {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
        }
    }
}

#[test]
fn registry_names_and_unknown_name() {
    let reg = AttackRegistry::standard();
    assert_eq!(reg.names(), vec!["corruption", "fgsm", "lethean", "random_pixel"]);
    let err = reg.build("letheon", &ctx(), 0).err().unwrap().to_string();
    for n in ["lethean", "random_pixel", "corruption", "fgsm"] {
        assert!(err.contains(n), "{err}");
    }
}

#[test]
fn custom_streams_can_be_registered() {
    fn constant(ctx: &AttackContext, _seed: u64) -> lethe_core::Result<Box<dyn AttackStream>> {
        Ok(Box::new(lethe_core::attacks::ReplayStream::from_tensors(
            "constant",
            vec![Tensor::full(&ctx.input_shape, 0.5)],
        )))
    }
    let mut reg = AttackRegistry::empty();
    reg.register("constant", constant);
    let mut s = reg.build("constant", &ctx(), 0).unwrap();
    assert_eq!(s.name(), "constant");
    assert!(s.next_item(&model()).unwrap().is_some());
    assert!(s.next_item(&model()).unwrap().is_none());
}

#[test]
fn lethean_items_are_rotated_training_samples() {
    let t = train();
    let mut s = LetheanStream::new(t.clone(), 1).unwrap();
    let m = model();
    let mut seen = [false; 4];
    for _ in 0..200 {
        let item = s.next_item(&m).unwrap().unwrap();
        let k = item.rotation.unwrap();
        assert!((1..4).contains(&k));
        seen[k] = true;
        let label = item.source_label.unwrap();
        let back = rotate90k(&item.pixels, 4 - k).unwrap();
        assert!(t.images.iter().any(|i| i.label == label && i.pixels == back));
    }
    assert!(seen[1] && seen[2] && seen[3]);
}

#[test]
fn random_pixels_match_requested_moments() {
    let stats = [PixelStats { mean: 0.5, std: 0.1 }];
    let mut s = RandomPixelStream::new(&stats, &[1, 16, 16], 3).unwrap();
    let m = model();
    let vals: Vec<f64> = take(&mut s, &m, 200).into_iter().flat_map(|t| t.into_data()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 0.5).abs() < 0.002, "{mean}");
    assert!((std - 0.1).abs() < 0.002, "{std}");
}

#[test]
fn zero_std_gives_constant_images() {
    let stats = [PixelStats { mean: 0.3, std: 0.0 }];
    let mut s = RandomPixelStream::new(&stats, &[2, 4, 4], 0).unwrap();
    let t = s.next_item(&model()).unwrap().unwrap().pixels;
    assert!(t.data().iter().all(|&v| v == 0.3));
}

#[test]
fn per_channel_stats_apply_per_channel() {
    let stats = [PixelStats { mean: 0.2, std: 0.0 }, PixelStats { mean: 0.7, std: 0.0 }];
    let mut s = RandomPixelStream::new(&stats, &[2, 3, 3], 0).unwrap();
    let t = s.next_item(&model()).unwrap().unwrap().pixels;
    assert!(t.data()[..9].iter().all(|&v| v == 0.2));
    assert!(t.data()[9..].iter().all(|&v| v == 0.7));
    assert!(RandomPixelStream::new(&stats, &[3, 3, 3], 0).is_err());
}

fn flat_set(value: f64, n: usize) -> Arc<ImageSet> {
    let images = (0..n)
        .map(|i| LabeledImage {
            pixels: Tensor::full(&[1, 8, 8], value),
            label: i % 3,
        })
        .collect();
    Arc::new(ImageSet::new(images, Split::Test, "flat").unwrap())
}

#[test]
fn corruption_noise_has_folded_normal_magnitude() {
    let sigma = 0.1;
    let mut s = CorruptionStream::new(flat_set(0.5, 5), sigma, 4).unwrap();
    let m = model();
    let devs: Vec<f64> = take(&mut s, &m, 300)
        .iter()
        .flat_map(|t| t.data().iter().map(|v| (v - 0.5).abs()).collect::<Vec<_>>())
        .collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    let want = sigma * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
}

#[test]
fn zero_sigma_and_zero_epsilon_return_sources() {
    let t = train();
    let m = model();
    let mut c = CorruptionStream::new(t.clone(), 0.0, 5).unwrap();
    let mut f = FgsmStream::new(t.clone(), 0.0, None, 5).unwrap();
    for s in [&mut c as &mut dyn AttackStream, &mut f] {
        for _ in 0..10 {
            let item = s.next_item(&m).unwrap().unwrap();
            assert!(t.images.iter().any(|i| i.pixels == item.pixels));
        }
    }
}

#[test]
fn fgsm_follows_finite_difference_sign() {
    let t = train();
    let m = model();
    let eps = 0.2;
    let mut s = FgsmStream::new(t.clone(), eps, None, 6).unwrap();
    let mut checked = 0;
    for _ in 0..4 {
        let item = s.next_item(&m).unwrap().unwrap();
        let label = item.source_label.unwrap();
        let src = t
            .images
            .iter()
            .find(|i| {
                i.label == label
                    && i.pixels.data().iter().zip(item.pixels.data()).all(|(a, b)| (a - b).abs() <= eps + 1e-12)
            })
            .unwrap();
        let num = numeric_input_gradient(&src.pixels, FD_STEP, |x| m.main_loss_grad(x, label).map(|g| g.loss)).unwrap();
        for ((&x, &adv), &g) in src.pixels.data().iter().zip(item.pixels.data()).zip(num.data()) {
            if g.abs() < 1e-7 {
                continue;
            }
            let want = (x + eps * g.signum()).clamp(0.0, 1.0);
            assert!((adv - want).abs() < 1e-12, "x={x} g={g} adv={adv}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn frozen_fgsm_ignores_the_online_model() {
    let frozen = Arc::new(model());
    let other = Model::build(ArchConfig::conv_stack(1, 8, 3, (4, 8, 8)), 99).unwrap();
    let mut a = FgsmStream::new(train(), 0.2, Some(frozen.clone()), 7).unwrap();
    let mut b = FgsmStream::new(train(), 0.2, None, 7).unwrap();
    assert_eq!(take(&mut a, &other, 10), take(&mut b, &frozen, 10));
    let mut c = ctx();
    c.params.fgsm_target = FgsmTarget::Frozen;
    c.pretrained = None;
    assert!(AttackRegistry::standard().build("fgsm", &c, 0).is_err());
}

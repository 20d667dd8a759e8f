use lethe_core::data::{rotate90k, synth_blobs, ImageSet, Split};
use lethe_core::model::{ArchConfig, Model, Partition};
use lethe_core::numerics::{argmax, Tensor};
use lethe_core::training::{pretrain, PretrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> Model {
    Model::build(ArchConfig::conv_stack(1, 8, 3, (4, 8, 8)), seed).unwrap()
}

fn image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[1, 8, 8], |_| rng.random::<f64>())
}

#[test]
fn seeded_build_is_deterministic() {
    assert_eq!(tiny(3), tiny(3));
    assert_ne!(tiny(3).trunk, tiny(4).trunk);
}

#[test]
fn head_mismatch_is_config_error() {
    let mut arch = ArchConfig::conv_stack(1, 8, 3, (4, 8, 8));
    arch.aux[0] = lethe_core::numerics::LayerSpec::conv(5, 8, 3, 1);
    assert!(matches!(Model::build(arch, 0), Err(lethe_core::Error::Config { .. })));
}

#[test]
fn main_gradients_touch_trunk_and_main_only() {
    let m = tiny(1);
    let x = image(&mut ChaCha8Rng::seed_from_u64(0));
    let g = m.main_loss_grad(&x, 2).unwrap();
    assert!(g.grad_s.same_layout(m.partition(Partition::Shared)));
    assert!(g.grad_head.same_layout(m.partition(Partition::Main)));
    let a = m.aux_loss_grad(&x).unwrap();
    assert!(a.grad_head.same_layout(m.partition(Partition::Aux)));
    assert!(a.grad_s.norm() > 0.0 && g.grad_s.norm() > 0.0);
}

#[test]
fn main_loss_ignores_aux_parameters() {
    let m = tiny(2);
    let x = image(&mut ChaCha8Rng::seed_from_u64(1));
    let mut n = m.clone();
    n.aux.scale(-3.0);
    assert_eq!(m.main_loss_grad(&x, 0).unwrap().loss, n.main_loss_grad(&x, 0).unwrap().loss);
    let mut n = m.clone();
    n.main.scale(0.5);
    assert_eq!(m.aux_loss_grad(&x).unwrap().loss, n.aux_loss_grad(&x).unwrap().loss);
}

#[test]
fn rotating_the_input_cycles_the_rotation_logits() {
    let m = tiny(3);
    let x = image(&mut ChaCha8Rng::seed_from_u64(2));
    let base = m.aux_logits(&x).unwrap();
    for k in 1..4 {
        let rot = m.aux_logits(&rotate90k(&x, k).unwrap()).unwrap();
        for r in 0..4 {
            let want = &base.data()[((r + k) % 4) * 4..((r + k) % 4) * 4 + 4];
            let got = &rot.data()[r * 4..r * 4 + 4];
            for (a, b) in want.iter().zip(got) {
                assert!((a - b).abs() < 1e-12, "k={k} r={r}");
            }
        }
    }
}

#[test]
fn uniform_heads_give_log_class_count() {
    let mut m = Model::build(ArchConfig::conv_stack(1, 8, 10, (4, 8, 8)), 0).unwrap();
    for part in [Partition::Main, Partition::Aux] {
        let p = m.partition_mut(part);
        let last_w = p.names().filter(|n| n.ends_with("weight")).last().unwrap().to_string();
        let last_b = last_w.replace("weight", "bias");
        p.get_mut(&last_w).unwrap().scale(0.0);
        p.get_mut(&last_b).unwrap().scale(0.0);
    }
    let x = image(&mut ChaCha8Rng::seed_from_u64(3));
    assert!((m.main_loss_grad(&x, 4).unwrap().loss - 10f64.ln()).abs() < 1e-12);
    assert!((m.aux_loss_grad(&x).unwrap().loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn probabilities_sum_to_one() {
    let m = tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let p = m.predict_main(&image(&mut rng)).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn input_errors() {
    let m = tiny(5);
    let x = image(&mut ChaCha8Rng::seed_from_u64(5));
    assert!(matches!(m.main_loss_grad(&x, 3), Err(lethe_core::Error::Input(_))));
    assert!(matches!(m.aux_loss_grad(&Tensor::zeros(&[1, 8, 6])), Err(lethe_core::Error::Input(_))));
}

#[test]
fn tiny_model_overfits_five_samples() {
    let all = synth_blobs(3, 2, &[1, 8, 8], 0.8, 9).unwrap();
    let five = ImageSet::new(all.images[..5].to_vec(), Split::Train, "five").unwrap();
    let cfg = PretrainConfig {
        epochs: 1000,
        batch_size: 5,
        lr: 0.05,
        weight_decay: 0.0,
        ..PretrainConfig::default()
    };
    let (m, _) = pretrain(tiny(6), &five, &cfg).unwrap();
    let (acc, loss) = m.evaluate(&five.images).unwrap();
    assert!(loss < 1e-3, "loss {loss}");
    assert_eq!(acc, 1.0);
    for img in &five.images {
        assert_eq!(argmax(&m.predict_main(&img.pixels).unwrap()), img.label);
    }
}

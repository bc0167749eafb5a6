use super::*;
use crate::tensor::Tape;
use ndarray::{Array1, Array3};
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((3, h, w), || rng.random_range(0.0..1.0))
}

#[test]
fn appearance_shapes_match_contract() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let net = AppearanceNet::new(&mut store, &mut r, 16);
    let img = random_image(&mut r, 64, 64);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = net.forward(&mut tape, &mut binder, &store, &img).unwrap();
    assert_eq!(tape.value(out.maps).shape(), &[16, 4, 4]);
    assert_eq!(tape.value(out.embedding).shape(), &[16]);
    for &e in tape.value(out.embedding).iter() {
        assert!(e > 0.0 && e < 1.0);
    }
}

#[test]
fn appearance_rejects_non_divisible_sizes() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let net = AppearanceNet::new(&mut store, &mut r, 8);
    let img = random_image(&mut r, 60, 64);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    assert!(net.forward(&mut tape, &mut binder, &store, &img).is_err());
}

#[test]
fn zero_maps_give_half_embedding() {
    // sigma(0) = 0.5: zero the projection weights and biases so maps are 0
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let net = AppearanceNet::new(&mut store, &mut r, 4);
    store.value_mut(net.proj.w).fill(0.0);
    store.value_mut(net.proj.b).fill(0.0);
    let img = random_image(&mut r, 32, 32);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = net.forward(&mut tape, &mut binder, &store, &img).unwrap();
    for &e in tape.value(out.embedding).iter() {
        assert_eq!(e, 0.5);
    }
}

#[test]
fn embedding_is_sigmoid_of_spatial_max() {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let net = AppearanceNet::new(&mut store, &mut r, 8);
    let img = random_image(&mut r, 64, 64);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = net.forward(&mut tape, &mut binder, &store, &img).unwrap();
    let maps = tape.value(out.maps).clone();
    let emb = tape.value(out.embedding);
    for k in 0..8 {
        let m = maps
            .index_axis(ndarray::Axis(0), k)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let expect = 1.0 / (1.0 + (-m).exp());
        assert!((emb[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn sound_net_presets_share_the_shape_contract() {
    let mut r = rng(3);
    let logspec = Array3::from_shape_simple_fn((1, 256, 256), || r.random_range(0.0..2.0));
    for kind in [SoundNetKind::UnetTiny, SoundNetKind::UnetSmall, SoundNetKind::Mv2Small] {
        let mut store = ParamStore::new();
        let net = SoundNet::new(&mut store, &mut r, kind, 16);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = net.forward(&mut tape, &mut binder, &store, &logspec).unwrap();
        assert_eq!(tape.value(out).shape(), &[16, 256, 256], "{}", kind.name());
        assert!(tape.value(out).iter().all(|x| x.is_finite()), "{}", kind.name());
    }
}

#[test]
fn sound_net_zero_input_stays_finite() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let net = SoundNet::new(&mut store, &mut r, SoundNetKind::UnetTiny, 4);
    let logspec = Array3::zeros((1, 64, 64));
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let out = net.forward(&mut tape, &mut binder, &store, &logspec).unwrap();
    assert!(tape.value(out).iter().all(|x| x.is_finite()));
}

#[test]
fn forward_is_deterministic_under_fixed_seed() {
    let run = || {
        let mut store = ParamStore::new();
        let mut r = rng(7);
        let net = SoundNet::new(&mut store, &mut r, SoundNetKind::UnetTiny, 8);
        let logspec = Array3::from_shape_simple_fn((1, 64, 64), || r.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = net.forward(&mut tape, &mut binder, &store, &logspec).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn classifier_outputs_a_probability_vector() {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let net = Classifier::new(&mut store, &mut r, 4);
    let img = random_image(&mut r, 64, 64);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let (probs, _) = net.forward(&mut tape, &mut binder, &store, &img).unwrap();
    let p = tape.value(probs);
    assert_eq!(p.shape(), &[4]);
    assert!(p.iter().all(|&x| x >= 0.0));
    assert!((p.sum() - 1.0).abs() < 1e-6);
}

#[test]
fn classifier_uniform_logits_give_uniform_probs() {
    let mut store = ParamStore::new();
    let mut r = rng(6);
    let net = Classifier::new(&mut store, &mut r, 5);
    store.value_mut(net.fc.w).fill(0.0);
    store.value_mut(net.fc.b).fill(0.0);
    let img = random_image(&mut r, 32, 32);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let (probs, _) = net.forward(&mut tape, &mut binder, &store, &img).unwrap();
    for &p in tape.value(probs).iter() {
        assert!((p - 0.2).abs() < 1e-12);
    }
}

#[test]
fn tied_forwards_accumulate_gradients_per_parameter() {
    // two forwards through the same network on one tape; the binder must sum
    // the gradients from both, and every parameter must be touched
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let net = SoundNet::new(&mut store, &mut r, SoundNetKind::UnetTiny, 2);
    let a = Array3::from_shape_simple_fn((1, 32, 32), || r.random_range(0.0..1.0));
    let b = Array3::from_shape_simple_fn((1, 32, 32), || r.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let fa = net.forward(&mut tape, &mut binder, &store, &a).unwrap();
    let fb = net.forward(&mut tape, &mut binder, &store, &b).unwrap();
    let sa = tape.sigmoid(fa);
    let sb = tape.sigmoid(fb);
    let target = ndarray::ArrayD::from_elem(tape.value(sa).raw_dim(), 1.0);
    let la = tape.bce_mean(sa, target.clone());
    let lb = tape.bce_mean(sb, target);
    let total = tape.add(la, lb);
    let tape_grads = tape.backward(total);
    let grads = binder.collect(&store, &tape_grads);
    assert!(all_params_touched(&store, &grads));

    // compare against summing two independent single-forward runs
    let single = |input: &Array3<f64>| {
        let mut t = Tape::new();
        let mut bd = Binder::new();
        let f = net.forward(&mut t, &mut bd, &store, input).unwrap();
        let s = t.sigmoid(f);
        let tgt = ndarray::ArrayD::from_elem(t.value(s).raw_dim(), 1.0);
        let l = t.bce_mean(s, tgt);
        let g = t.backward(l);
        bd.collect(&store, &g)
    };
    let ga = single(&a);
    let gb = single(&b);
    for i in 0..store.len() {
        let combined = &ga[i] + &gb[i];
        let diff = (&grads[i] - &combined).iter().fold(0.0f64, |m, &d| m.max(d.abs()));
        assert!(diff < 1e-12, "param {} grad mismatch {diff}", store.name(i));
    }
}

#[test]
fn small_conv_stack_passes_gradient_check() {
    use crate::tensor::grad_check;
    let mut r = rng(9);
    let x0 = Array3::from_shape_simple_fn((2, 6, 6), || r.random_range(-1.0..1.0)).into_dyn();
    let w0 = he_uniform(&mut r, 18, &[3, 2, 3, 3]);
    let b0 = Array1::from_shape_simple_fn(3, || r.random_range(-0.1..0.1)).into_dyn();
    let err = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1);
            let y = tape.leaky_relu(y, LEAKY_SLOPE);
            let p = tape.global_max_pool(y);
            let s = tape.sigmoid(p);
            let tgt = ndarray::ArrayD::from_elem(tape.value(s).raw_dim(), 1.0);
            tape.bce_mean(s, tgt)
        },
        &[x0, w0, b0],
    );
    assert!(err < 1e-4, "grad error {err}");
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let _net = AppearanceNet::new(&mut store, &mut r, 4);
    let header = serde_json::json!({
        "epoch": 3,
        "config": {"variant": "catemb", "k": 4},
        "rng": "state-blob",
    });
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&p1, &header, &store).unwrap();
    let (loaded_header, tensors) = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded_header, header);
    let mut store2 = ParamStore::new();
    let mut r2 = rng(99);
    let _net2 = AppearanceNet::new(&mut store2, &mut r2, 4);
    store2.load_values(&tensors).unwrap();
    save_checkpoint(&p2, &loaded_header, &store2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_rejects_mismatched_stores() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let _net = AppearanceNet::new(&mut store, &mut r, 4);
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &serde_json::json!({}), &store).unwrap();
    let (_, tensors) = load_checkpoint(&path).unwrap();
    let mut other = ParamStore::new();
    let mut r2 = rng(12);
    let _net2 = AppearanceNet::new(&mut other, &mut r2, 8);
    assert!(other.load_values(&tensors).is_err());
}

#[test]
fn sound_net_kind_parses_known_names_only() {
    assert_eq!(SoundNetKind::parse("unet-tiny").unwrap(), SoundNetKind::UnetTiny);
    assert_eq!(SoundNetKind::parse("unet-small").unwrap(), SoundNetKind::UnetSmall);
    assert_eq!(SoundNetKind::parse("mv2-small").unwrap(), SoundNetKind::Mv2Small);
    assert!(SoundNetKind::parse("resnet").is_err());
}

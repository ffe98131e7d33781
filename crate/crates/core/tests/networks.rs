use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use depthadapt::checkpoint::{Checkpoint, CheckpointKind, Manifest};
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec, DepthNetwork, FrozenEncoder};
use depthadapt::nn::Mode;
use depthadapt::params::tensor_le_bytes;
use depthadapt::rng::seeded_rng;
use depthadapt::Error;

fn net(id: ArchitectureId, h: usize, w: usize, seed: u64) -> DepthNetwork {
    build_depth_network(ArchitectureSpec::new(id, h, w), &mut seeded_rng(seed, "init")).unwrap()
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed, "images");
    let v: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.uniform() as f32).collect();
    Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap()
}

fn bytes(t: &Tensor) -> Vec<u8> {
    tensor_le_bytes(t).unwrap()
}

#[test]
fn lightweight_parameter_count_near_reference() {
    let n = net(ArchitectureId::Lightweight, 224, 224, 0).num_parameters();
    assert!((3_500_000..=4_300_000).contains(&n), "{n}");
}

#[test]
fn complex_parameter_count_near_reference() {
    let n = net(ArchitectureId::Complex, 224, 224, 0).num_parameters();
    assert!((57_000_000..=70_000_000).contains(&n), "{n}");
}

#[test]
fn same_seed_same_initialization() {
    let a = net(ArchitectureId::LightweightTiny, 64, 64, 3).state().unwrap();
    let b = net(ArchitectureId::LightweightTiny, 64, 64, 3).state().unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, t) in &a {
        assert_eq!(bytes(t), bytes(&b[k]), "{k}");
    }
}

#[test]
fn latent_is_one_thirty_second_of_the_input() {
    for (h, w) in [(224, 224), (256, 512)] {
        let n = net(ArchitectureId::LightweightTiny, h, w, 0);
        let z = n.encode(&images(1, h, w, 0), Mode::Eval).unwrap();
        assert_eq!(z.values.dims()[2..], [h / 32, w / 32]);
        let d = n.decode(&z, Mode::Eval).unwrap();
        assert_eq!(d.dims(), [1, 1, h, w]);
    }
}

#[test]
fn decode_of_encode_is_forward() {
    for id in [ArchitectureId::LightweightTiny, ArchitectureId::ComplexTiny] {
        let n = net(id, 64, 96, 1);
        let x = images(2, 64, 96, 1);
        let a = n.decode(&n.encode(&x, Mode::Eval).unwrap(), Mode::Eval).unwrap();
        let b = n.forward_depth(&x, Mode::Eval).unwrap();
        assert_eq!(bytes(&a), bytes(&b), "{id}");
    }
}

#[test]
fn output_is_nonnegative_and_finite() {
    for id in [ArchitectureId::LightweightTiny, ArchitectureId::ComplexTiny] {
        let n = net(id, 64, 64, 2);
        let x = ((images(3, 64, 64, 2) - 0.5).unwrap() * 40.0).unwrap();
        let v: Vec<f32> = n.forward_depth(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|d| d.is_finite() && *d >= 0.0), "{id}");
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let n = net(ArchitectureId::LightweightTiny, 64, 64, 4);
    let one = images(1, 64, 64, 4);
    let x = Tensor::cat(&[&one, &one], 0).unwrap();
    let y = n.forward_depth(&x, Mode::Eval).unwrap();
    assert_eq!(bytes(&y.get(0).unwrap()), bytes(&y.get(1).unwrap()));
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let n = net(ArchitectureId::LightweightTiny, 64, 64, 0);
    assert!(matches!(n.encode(&images(1, 32, 64, 0), Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn parameter_partition() {
    for id in [ArchitectureId::LightweightTiny, ArchitectureId::ComplexTiny] {
        let n = net(id, 64, 64, 0);
        let adapt: BTreeSet<String> = n.adaptable_parameters().names().map(str::to_owned).collect();
        let frozen: BTreeSet<String> = n.frozen_encoder_parameters().names().map(str::to_owned).collect();
        let dec: BTreeSet<String> = n.decoder_params.names().map(str::to_owned).collect();
        let all: BTreeSet<String> = n.all_params().names().map(str::to_owned).collect();
        assert!(!adapt.is_empty() && !frozen.is_empty());
        assert!(adapt.is_disjoint(&frozen) && adapt.is_disjoint(&dec) && frozen.is_disjoint(&dec));
        let union: BTreeSet<String> = adapt.iter().chain(&frozen).chain(&dec).cloned().collect();
        assert_eq!(union, all, "{id}");
    }
}

#[test]
fn adaptable_parameters_share_storage() {
    let n = net(ArchitectureId::LightweightTiny, 64, 64, 0);
    let adapt = n.adaptable_parameters();
    let (name, var) = adapt.iter().next().unwrap();
    var.set(&var.zeros_like().unwrap()).unwrap();
    let seen = n.encoder_params.get(name).unwrap().as_tensor().abs().unwrap().sum_all().unwrap();
    assert_eq!(seen.to_scalar::<f32>().unwrap(), 0.0);
}

#[test]
fn snapshot_matches_then_stays_put() {
    let n = net(ArchitectureId::LightweightTiny, 64, 64, 5);
    let x = images(2, 64, 64, 5);
    let snap = n.snapshot_frozen_encoder().unwrap();
    let before = snap.fingerprint().unwrap();
    let z_net = n.encode(&x, Mode::Eval).unwrap();
    let z_snap = snap.encode(&x).unwrap();
    assert_eq!(bytes(&z_net.values), bytes(&z_snap.values));
    for (_, v) in n.adaptable_parameters().iter() {
        v.set(&(v.as_tensor() + 1.0).unwrap()).unwrap();
    }
    assert_eq!(snap.fingerprint().unwrap(), before);
    assert_ne!(bytes(&n.encode(&x, Mode::Eval).unwrap().values), bytes(&z_snap.values));
}

#[test]
fn snapshot_round_trips_through_a_checkpoint() {
    let n = net(ArchitectureId::LightweightTiny, 64, 64, 6);
    let snap = n.snapshot_frozen_encoder().unwrap();
    let mut ckpt = Checkpoint::new(Manifest::new(CheckpointKind::Pretrain, "lightweight-tiny", (64, 64), 6));
    ckpt.insert_all(snap.weights().clone());
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let restored = FrozenEncoder::from_weights(*n.spec(), back.arrays).unwrap();
    assert_eq!(restored.fingerprint().unwrap(), snap.fingerprint().unwrap());
}

/// Analytic gradients against central differences on an f64 copy of the
/// network, for five adaptable scalars per architecture.
#[test]
fn adaptable_gradients_match_finite_differences() {
    for id in [ArchitectureId::LightweightTiny, ArchitectureId::ComplexTiny] {
        let spec = ArchitectureSpec::new(id, 64, 64);
        let n = DepthNetwork::build(spec, &mut seeded_rng(8, "init"), DType::F32).unwrap();
        // Fresh BN layers are exact identities with zero bias, which parks
        // many activations on the ReLU kink; move off it first.
        let mut jitter = seeded_rng(8, "jitter");
        for (_, v) in n.all_params().iter() {
            let noise: Vec<f32> = (0..v.elem_count()).map(|_| 0.05 * jitter.normal() as f32).collect();
            let noise = Tensor::from_vec(noise, v.shape(), &Device::Cpu).unwrap();
            v.set(&(v.as_tensor() + noise).unwrap()).unwrap();
        }
        let wide: std::collections::BTreeMap<String, Tensor> = n
            .state()
            .unwrap()
            .into_iter()
            .map(|(k, t)| (k, t.to_dtype(DType::F64).unwrap()))
            .collect();
        let n64 = DepthNetwork::from_state(spec, &wide, DType::F64).unwrap();
        let x64 = images(1, 64, 64, 8).to_dtype(DType::F64).unwrap();
        let loss = || -> f64 { n64.forward_depth(&x64, Mode::Eval).unwrap().sum_all().unwrap().to_scalar().unwrap() };
        let grads = n64.forward_depth(&x64, Mode::Eval).unwrap().sum_all().unwrap().backward().unwrap();
        let adapt = n64.adaptable_parameters();
        // Central differences lose about |loss| * 1e-11 to cancellation, so
        // only components well above that are probed.
        let floor = 1e-6 * loss().abs().max(1.0);
        let mut rng = seeded_rng(8, "probe");
        let names: Vec<&str> = adapt.names().collect();
        let mut checked = 0;
        while checked < 5 {
            let name = names[rng.below(names.len())];
            let analytic: Vec<f64> = grads.get(adapt.get(name).unwrap()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let i = rng.below(analytic.len());
            let g = analytic[i];
            if g.abs() < floor {
                continue;
            }
            let var: &Var = adapt.get(name).unwrap();
            let flat: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            let eps = 1e-5;
            let shifted = |delta: f64| {
                let mut v = flat.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                loss()
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(flat, var.shape(), &Device::Cpu).unwrap()).unwrap();
            let rel = (fd - g).abs() / g.abs().max(fd.abs());
            assert!(rel < 1e-4, "{id} {name}[{i}]: fd {fd} analytic {g} rel {rel}");
            checked += 1;
        }
    }
}

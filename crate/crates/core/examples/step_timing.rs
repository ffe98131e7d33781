//! Wall-clock breakdown of one training step on the tiny lightweight network.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use depthadapt::discriminators::{DepthDiscriminator, DropoutStream, LatentDiscriminator, LdVariant};
use depthadapt::networks::{build_depth_network, ArchitectureId, ArchitectureSpec};
use depthadapt::nn::Mode;
use depthadapt::rng::seeded_rng;

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) -> T {
    let mut out = f();
    let t = Instant::now();
    for _ in 0..reps {
        out = f();
    }
    println!("{label:<28} {:8.2} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    out
}

fn main() -> depthadapt::Result<()> {
    let id: ArchitectureId = std::env::args().nth(1).unwrap_or("lightweight-tiny".into()).parse()?;
    let res: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(96);
    let b: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let net = build_depth_network(ArchitectureSpec::new(id, res, res), &mut seeded_rng(0, "t"))?;
    let x = Tensor::rand(0f32, 1f32, (b, 3, res, res), &Device::Cpu)?;
    let y = Tensor::rand(1f32, 9f32, (b, 1, res, res), &Device::Cpu)?;
    time("encode eval", 5, || net.encode(&x, Mode::Eval).unwrap());
    let z = net.encode(&x, Mode::Eval)?;
    time("decode eval", 5, || net.decode(&z, Mode::Eval).unwrap());
    let pred = time("forward train", 5, || net.forward_depth(&x, Mode::Train).unwrap());
    let loss = (pred - &y)?.abs()?.mean_all()?;
    time("backward (pretrain)", 5, || loss.backward().unwrap());
    let ld = LatentDiscriminator::build(LdVariant::Indoor, net.latent_shape(), &mut seeded_rng(0, "ld"), DType::F32)?;
    let mut drop = DropoutStream::new(seeded_rng(0, "d"));
    let s = time("ld score", 5, || ld.score(&z.values, Mode::Train, &mut drop).unwrap());
    time("ld backward", 5, || s.sum_all().unwrap().backward().unwrap());
    let dd = DepthDiscriminator::build((res, res), 8, 10.0, &mut seeded_rng(0, "dd"), DType::F32)?;
    let s = time("dd score", 5, || dd.score(&x, &y).unwrap());
    time("dd backward", 5, || s.sum_all().unwrap().backward().unwrap());
    let zt = net.encode(&x, Mode::Eval)?;
    let p = net.decode(&zt, Mode::Eval)?;
    let l = dd.score(&x, &p)?.sum_all()?;
    time("encoder-phase backward", 5, || l.backward().unwrap());
    Ok(())
}

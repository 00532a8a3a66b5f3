//! Ad-hoc timing harness (run with --nocapture); not a correctness test.

use std::time::Instant;

use bgnas::arch::{GroupVector, ModuleKind, NetworkConfig};
use bgnas::rng::NamedRng;
use bgnas::tensor::{Shape4, Tensor4};
use bgnas::train::{softmax_cross_entropy, Phase};
use bgnas::GroupNetF;
use rand::Rng;

#[test]
#[ignore]
fn time_one_training_step() {
    let cfg = NetworkConfig::mobilenet13(ModuleKind::M1, 0.25, (1, 28, 28), 10).unwrap();
    let mut init = NamedRng::new(1, "init");
    let (mut net, mut store) = GroupNetF::new(&cfg, &mut init).unwrap();
    let genome = GroupVector::all_ones(cfg.num_slots());
    let mut rng = NamedRng::new(2, "x");
    let x = Tensor4::from_vec(
        Shape4::new(64, 1, 28, 28),
        (0..64 * 784).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let tc = bgnas::train::TrainConfig { total_steps: 100, ..Default::default() };

    // warmup
    let logits = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
    let (_, dl) = softmax_cross_entropy(&logits, &labels);
    net.zero_grads(&mut store);
    net.backward(&dl, &mut store, &genome);

    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
    }
    println!("forward (train): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let logits = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
        let (_, dl) = softmax_cross_entropy(&logits, &labels);
        net.zero_grads(&mut store);
        net.backward(&dl, &mut store, &genome);
    }
    println!("forward+backward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for s in 0..reps {
        net.adam_step_all(&mut store, &tc, s as u64);
    }
    println!("adam: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.forward(&x, &store, &genome, Phase::Eval);
    }
    println!("forward (eval): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

#[test]
#[ignore]
fn time_components() {
    use bgnas::binary::{binary_conv_packed, pack_acts, pack_weights_block_diagonal, ConvGeometry};
    use bgnas::train::BatchNorm2d;

    let cfg = NetworkConfig::mobilenet13(ModuleKind::M1, 0.25, (1, 28, 28), 10).unwrap();
    let mut rng = NamedRng::new(1, "t");
    // masters for all 13 slots
    let masters: Vec<Tensor4<f32>> = cfg
        .slots()
        .iter()
        .map(|s| {
            let shape = Shape4::new(s.out_channels, s.in_channels, 3, 3);
            Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        })
        .collect();
    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        for m in &masters {
            std::hint::black_box(pack_weights_block_diagonal(m, 1));
        }
    }
    println!("pack_weights all slots g=1: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // pointwise own weights (the 13 pw convs sized (out, in, 1, 1))
    let pw: Vec<Tensor4<f32>> = cfg
        .layers
        .iter()
        .map(|l| {
            let shape = Shape4::new(l.out_channels, l.in_channels, 1, 1);
            Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        })
        .collect();
    let t = Instant::now();
    for _ in 0..reps {
        for m in &pw {
            std::hint::black_box(pack_weights_block_diagonal(m, 1));
        }
    }
    println!("pack_weights pointwise: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // batchnorm + pack_acts + kernel over representative activation sizes
    let trace = cfg.spatial_trace();
    let mut bn_ms = 0.0;
    let mut pack_ms = 0.0;
    let mut kern_ms = 0.0;
    for (i, l) in cfg.layers.iter().enumerate() {
        let (h, w) = trace[i];
        let shape = Shape4::new(64, l.in_channels, h, w);
        let x = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let mut bn = BatchNorm2d::<f32>::new(l.in_channels);
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(bn.forward(&x, Phase::Eval));
        }
        bn_ms += t.elapsed().as_secs_f64() * 1000.0 / reps as f64;

        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(pack_acts(&x));
        }
        pack_ms += t.elapsed().as_secs_f64() * 1000.0 / reps as f64;

        let geom = ConvGeometry::new(l.in_channels, l.in_channels, (3, 3), l.stride, (1, 1), 1);
        let pa = pack_acts(&x);
        let pw = pack_weights_block_diagonal(&masters[i], 1);
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(binary_conv_packed(&pa, &pw, &geom));
        }
        kern_ms += t.elapsed().as_secs_f64() * 1000.0 / reps as f64;
    }
    println!("bn eval fwd (bn1 of each block): {bn_ms:.1} ms");
    println!("pack_acts (each block input): {pack_ms:.1} ms");
    println!("binary 3x3 kernel g=1 (all blocks): {kern_ms:.1} ms");
}

#[test]
#[ignore]
fn time_grad_kernels() {
    use bgnas::binary::ConvGeometry;
    use bgnas::train::{conv2d_input_grad, conv2d_weight_grad};

    let mut rng = NamedRng::new(9, "g");
    // L7-shaped case: 128ch 2x2 spatial, and L12-shaped: 256ch 1x1
    for (c, h, name) in [(128usize, 2usize, "L7"), (256, 1, "L12"), (32, 7, "L2"), (16, 14, "L0x")] {
        let geom = ConvGeometry::new(c, c, (3, 3), (1, 1), (1, 1), 1);
        let x = Tensor4::from_vec(
            Shape4::new(64, c, h, h),
            (0..64 * c * h * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let dy = Tensor4::from_vec(
            Shape4::new(64, c, h, h),
            (0..64 * c * h * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let w = Tensor4::from_vec(
            Shape4::new(c, c, 3, 3),
            (0..c * c * 9).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let reps = 10;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(conv2d_weight_grad(&x, &dy, &geom));
        }
        let wg = t.elapsed().as_secs_f64() * 1000.0 / reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(conv2d_input_grad(&dy, &w, &geom, (h, h)));
        }
        let ig = t.elapsed().as_secs_f64() * 1000.0 / reps as f64;
        let macs = 64.0 * (c * c * 9 * h * h) as f64;
        println!("{name}: weight_grad {wg:.1} ms ({:.1} GF/s), input_grad {ig:.1} ms ({:.1} GF/s)",
            macs / wg / 1e6, macs / ig / 1e6);
    }
}

#[test]
#[ignore]
fn time_searched_genome_step() {
    let cfg = NetworkConfig::mobilenet13(ModuleKind::M1, 0.25, (1, 28, 28), 10).unwrap();
    let mut init = NamedRng::new(1, "init");
    let (mut net, mut store) = GroupNetF::new(&cfg, &mut init).unwrap();
    let genome = GroupVector(vec![2, 4, 8, 8, 2, 8, 2, 4, 4, 2, 8, 4, 256]);
    let mut rng = NamedRng::new(2, "x");
    let x = Tensor4::from_vec(
        Shape4::new(64, 1, 28, 28),
        (0..64 * 784).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let tc = bgnas::train::TrainConfig { total_steps: 100, ..Default::default() };
    let logits = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
    let (_, dl) = softmax_cross_entropy(&logits, &labels);
    net.zero_grads(&mut store);
    net.backward(&dl, &mut store, &genome);

    let reps = 10;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
    }
    println!("searched fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t = Instant::now();
    for _ in 0..reps {
        let logits = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
        let (_, dl) = softmax_cross_entropy(&logits, &labels);
        net.zero_grads(&mut store);
        net.backward(&dl, &mut store, &genome);
    }
    println!("searched fwd+zero+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t = Instant::now();
    for _ in 0..reps {
        net.zero_grads(&mut store);
    }
    println!("zero_grads: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t = Instant::now();
    for s in 0..reps {
        net.adam_step_all(&mut store, &tc, s as u64);
    }
    println!("adam: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

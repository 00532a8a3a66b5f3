//! End-to-end gradient check: with binarization replaced by the smooth
//! surrogate, analytic input gradients must match finite differences.

use bgnas::arch::{GroupNet, GroupVector, LayerSpec, ModuleKind, NetworkConfig};
use bgnas::rng::NamedRng;
use bgnas::tensor::{Shape4, Tensor4};
use bgnas::train::{softmax_cross_entropy, Phase};
use rand::Rng;

fn two_layer_config(kind: ModuleKind) -> NetworkConfig {
    let mut cfg = NetworkConfig::mobilenet13(kind, 1.0, (1, 8, 8), 4).unwrap();
    cfg.stem.out_channels = 4;
    cfg.layers = vec![
        LayerSpec {
            index: 0,
            in_channels: 4,
            out_channels: 4,
            stride: (1, 1),
            module_kind: kind,
            searchable_slots: 1,
        },
        LayerSpec {
            index: 1,
            in_channels: 4,
            out_channels: 8,
            stride: (2, 2),
            module_kind: kind,
            searchable_slots: if kind == ModuleKind::M2 { 2 } else { 1 },
        },
    ];
    cfg.validate().unwrap();
    cfg
}

fn check_kind(kind: ModuleKind, genome: Vec<usize>) {
    let cfg = two_layer_config(kind);
    let genome = GroupVector(genome);
    cfg.validate_genome(&genome).unwrap();
    let mut init = NamedRng::new(91, "init");
    let (net, store) = GroupNet::<f64>::new(&cfg, &mut init).unwrap();

    let mut rng = NamedRng::new(92, "x");
    let shape = Shape4::new(4, 1, 8, 8);
    let x = Tensor4::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let labels = vec![0usize, 1, 2, 3];
    let smooth = Phase::Train { smooth: true };

    let loss_of = |x: &Tensor4<f64>| -> f64 {
        let mut net = net.clone();
        let logits = net.forward(x, &store, &genome, smooth);
        let (loss, _) = softmax_cross_entropy(&logits, &labels);
        loss
    };

    let mut live = net.clone();
    let mut live_store = store.clone();
    let logits = live.forward(&x, &store, &genome, smooth);
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels);
    live.zero_grads(&mut live_store);
    let dx = live.backward(&dlogits, &mut live_store, &genome);

    let h = 1e-4;
    let mut checked = 0usize;
    for i in (0..shape.len()).step_by(13) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
        let analytic = dx.data()[i];
        let denom = numeric.abs().max(analytic.abs()).max(1e-4);
        assert!(
            (numeric - analytic).abs() / denom < 1e-3,
            "{kind:?} input {i}: numeric {numeric:.6e} vs analytic {analytic:.6e}"
        );
        checked += 1;
    }
    assert!(checked >= 15);
}

#[test]
fn smooth_surrogate_input_gradients_match_finite_differences_m1() {
    check_kind(ModuleKind::M1, vec![2, 4]);
}

#[test]
fn smooth_surrogate_input_gradients_match_finite_differences_m2() {
    check_kind(ModuleKind::M2, vec![4, 2, 4]);
}

#[test]
fn smooth_surrogate_input_gradients_match_finite_differences_m3() {
    check_kind(ModuleKind::M3, vec![1, 4]);
}

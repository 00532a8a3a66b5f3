//! One full-sized latent weight tensor per searchable slot, from which every
//! group choice reads a block-diagonal crop.

use rand::Rng;

use crate::num::Scalar;
use crate::rng::NamedRng;
use crate::tensor::{Shape4, Tensor4};
use crate::train::{adam_step, Parameter, TrainConfig};

use super::{NetworkConfig, SlotSpec};

/// Master weights for all searchable slots. Slot `i` holds a full
/// `(out, in, kh, kw)` latent tensor; a choice of `g` groups reads the
/// entries `(o, i)` with `⌊o/(out/g)⌋ == ⌊i/(in/g)⌋`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedWeightStore<T> {
    specs: Vec<SlotSpec>,
    slots: Vec<Parameter<T>>,
}

/// Standard normal via Box-Muller on the named stream; keeps init identical
/// across scalar types.
pub(crate) fn randn(rng: &mut NamedRng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (-2.0 * u.ln()).sqrt();
        let z = r * v.cos();
        if z.is_finite() {
            return z;
        }
    }
}

pub(crate) fn he_normal<T: Scalar>(shape: Shape4, fan_in: usize, rng: &mut NamedRng) -> Tensor4<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.len()).map(|_| T::cast(randn(rng) * std)).collect();
    Tensor4::from_vec(shape, data)
}

impl<T: Scalar> SharedWeightStore<T> {
    pub fn init(config: &NetworkConfig, rng: &mut NamedRng) -> Self {
        let specs = config.slots();
        let slots = specs
            .iter()
            .map(|s| {
                let shape = Shape4::new(s.out_channels, s.in_channels, s.kernel.0, s.kernel.1);
                let fan_in = s.in_channels * s.kernel.0 * s.kernel.1;
                Parameter::new(he_normal(shape, fan_in, rng))
            })
            .collect();
        SharedWeightStore { specs, slots }
    }

    pub fn specs(&self) -> &[SlotSpec] {
        &self.specs
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, i: usize) -> &Parameter<T> {
        &self.slots[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.slots[i]
    }

    /// Block-diagonal crop of slot `i` for `g` groups, shaped
    /// `(out, in/g, kh, kw)`.
    pub fn view(&self, i: usize, g: usize) -> Tensor4<T> {
        let spec = &self.specs[i];
        assert!(
            spec.candidates().contains(&g),
            "group {g} invalid for slot {i} ({}x{})",
            spec.in_channels,
            spec.out_channels
        );
        crop_block_diagonal(&self.slots[i].value, g)
    }

    /// Accumulates a crop-shaped gradient back into the master gradient.
    /// Entries outside the block diagonal are untouched (they stay zero for
    /// the step unless another genome touched them).
    pub fn scatter_grad(&mut self, i: usize, g: usize, grad: &Tensor4<T>) {
        let spec = &self.specs[i];
        assert!(spec.candidates().contains(&g), "group {g} invalid for slot {i}");
        let master = &mut self.slots[i].grad;
        let ms = master.shape();
        let gs = grad.shape();
        assert_eq!(gs.n, ms.n);
        assert_eq!(gs.c, ms.c / g);
        let out_per_group = ms.n / g;
        let taps = ms.h * ms.w;
        let md = master.data_mut();
        let gd = grad.data();
        for o in 0..gs.n {
            let base_in = (o / out_per_group) * gs.c;
            let dst = &mut md[(o * ms.c + base_in) * taps..][..gs.c * taps];
            let src = &gd[o * gs.c * taps..(o + 1) * gs.c * taps];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.slots {
            p.zero_grad();
        }
    }

    pub fn adam_step_all(&mut self, cfg: &TrainConfig, step: u64) {
        for p in &mut self.slots {
            adam_step(p, cfg, step);
        }
    }
}

/// Reads the block-diagonal entries of a full `(out, in, kh, kw)` tensor for
/// `g` groups into a `(out, in/g, kh, kw)` crop.
pub fn crop_block_diagonal<T: Scalar>(master: &Tensor4<T>, g: usize) -> Tensor4<T> {
    let ms = master.shape();
    assert!(ms.n % g == 0 && ms.c % g == 0, "groups {g} must divide {ms:?}");
    let cpg = ms.c / g;
    let out_per_group = ms.n / g;
    let taps = ms.h * ms.w;
    let mut crop = Tensor4::zeros(Shape4::new(ms.n, cpg, ms.h, ms.w));
    let md = master.data();
    let cd = crop.data_mut();
    for o in 0..ms.n {
        let base_in = (o / out_per_group) * cpg;
        // The (in, kh, kw) tail of one output channel is contiguous.
        let src = &md[(o * ms.c + base_in) * taps..][..cpg * taps];
        cd[o * cpg * taps..(o + 1) * cpg * taps].copy_from_slice(src);
    }
    crop
}

/// Expands a `(out, in/g, kh, kw)` crop to full `(out, in, kh, kw)` shape,
/// zero everywhere off the block diagonal. Inverse of [`crop_block_diagonal`]
/// on the diagonal entries; used by equivalence tests.
pub fn embed_block_diagonal<T: Scalar>(crop: &Tensor4<T>, g: usize) -> Tensor4<T> {
    let cs = crop.shape();
    let full_in = cs.c * g;
    assert!(cs.n % g == 0, "groups {g} must divide out channels {}", cs.n);
    let out_per_group = cs.n / g;
    let mut full = Tensor4::zeros(Shape4::new(cs.n, full_in, cs.h, cs.w));
    for o in 0..cs.n {
        let base_in = (o / out_per_group) * cs.c;
        for j in 0..cs.c {
            for r in 0..cs.h {
                for s in 0..cs.w {
                    *full.at_mut(o, base_in + j, r, s) = crop.at(o, j, r, s);
                }
            }
        }
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModuleKind;
    use crate::binary::{float_group_conv2d, ConvGeometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_store() -> SharedWeightStore<f32> {
        let cfg = NetworkConfig::mobilenet13(ModuleKind::M1, 0.25, (1, 28, 28), 10).unwrap();
        let mut rng = NamedRng::new(1, "init");
        SharedWeightStore::init(&cfg, &mut rng)
    }

    #[test]
    fn view_with_group_one_is_identity_crop() {
        let store = toy_store();
        let crop = store.view(2, 1);
        assert_eq!(crop, store.slot(2).value);
    }

    #[test]
    fn depthwise_view_reads_the_diagonal() {
        let store = toy_store();
        let spec = &store.specs()[0]; // 8x8 3x3 slot
        let g = spec.in_channels;
        let crop = store.view(0, g);
        let master = &store.slot(0).value;
        assert_eq!(crop.shape().c, 1);
        for o in 0..spec.out_channels {
            for r in 0..3 {
                for s in 0..3 {
                    assert_eq!(crop.at(o, 0, r, s), master.at(o, o, r, s));
                }
            }
        }
    }

    #[test]
    fn crop_equals_masked_full_convolution() {
        // Running a group-g conv on the crop must match a groups=1 conv on
        // the block-diagonally masked full tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &g in &[1usize, 2, 4] {
            let master_data: Vec<f32> = (0..4 * 4 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let master = Tensor4::from_vec(Shape4::new(4, 4, 3, 3), master_data);
            let crop = crop_block_diagonal(&master, g);
            let masked = embed_block_diagonal(&crop, g);

            let x_data: Vec<f32> = (0..2 * 4 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor4::from_vec(Shape4::new(2, 4, 5, 5), x_data);
            let yg = float_group_conv2d(&x, &crop, &ConvGeometry::new(4, 4, (3, 3), (1, 1), (1, 1), g));
            let yf = float_group_conv2d(&x, &masked, &ConvGeometry::new(4, 4, (3, 3), (1, 1), (1, 1), 1));
            for (a, b) in yg.data().iter().zip(yf.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scatter_grad_touches_only_the_block_diagonal() {
        let mut store = toy_store();
        let spec = store.specs()[4].clone();
        let g = 2;
        let crop_shape = Shape4::new(spec.out_channels, spec.in_channels / g, 3, 3);
        let grad = Tensor4::full(crop_shape, 1.0f32);
        store.scatter_grad(4, g, &grad);

        let master_grad = &store.slot(4).grad;
        let out_per_group = spec.out_channels / g;
        let cpg = spec.in_channels / g;
        for o in 0..spec.out_channels {
            for i in 0..spec.in_channels {
                let inside = i / cpg == o / out_per_group;
                for r in 0..3 {
                    for s in 0..3 {
                        let v = master_grad.at(o, i, r, s);
                        if inside {
                            assert_eq!(v, 1.0);
                        } else {
                            assert_eq!(v, 0.0, "off-diagonal grad must stay exactly zero");
                        }
                    }
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "invalid for slot")]
    fn invalid_group_is_contract_violation() {
        let store = toy_store();
        let _ = store.view(0, 3); // slot 0 is 8x8; 3 is not a divisor
    }
}

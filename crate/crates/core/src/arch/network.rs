//! Stem → 13 blocks → global average pool → classifier.

use crate::binary::ConvGeometry;
use crate::error::Result;
use crate::num::Scalar;
use crate::rng::NamedRng;
use crate::tensor::{Shape4, Tensor4};
use crate::train::{adam_step, BatchNorm2d, Parameter, Phase, TrainConfig};

use super::block::{Block, ConvWeight, RealConv2d};
use super::store::{he_normal, SharedWeightStore};
use super::{GroupVector, ModuleKind, NetworkConfig};

/// Full-precision classifier on pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    saved_x: Option<Tensor4<T>>,
}

impl<T: Scalar> Linear<T> {
    fn new(in_features: usize, out_features: usize, rng: &mut NamedRng) -> Self {
        Linear {
            weight: Parameter::new(he_normal(
                Shape4::new(out_features, in_features, 1, 1),
                in_features,
                rng,
            )),
            bias: Parameter::new(Tensor4::zeros(Shape4::new(1, out_features, 1, 1))),
            saved_x: None,
        }
    }

    fn forward(&mut self, x: &Tensor4<T>, phase: Phase) -> Tensor4<T> {
        let s = x.shape();
        let out_f = self.weight.value.shape().n;
        let in_f = self.weight.value.shape().c;
        assert_eq!(s.c, in_f);
        assert_eq!(s.h * s.w, 1, "classifier expects pooled features");
        if phase.is_train() {
            self.saved_x = Some(x.clone());
        }
        let mut y = Tensor4::zeros(Shape4::new(s.n, out_f, 1, 1));
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        for n in 0..s.n {
            let xi = &x.data()[n * in_f..(n + 1) * in_f];
            let yo = &mut y.data_mut()[n * out_f..(n + 1) * out_f];
            for (k, out) in yo.iter_mut().enumerate() {
                let row = &w[k * in_f..(k + 1) * in_f];
                let mut acc = b[k];
                for (&wv, &xv) in row.iter().zip(xi) {
                    acc += wv * xv;
                }
                *out = acc;
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let x = self.saved_x.take().expect("backward without forward");
        let s = x.shape();
        let out_f = self.weight.value.shape().n;
        let in_f = self.weight.value.shape().c;
        let mut dx = Tensor4::zeros(s);
        {
            let w = self.weight.value.data();
            let dw = self.weight.grad.data_mut();
            let db = self.bias.grad.data_mut();
            for n in 0..s.n {
                let xi = &x.data()[n * in_f..(n + 1) * in_f];
                let gi = &dy.data()[n * out_f..(n + 1) * out_f];
                let dxi = &mut dx.data_mut()[n * in_f..(n + 1) * in_f];
                for (k, &g) in gi.iter().enumerate() {
                    db[k] += g;
                    let wrow = &w[k * in_f..(k + 1) * in_f];
                    let dwrow = &mut dw[k * in_f..(k + 1) * in_f];
                    for c in 0..in_f {
                        dwrow[c] += g * xi[c];
                        dxi[c] += g * wrow[c];
                    }
                }
            }
        }
        dx
    }
}

/// The executable network. Searchable binary (and M2 projection) weights are
/// views into a [`SharedWeightStore`]; everything else is owned.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNet<T> {
    pub config: NetworkConfig,
    stem: RealConv2d<T>,
    blocks: Vec<Block<T>>,
    head_bn: BatchNorm2d<T>,
    classifier: Linear<T>,
    /// Genome slice per block: (offset, length).
    block_slots: Vec<(usize, usize)>,
    saved_pool_hw: Option<(usize, usize)>,
}

impl<T: Scalar> GroupNet<T> {
    /// Builds the network and a fresh weight store, drawing every initial
    /// weight from `rng`. Two nets built from equal streams are identical;
    /// they can share either store.
    pub fn new(config: &NetworkConfig, rng: &mut NamedRng) -> Result<(Self, SharedWeightStore<T>)> {
        config.validate()?;
        let store = SharedWeightStore::init(config, rng);

        let (in_ch, _, _) = config.input;
        let stem_geom = ConvGeometry::new(
            in_ch,
            config.stem.out_channels,
            (config.stem.kernel, config.stem.kernel),
            (config.stem.stride, config.stem.stride),
            (config.stem.padding, config.stem.padding),
            1,
        );
        let stem = RealConv2d::own(stem_geom, rng);

        let mut blocks = Vec::with_capacity(config.layers.len());
        let mut block_slots = Vec::with_capacity(config.layers.len());
        let mut slot = 0usize;
        for spec in &config.layers {
            let has_proj_slot = spec.module_kind == ModuleKind::M2 && spec.shrinks();
            let len = if has_proj_slot { 2 } else { 1 };
            let slot_proj = has_proj_slot.then_some(slot + 1);
            blocks.push(Block::new(*spec, slot, slot_proj, rng));
            block_slots.push((slot, len));
            slot += len;
        }

        let last_ch = config.layers.last().expect("validated").out_channels;
        let classifier = Linear::new(last_ch, config.num_classes, rng);

        Ok((
            GroupNet {
                config: config.clone(),
                stem,
                blocks,
                head_bn: BatchNorm2d::new(last_ch),
                classifier,
                block_slots,
                saved_pool_hw: None,
            },
            store,
        ))
    }

    /// Forward pass under a genome. Returns logits shaped `(n, classes, 1, 1)`.
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        genome: &GroupVector,
        phase: Phase,
    ) -> Tensor4<T> {
        assert_eq!(genome.len(), store.num_slots(), "genome length mismatch");
        let mut t = self.stem.forward(x, store, 1, phase);
        for (block, &(off, len)) in self.blocks.iter_mut().zip(&self.block_slots) {
            t = block.forward(&t, store, &genome.0[off..off + len], phase);
        }
        // Normalize the last block's output so pooled features arrive at the
        // classifier on a sane scale.
        let t = self.head_bn.forward(&t, phase);
        let s = t.shape();
        if phase.is_train() {
            self.saved_pool_hw = Some((s.h, s.w));
        }
        let pooled = global_average_pool(&t);
        self.classifier.forward(&pooled, phase)
    }

    /// Backward from the logits gradient. Accumulates into both own
    /// parameters and the store; returns the gradient with respect to the
    /// network input.
    pub fn backward(
        &mut self,
        dlogits: &Tensor4<T>,
        store: &mut SharedWeightStore<T>,
        genome: &GroupVector,
    ) -> Tensor4<T> {
        let dpool = self.classifier.backward(dlogits);
        let (h, w) = self.saved_pool_hw.take().expect("backward without forward");
        let dt = spread_pool_grad(&dpool, h, w);
        let mut dt = self.head_bn.backward(&dt);
        for (block, &(off, len)) in self.blocks.iter_mut().zip(&self.block_slots).rev() {
            dt = block.backward(&dt, store, &genome.0[off..off + len]);
        }
        self.stem.backward(&dt, store, 1)
    }

    /// Own parameters (excluding store slots) with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<(String, &mut Parameter<T>)> = Vec::new();
        if let ConvWeight::Own(p) = &mut self.stem.weight {
            out.push(("stem.weight".into(), p));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, p) in block.named_params_mut() {
                out.push((format!("block{i}.{name}"), p));
            }
        }
        out.push(("head.bn.gamma".into(), &mut self.head_bn.gamma));
        out.push(("head.bn.beta".into(), &mut self.head_bn.beta));
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        out
    }

    /// Batch-norm layers with stable names, for running-stat persistence.
    pub fn named_bn_mut(&mut self) -> Vec<(String, &mut BatchNorm2d<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, bn) in block.named_bn_mut() {
                out.push((format!("block{i}.{name}"), bn));
            }
        }
        out.push(("head.bn".into(), &mut self.head_bn));
        out
    }

    pub fn zero_grads(&mut self, store: &mut SharedWeightStore<T>) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
        store.zero_grads();
    }

    pub fn adam_step_all(&mut self, store: &mut SharedWeightStore<T>, cfg: &TrainConfig, step: u64) {
        for (_, p) in self.named_params_mut() {
            adam_step(p, cfg, step);
        }
        store.adam_step_all(cfg, step);
    }

    pub fn reset_bn_stats(&mut self) {
        for (_, bn) in self.named_bn_mut() {
            bn.reset_running_stats();
        }
    }
}

fn global_average_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.h * s.w;
    let inv = T::cast(1.0 / plane as f64);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        out.data_mut()[i] = chunk.iter().copied().sum::<T>() * inv;
    }
    out
}

fn spread_pool_grad<T: Scalar>(dpool: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = dpool.shape();
    let plane = h * w;
    let inv = T::cast(1.0 / plane as f64);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let g = dpool.data()[i] * inv;
        chunk.fill(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TRAIN: Phase = Phase::Train { smooth: false };

    fn mnist_desk_config() -> NetworkConfig {
        NetworkConfig::mobilenet13(ModuleKind::M1, 0.25, (1, 28, 28), 10).unwrap()
    }

    fn random_batch(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape4::new(n, shape.0, shape.1, shape.2);
        Tensor4::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn mnist_desk_forward_yields_ten_logits() {
        let cfg = mnist_desk_config();
        let (mut net, store) = GroupNet::<f32>::new(&cfg, &mut NamedRng::new(7, "init")).unwrap();
        let x = random_batch(3, cfg.input, 1);
        let y = net.forward(&x, &store, &GroupVector::all_ones(13), TRAIN);
        assert_eq!(y.shape(), Shape4::new(3, 10, 1, 1));
        assert!(y.all_finite());
    }

    #[test]
    fn forward_works_for_every_module_kind_and_random_genomes() {
        for kind in [ModuleKind::M1, ModuleKind::M2, ModuleKind::M3] {
            let cfg = NetworkConfig::mobilenet13(kind, 0.25, (1, 28, 28), 10).unwrap();
            let (mut net, store) = GroupNet::<f32>::new(&cfg, &mut NamedRng::new(9, "init")).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let slots = cfg.slots();
            for _ in 0..3 {
                let genome = GroupVector(
                    slots
                        .iter()
                        .map(|s| {
                            let c = s.candidates();
                            c[rng.gen_range(0..c.len())]
                        })
                        .collect(),
                );
                let x = random_batch(2, cfg.input, 13);
                let y = net.forward(&x, &store, &genome, Phase::Eval);
                assert_eq!(y.shape(), Shape4::new(2, 10, 1, 1));
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn two_nets_sharing_one_store_see_each_others_updates() {
        let cfg = mnist_desk_config();
        let (mut net_a, mut store) = GroupNet::<f32>::new(&cfg, &mut NamedRng::new(21, "init")).unwrap();
        let (mut net_b, _own_store) = GroupNet::<f32>::new(&cfg, &mut NamedRng::new(21, "init")).unwrap();
        let genome = GroupVector::all_ones(13);
        let x = random_batch(4, cfg.input, 2);
        let labels = vec![0usize, 1, 2, 3];

        let before_b = net_b.forward(&x, &store, &genome, Phase::Eval);

        // One training step driven through net A updates the shared store.
        let logits = net_a.forward(&x, &store, &genome, TRAIN);
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels);
        net_a.zero_grads(&mut store);
        net_a.backward(&dlogits, &mut store, &genome);
        let tc = TrainConfig {
            learning_rate: 0.05,
            total_steps: 10,
            ..TrainConfig::default()
        };
        store.adam_step_all(&tc, 0);

        let after_b = net_b.forward(&x, &store, &genome, Phase::Eval);
        assert_ne!(
            before_b.data(),
            after_b.data(),
            "store update must be visible through the other network"
        );
    }

    #[test]
    fn gradient_locality_outside_crop_is_exactly_zero() {
        let cfg = mnist_desk_config();
        let (mut net, mut store) = GroupNet::<f32>::new(&cfg, &mut NamedRng::new(3, "init")).unwrap();
        let slots = cfg.slots();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let genome = GroupVector(
            slots
                .iter()
                .map(|s| {
                    let c = s.candidates();
                    c[rng.gen_range(0..c.len())]
                })
                .collect(),
        );
        let x = random_batch(4, cfg.input, 5);
        let labels = vec![1usize, 2, 3, 4];
        let logits = net.forward(&x, &store, &genome, TRAIN);
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels);
        net.zero_grads(&mut store);
        net.backward(&dlogits, &mut store, &genome);

        for (i, _spec) in slots.iter().enumerate() {
            let g = genome.0[i];
            let master = &store.slot(i).grad;
            let ms = master.shape();
            let cpg = ms.c / g;
            let opg = ms.n / g;
            for o in 0..ms.n {
                for ic in 0..ms.c {
                    if ic / cpg != o / opg {
                        for r in 0..ms.h {
                            for s in 0..ms.w {
                                assert_eq!(
                                    master.at(o, ic, r, s),
                                    0.0,
                                    "slot {i} grad leaked outside crop"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_normalizes_by_plane_size() {
        let x = Tensor4::from_vec(
            Shape4::new(1, 2, 2, 2),
            vec![1.0f32, 2.0, 3.0, 4.0, -1.0, -1.0, -1.0, -1.0],
        );
        let p = global_average_pool(&x);
        assert_eq!(p.data(), &[2.5, -1.0]);
    }
}

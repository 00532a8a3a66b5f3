//! Layer primitives and the M1/M2/M3 block wiring.
//!
//! Binary stages follow the BN → sign → binary conv ordering. Skip
//! connections are added wherever an output shape matches its input:
//! around the 3×3 stage when the stride is 1, around the pointwise stage
//! when channel counts match, and around the whole block when both hold.
//! Downsampling blocks of M1/M2 add a full-precision strided 1×1 projection
//! of the block input instead of an identity skip.

use crate::binary::{
    binary_conv_packed, float_group_conv2d, pack_acts, pack_weights_block_diagonal,
    scaling_factor, ConvGeometry, ScaleVector,
};
use crate::num::Scalar;
use crate::rng::NamedRng;
use crate::tensor::{sign_pm1, Shape4, Tensor4};
use crate::train::{
    binary_weight_backward, conv2d_backward, conv2d_forward, ste_activation_backward_inplace,
    surrogate, BatchNorm2d, Parameter, Phase,
};

use super::store::{he_normal, SharedWeightStore};
use super::{LayerSpec, ModuleKind};

/// Where a convolution's latent weights live.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeight<T> {
    Own(Parameter<T>),
    Shared(usize),
}

impl<T: Scalar> ConvWeight<T> {
    fn value<'a>(&'a self, store: &'a SharedWeightStore<T>, g: usize) -> Tensor4<T> {
        match self {
            ConvWeight::Own(p) => {
                assert_eq!(g, 1, "own weights are stored at their fixed group count");
                p.value.clone()
            }
            ConvWeight::Shared(slot) => store.view(*slot, g),
        }
    }

    fn accumulate(&mut self, store: &mut SharedWeightStore<T>, g: usize, grad: &Tensor4<T>) {
        match self {
            ConvWeight::Own(p) => p.grad += grad,
            ConvWeight::Shared(slot) => store.scatter_grad(*slot, g, grad),
        }
    }
}

/// Full-precision convolution, optionally grouped and store-backed.
#[derive(Debug, Clone, PartialEq)]
pub struct RealConv2d<T> {
    pub weight: ConvWeight<T>,
    base: ConvGeometry,
    saved_x: Option<Tensor4<T>>,
}

impl<T: Scalar> RealConv2d<T> {
    pub fn own(geom: ConvGeometry, rng: &mut NamedRng) -> Self {
        assert_eq!(geom.groups, 1);
        let fan_in = geom.in_per_group() * geom.kernel.0 * geom.kernel.1;
        let weight = Parameter::new(he_normal(geom.weight_shape(), fan_in, rng));
        RealConv2d {
            weight: ConvWeight::Own(weight),
            base: geom,
            saved_x: None,
        }
    }

    pub fn shared(slot: usize, geom: ConvGeometry) -> Self {
        RealConv2d {
            weight: ConvWeight::Shared(slot),
            base: geom,
            saved_x: None,
        }
    }

    fn geometry(&self, g: usize) -> ConvGeometry {
        ConvGeometry { groups: g, ..self.base }
    }

    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        g: usize,
        phase: Phase,
    ) -> Tensor4<T> {
        let geom = self.geometry(g);
        let w = self.weight.value(store, g);
        if phase.is_train() {
            self.saved_x = Some(x.clone());
        }
        conv2d_forward(x, &w, &geom)
    }

    pub fn backward(
        &mut self,
        dy: &Tensor4<T>,
        store: &mut SharedWeightStore<T>,
        g: usize,
    ) -> Tensor4<T> {
        let geom = self.geometry(g);
        let x = self.saved_x.take().expect("backward without forward");
        let w = self.weight.value(store, g);
        let (dw, dx) = conv2d_backward(&x, dy, &w, &geom);
        self.weight.accumulate(store, g, &dw);
        dx
    }
}

/// Binary convolution: weights binarize to `α·sign(w)` fresh each forward.
/// Nothing is saved here — the owning unit keeps the pre-sign activations
/// and reconstructs the conv input for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryConv2d<T> {
    pub weight: ConvWeight<T>,
    base: ConvGeometry,
}

impl<T: Scalar> BinaryConv2d<T> {
    pub fn own(geom: ConvGeometry, rng: &mut NamedRng) -> Self {
        assert_eq!(geom.groups, 1);
        let fan_in = geom.in_per_group() * geom.kernel.0 * geom.kernel.1;
        let weight = Parameter::new(he_normal(geom.weight_shape(), fan_in, rng));
        BinaryConv2d {
            weight: ConvWeight::Own(weight),
            base: geom,
        }
    }

    pub fn shared(slot: usize, geom: ConvGeometry) -> Self {
        BinaryConv2d {
            weight: ConvWeight::Shared(slot),
            base: geom,
        }
    }

    fn geometry(&self, g: usize) -> ConvGeometry {
        ConvGeometry { groups: g, ..self.base }
    }

    fn latent_and_scale(
        &self,
        store: &SharedWeightStore<T>,
        g: usize,
    ) -> (Tensor4<T>, ScaleVector<T>) {
        let latent = self.weight.value(store, g);
        let scale = scaling_factor(&latent);
        (latent, scale)
    }

    fn master<'a>(&'a self, store: &'a SharedWeightStore<T>) -> &'a Tensor4<T> {
        match &self.weight {
            ConvWeight::Own(p) => &p.value,
            ConvWeight::Shared(slot) => &store.slot(*slot).value,
        }
    }

    /// XNOR-popcount forward: signs the pre-activation tensor, crops and
    /// binarizes the latent weights, and runs the packed kernel.
    pub fn forward_signed(
        &mut self,
        z: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        g: usize,
    ) -> Tensor4<T> {
        let geom = self.geometry(g);
        let packed_w = pack_weights_block_diagonal(self.master(store), g);
        binary_conv_packed(&pack_acts(z), &packed_w, &geom)
    }

    /// Float forward on smooth surrogate activations; only gradient checks
    /// use this path.
    pub fn forward_smooth(
        &mut self,
        x: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        g: usize,
    ) -> Tensor4<T> {
        let geom = self.geometry(g);
        let (latent, scale) = self.latent_and_scale(store, g);
        let w_eff = effective_weights(&latent, &scale);
        float_group_conv2d(x, &w_eff, &geom)
    }

    /// Backward to the (±1 or smooth) conv input, which the caller
    /// reconstructs from its saved pre-sign tensor. Accumulates the clipped
    /// straight-through latent weight gradient with α treated as constant.
    pub fn backward(
        &mut self,
        dy: &Tensor4<T>,
        store: &mut SharedWeightStore<T>,
        g: usize,
        x_input: &Tensor4<T>,
    ) -> Tensor4<T> {
        let geom = self.geometry(g);
        let (latent, scale) = self.latent_and_scale(store, g);
        let dy_scaled = scale_out_channels(dy, &scale);
        let w_sign = sign_pm1(&latent);
        let (dw_sign, dx) = conv2d_backward(x_input, &dy_scaled, &w_sign, &geom);
        let dw_latent = binary_weight_backward(&dw_sign, &latent);
        self.weight.accumulate(store, g, &dw_latent);
        dx
    }
}

fn effective_weights<T: Scalar>(latent: &Tensor4<T>, scale: &ScaleVector<T>) -> Tensor4<T> {
    let s = latent.shape();
    let per_filter = s.c * s.h * s.w;
    let mut out = sign_pm1(latent);
    for (o, chunk) in out.data_mut().chunks_mut(per_filter).enumerate() {
        let a = scale.alpha[o];
        for v in chunk {
            *v = *v * a;
        }
    }
    out
}

fn scale_out_channels<T: Scalar>(dy: &Tensor4<T>, scale: &ScaleVector<T>) -> Tensor4<T> {
    let s = dy.shape();
    let plane = s.h * s.w;
    let mut out = dy.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = scale.alpha[p % s.c];
        for v in chunk {
            *v = *v * a;
        }
    }
    out
}

/// BN → sign → binary conv, the basic binary stage. Only the pre-sign
/// tensor is saved; backward rebuilds the conv's ±1 (or smooth) input from
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct BinUnit<T> {
    pub bn: BatchNorm2d<T>,
    pub conv: BinaryConv2d<T>,
    saved_pre_sign: Option<Tensor4<T>>,
    smooth: bool,
}

impl<T: Scalar> BinUnit<T> {
    fn new(bn_channels: usize, conv: BinaryConv2d<T>) -> Self {
        BinUnit {
            bn: BatchNorm2d::new(bn_channels),
            conv,
            saved_pre_sign: None,
            smooth: false,
        }
    }

    fn forward(
        &mut self,
        x: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        g: usize,
        phase: Phase,
    ) -> Tensor4<T> {
        let z = self.bn.forward(x, phase);
        let y = if phase.smooth() {
            self.conv.forward_smooth(&z.map(surrogate), store, g)
        } else {
            self.conv.forward_signed(&z, store, g)
        };
        if phase.is_train() {
            self.smooth = phase.smooth();
            self.saved_pre_sign = Some(z);
        }
        y
    }

    fn backward(
        &mut self,
        dy: &Tensor4<T>,
        store: &mut SharedWeightStore<T>,
        g: usize,
    ) -> Tensor4<T> {
        let pre = self.saved_pre_sign.take().expect("backward without forward");
        let x_input = if self.smooth { pre.map(surrogate) } else { sign_pm1(&pre) };
        let mut dz = self.conv.backward(dy, store, g, &x_input);
        ste_activation_backward_inplace(&mut dz, &pre);
        self.bn.backward(&dz)
    }
}

/// BN → sign → two half-width binary 1×1 convs, concatenated (M3).
#[derive(Debug, Clone, PartialEq)]
pub struct DualBinUnit<T> {
    pub bn: BatchNorm2d<T>,
    pub conv_a: BinaryConv2d<T>,
    pub conv_b: BinaryConv2d<T>,
    saved_pre_sign: Option<Tensor4<T>>,
    smooth: bool,
}

impl<T: Scalar> DualBinUnit<T> {
    fn forward(&mut self, x: &Tensor4<T>, store: &SharedWeightStore<T>, phase: Phase) -> Tensor4<T> {
        let z = self.bn.forward(x, phase);
        let (ya, yb) = if phase.smooth() {
            let a = z.map(surrogate);
            (
                self.conv_a.forward_smooth(&a, store, 1),
                self.conv_b.forward_smooth(&a, store, 1),
            )
        } else {
            (
                self.conv_a.forward_signed(&z, store, 1),
                self.conv_b.forward_signed(&z, store, 1),
            )
        };
        if phase.is_train() {
            self.smooth = phase.smooth();
            self.saved_pre_sign = Some(z);
        }
        concat_channels(&ya, &yb)
    }

    fn backward(&mut self, dy: &Tensor4<T>, store: &mut SharedWeightStore<T>) -> Tensor4<T> {
        let pre = self.saved_pre_sign.take().expect("backward without forward");
        let x_input = if self.smooth { pre.map(surrogate) } else { sign_pm1(&pre) };
        let half = dy.shape().c / 2;
        let (dya, dyb) = split_channels(dy, half);
        let mut dz = self.conv_a.backward(&dya, store, 1, &x_input);
        dz += &self.conv_b.backward(&dyb, store, 1, &x_input);
        ste_activation_backward_inplace(&mut dz, &pre);
        self.bn.backward(&dz)
    }
}

fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w);
    let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..sa.n {
        let dst = &mut out.data_mut()[n * (sa.c + sb.c) * plane..];
        dst[..sa.c * plane].copy_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        dst[sa.c * plane..(sa.c + sb.c) * plane]
            .copy_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    out
}

fn split_channels<T: Scalar>(x: &Tensor4<T>, first: usize) -> (Tensor4<T>, Tensor4<T>) {
    let s = x.shape();
    assert!(first < s.c);
    let second = s.c - first;
    let plane = s.h * s.w;
    let mut a = Tensor4::zeros(Shape4::new(s.n, first, s.h, s.w));
    let mut b = Tensor4::zeros(Shape4::new(s.n, second, s.h, s.w));
    for n in 0..s.n {
        let src = &x.data()[n * s.c * plane..];
        a.data_mut()[n * first * plane..(n + 1) * first * plane]
            .copy_from_slice(&src[..first * plane]);
        b.data_mut()[n * second * plane..(n + 1) * second * plane]
            .copy_from_slice(&src[first * plane..s.c * plane]);
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
enum Pointwise<T> {
    Single(BinUnit<T>),
    Dual(DualBinUnit<T>),
}

/// One executable block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub spec: LayerSpec,
    unit3: BinUnit<T>,
    pointwise: Pointwise<T>,
    projection: Option<RealConv2d<T>>,
    /// Genome indices: the 3×3 slot, and for M2 downsampling blocks the
    /// projection slot.
    slot3: usize,
    slot_proj: Option<usize>,
    skip3: bool,
    skip_pw: bool,
    skip_block: bool,
}

impl<T: Scalar> Block<T> {
    /// Builds a block. `slot3`/`slot_proj` index into the genome; own-weight
    /// convs are initialized from `rng`.
    pub fn new(spec: LayerSpec, slot3: usize, slot_proj: Option<usize>, rng: &mut NamedRng) -> Self {
        let cin = spec.in_channels;
        let cout = spec.out_channels;
        let conv3 = BinaryConv2d::shared(
            slot3,
            ConvGeometry::new(cin, cin, (3, 3), spec.stride, (1, 1), 1),
        );
        let unit3 = BinUnit::new(cin, conv3);

        let pointwise = match spec.module_kind {
            ModuleKind::M1 | ModuleKind::M2 => {
                let conv = BinaryConv2d::own(
                    ConvGeometry::new(cin, cout, (1, 1), (1, 1), (0, 0), 1),
                    rng,
                );
                Pointwise::Single(BinUnit::new(cin, conv))
            }
            ModuleKind::M3 => {
                assert!(cout % 2 == 0, "M3 needs even out_channels");
                let geom = ConvGeometry::new(cin, cout / 2, (1, 1), (1, 1), (0, 0), 1);
                Pointwise::Dual(DualBinUnit {
                    bn: BatchNorm2d::new(cin),
                    conv_a: BinaryConv2d::own(geom, rng),
                    conv_b: BinaryConv2d::own(geom, rng),
                    saved_pre_sign: None,
                    smooth: false,
                })
            }
        };

        let projection = if spec.has_projection() {
            let geom = ConvGeometry::new(cin, cout, (1, 1), spec.stride, (0, 0), 1);
            match spec.module_kind {
                ModuleKind::M2 => Some(RealConv2d::shared(
                    slot_proj.expect("M2 downsampling block needs a projection slot"),
                    geom,
                )),
                _ => Some(RealConv2d::own(geom, rng)),
            }
        } else {
            None
        };

        let stride1 = spec.stride == (1, 1);
        Block {
            skip3: stride1,
            skip_pw: cin == cout,
            skip_block: stride1 && cin == cout,
            spec,
            unit3,
            pointwise,
            projection,
            slot3,
            slot_proj,
        }
    }

    pub fn out_shape(&self, in_shape: Shape4) -> Shape4 {
        let (sh, _) = self.spec.stride;
        let h = (in_shape.h + 2 - 3) / sh + 1;
        let w = (in_shape.w + 2 - 3) / sh + 1;
        Shape4::new(in_shape.n, self.spec.out_channels, h, w)
    }

    /// `groups` is this block's slice of the genome.
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        store: &SharedWeightStore<T>,
        groups: &[usize],
        phase: Phase,
    ) -> Tensor4<T> {
        let g3 = groups[0];
        let mut t = self.unit3.forward(x, store, g3, phase);
        if self.skip3 {
            t += x;
        }
        let mut u = match &mut self.pointwise {
            Pointwise::Single(unit) => unit.forward(&t, store, 1, phase),
            Pointwise::Dual(unit) => unit.forward(&t, store, phase),
        };
        if self.skip_pw {
            u += &t;
        }
        if self.skip_block {
            u += x;
        }
        if let Some(proj) = &mut self.projection {
            let gp = if self.slot_proj.is_some() { groups[1] } else { 1 };
            u += &proj.forward(x, store, gp, phase);
        }
        u
    }

    /// Own parameters (excluding store-backed weights) with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<(String, &mut Parameter<T>)> = vec![
            ("bn1.gamma".into(), &mut self.unit3.bn.gamma),
            ("bn1.beta".into(), &mut self.unit3.bn.beta),
        ];
        match &mut self.pointwise {
            Pointwise::Single(unit) => {
                out.push(("bn2.gamma".into(), &mut unit.bn.gamma));
                out.push(("bn2.beta".into(), &mut unit.bn.beta));
                if let ConvWeight::Own(p) = &mut unit.conv.weight {
                    out.push(("pw.weight".into(), p));
                }
            }
            Pointwise::Dual(unit) => {
                out.push(("bn2.gamma".into(), &mut unit.bn.gamma));
                out.push(("bn2.beta".into(), &mut unit.bn.beta));
                if let ConvWeight::Own(p) = &mut unit.conv_a.weight {
                    out.push(("pw_a.weight".into(), p));
                }
                if let ConvWeight::Own(p) = &mut unit.conv_b.weight {
                    out.push(("pw_b.weight".into(), p));
                }
            }
        }
        if let Some(proj) = &mut self.projection {
            if let ConvWeight::Own(p) = &mut proj.weight {
                out.push(("proj.weight".into(), p));
            }
        }
        out
    }

    pub fn named_bn_mut(&mut self) -> Vec<(String, &mut BatchNorm2d<T>)> {
        let mut out: Vec<(String, &mut BatchNorm2d<T>)> =
            vec![("bn1".into(), &mut self.unit3.bn)];
        match &mut self.pointwise {
            Pointwise::Single(unit) => out.push(("bn2".into(), &mut unit.bn)),
            Pointwise::Dual(unit) => out.push(("bn2".into(), &mut unit.bn)),
        }
        out
    }

    pub fn backward(
        &mut self,
        dy: &Tensor4<T>,
        store: &mut SharedWeightStore<T>,
        groups: &[usize],
    ) -> Tensor4<T> {
        let g3 = groups[0];
        let mut dt = match &mut self.pointwise {
            Pointwise::Single(unit) => unit.backward(dy, store, 1),
            Pointwise::Dual(unit) => unit.backward(dy, store),
        };
        if self.skip_pw {
            dt += dy;
        }
        let mut dx = self.unit3.backward(&dt, store, g3);
        if self.skip3 {
            dx += &dt;
        }
        if self.skip_block {
            dx += dy;
        }
        if let Some(proj) = &mut self.projection {
            let gp = if self.slot_proj.is_some() { groups[1] } else { 1 };
            dx += &proj.backward(dy, store, gp);
        }
        dx
    }
}

//! The 13-block network family: modules M1/M2/M3, skip connections,
//! group-parameterized layers with weight sharing, and FLOP accounting.
//!
//! Every block carries a binary 3×3 group convolution whose group count is
//! searchable. M1 adds a binary 1×1 full convolution plus a full-precision
//! 1×1 projection on spatial downsampling; M2 additionally groups (and
//! searches) that projection; M3 replaces the single binary 1×1 with two
//! half-width binary 1×1 convolutions whose outputs are concatenated, and
//! carries no full-precision projection at all.

mod block;
mod network;
mod store;

pub use block::Block;
pub use network::{GroupNet, Linear};
pub use store::{crop_block_diagonal, embed_block_diagonal, SharedWeightStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three block variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    M1,
    M2,
    M3,
}

impl ModuleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(ModuleKind::M1),
            "M2" | "m2" => Ok(ModuleKind::M2),
            "M3" | "m3" => Ok(ModuleKind::M3),
            other => Err(Error::config(format!("unknown module kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::M1 => "M1",
            ModuleKind::M2 => "M2",
            ModuleKind::M3 => "M3",
        }
    }
}

/// One block of the network family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: (usize, usize),
    pub module_kind: ModuleKind,
    /// Group choices this block exposes: 1 for the binary 3×3 conv, plus 1
    /// for M2's grouped full-precision projection on downsampling blocks.
    pub searchable_slots: usize,
}

impl LayerSpec {
    /// Whether the block reduces spatial resolution (and therefore carries a
    /// full-precision 1×1 projection path in M1/M2).
    pub fn shrinks(&self) -> bool {
        self.stride != (1, 1)
    }

    pub fn has_projection(&self) -> bool {
        self.shrinks() && self.module_kind != ModuleKind::M3
    }
}

/// Full-precision stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// The architecture family instance: stem, ordered blocks, classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    pub stem: StemSpec,
    pub num_classes: usize,
    pub width_multiplier: f64,
    /// Input shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
}

/// Which convolution a searchable slot parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    /// The binary 3×3 group convolution of a block.
    Bin3x3,
    /// The full-precision grouped 1×1 projection of an M2 downsampling block.
    Real1x1,
}

/// A searchable group choice, flattened into genome order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub index: usize,
    pub layer: usize,
    pub role: SlotRole,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl SlotSpec {
    /// Admissible group counts for this slot.
    pub fn candidates(&self) -> Vec<usize> {
        candidate_groups(self.in_channels, self.out_channels)
    }
}

/// Per-slot group counts; the genome of the evolutionary search.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupVector(pub Vec<usize>);

impl GroupVector {
    pub fn all_ones(len: usize) -> Self {
        GroupVector(vec![1; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for GroupVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|g| g.to_string()).collect();
        write!(f, "{}", parts.join(";"))
    }
}

/// All group counts dividing both channel dimensions, ascending. Group
/// convolution is undefined unless the count divides the output channels
/// too, so candidates are common divisors rather than input divisors alone.
pub fn candidate_groups(in_channels: usize, out_channels: usize) -> Vec<usize> {
    assert!(in_channels > 0 && out_channels > 0);
    (1..=in_channels.min(out_channels))
        .filter(|g| in_channels % g == 0 && out_channels % g == 0)
        .collect()
}

/// Base MobileNet 13-block channel progression: (out_channels, stride).
const BASE_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

const BASE_STEM_CHANNELS: usize = 32;

fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

impl NetworkConfig {
    /// The MobileNet-derived 13-block family at a given width multiplier.
    pub fn mobilenet13(
        kind: ModuleKind,
        width_multiplier: f64,
        input: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let stem_out = scaled(BASE_STEM_CHANNELS, width_multiplier);
        let mut layers = Vec::with_capacity(BASE_BLOCKS.len());
        let mut in_ch = stem_out;
        for (i, &(base_out, stride)) in BASE_BLOCKS.iter().enumerate() {
            let out_ch = scaled(base_out, width_multiplier);
            let slots = if kind == ModuleKind::M2 && stride != 1 { 2 } else { 1 };
            layers.push(LayerSpec {
                index: i,
                in_channels: in_ch,
                out_channels: out_ch,
                stride: (stride, stride),
                module_kind: kind,
                searchable_slots: slots,
            });
            in_ch = out_ch;
        }
        let config = NetworkConfig {
            layers,
            stem: StemSpec {
                out_channels: stem_out,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            num_classes,
            width_multiplier,
            input,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("network needs at least one block"));
        }
        let mut in_ch = self.stem.out_channels;
        for layer in &self.layers {
            if layer.in_channels != in_ch {
                return Err(Error::config(format!(
                    "layer {}: in_channels {} does not match previous out_channels {}",
                    layer.index, layer.in_channels, in_ch
                )));
            }
            if layer.in_channels == 0 || layer.out_channels == 0 {
                return Err(Error::config(format!("layer {}: zero channels", layer.index)));
            }
            if !matches!(layer.stride, (1, 1) | (2, 2)) {
                return Err(Error::config(format!(
                    "layer {}: stride must be 1 or 2",
                    layer.index
                )));
            }
            if layer.module_kind == ModuleKind::M3 && layer.out_channels % 2 != 0 {
                return Err(Error::config(format!(
                    "layer {}: M3 needs even out_channels, got {}",
                    layer.index, layer.out_channels
                )));
            }
            in_ch = layer.out_channels;
        }
        let (_, h, w) = self.input;
        for (i, (bh, bw)) in self.spatial_trace().into_iter().enumerate().skip(1) {
            if bh == 0 || bw == 0 {
                return Err(Error::config(format!(
                    "input {h}x{w} collapses to zero spatial size at stage {i}"
                )));
            }
        }
        Ok(())
    }

    /// Spatial size after the stem and after each block.
    /// Index 0 is the stem output; index `i+1` is block `i`'s output.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let (_, h, w) = self.input;
        let conv_out = |h: usize, w: usize, k: usize, s: usize, p: usize| {
            ((h + 2 * p).saturating_sub(k) / s + 1, (w + 2 * p).saturating_sub(k) / s + 1)
        };
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        let (mut ch, mut cw) = conv_out(h, w, self.stem.kernel, self.stem.stride, self.stem.padding);
        trace.push((ch, cw));
        for layer in &self.layers {
            let (sh, _) = layer.stride;
            let next = conv_out(ch, cw, 3, sh, 1);
            ch = next.0;
            cw = next.1;
            trace.push((ch, cw));
        }
        trace
    }

    /// Flattened searchable slots, in genome order.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut slots = Vec::new();
        for layer in &self.layers {
            slots.push(SlotSpec {
                index: slots.len(),
                layer: layer.index,
                role: SlotRole::Bin3x3,
                in_channels: layer.in_channels,
                out_channels: layer.in_channels,
                kernel: (3, 3),
            });
            if layer.module_kind == ModuleKind::M2 && layer.shrinks() {
                slots.push(SlotSpec {
                    index: slots.len(),
                    layer: layer.index,
                    role: SlotRole::Real1x1,
                    in_channels: layer.in_channels,
                    out_channels: layer.out_channels,
                    kernel: (1, 1),
                });
            }
        }
        slots
    }

    pub fn num_slots(&self) -> usize {
        self.layers
            .iter()
            .map(|l| if l.module_kind == ModuleKind::M2 && l.shrinks() { 2 } else { 1 })
            .sum()
    }

    /// Checks that a genome has the right length and every entry is an
    /// admissible group count for its slot.
    pub fn validate_genome(&self, genome: &GroupVector) -> Result<()> {
        let slots = self.slots();
        if genome.len() != slots.len() {
            return Err(Error::config(format!(
                "genome has {} entries, network exposes {} slots",
                genome.len(),
                slots.len()
            )));
        }
        for (slot, &g) in slots.iter().zip(&genome.0) {
            if !slot.candidates().contains(&g) {
                return Err(Error::config(format!(
                    "slot {} (layer {}): group {} is not a common divisor of {}x{}",
                    slot.index, slot.layer, g, slot.in_channels, slot.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer FLOP attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopRow {
    pub name: String,
    pub binary: f64,
    pub full_precision: f64,
}

impl FlopRow {
    pub fn total(&self) -> f64 {
        self.binary + self.full_precision
    }
}

/// Binary operations count at 1/64 of a full-precision multiply-accumulate.
pub const BINARY_DISCOUNT: f64 = 64.0;

/// Total FLOPs of the network under a genome. One multiply-accumulate is one
/// FLOP; binary convolution terms are divided by 64; batch norm, pooling and
/// elementwise work are excluded.
pub fn flops(config: &NetworkConfig, genome: &GroupVector) -> f64 {
    flops_breakdown(config, genome).iter().map(FlopRow::total).sum()
}

/// Per-layer FLOP breakdown under a genome, binary and full-precision
/// attributed separately.
pub fn flops_breakdown(config: &NetworkConfig, genome: &GroupVector) -> Vec<FlopRow> {
    config
        .validate_genome(genome)
        .expect("genome must be valid for the config");
    let trace = config.spatial_trace();
    let (in_ch, _, _) = config.input;
    let mut rows = Vec::with_capacity(config.layers.len() + 2);

    let (sh, sw) = trace[0];
    rows.push(FlopRow {
        name: "stem".into(),
        binary: 0.0,
        full_precision: (sh * sw * config.stem.out_channels * in_ch * config.stem.kernel * config.stem.kernel)
            as f64,
    });

    let mut slot = 0usize;
    for layer in &config.layers {
        let (oh, ow) = trace[layer.index + 1];
        let positions = (oh * ow) as f64;
        let cin = layer.in_channels as f64;
        let cout = layer.out_channels as f64;

        let g3 = genome.0[slot] as f64;
        slot += 1;
        let mut binary = positions * cin * (cin / g3) * 9.0 / BINARY_DISCOUNT;
        // The pointwise stage costs the same whether it is one full 1×1 or
        // M3's two half-width 1×1 convolutions.
        binary += positions * cout * cin / BINARY_DISCOUNT;

        let mut full = 0.0;
        if layer.has_projection() {
            let gr = if layer.module_kind == ModuleKind::M2 {
                let g = genome.0[slot] as f64;
                slot += 1;
                g
            } else {
                1.0
            };
            full = positions * cout * (cin / gr);
        }
        rows.push(FlopRow {
            name: format!("block{}", layer.index),
            binary,
            full_precision: full,
        });
    }

    let last = config.layers.last().expect("validated non-empty");
    rows.push(FlopRow {
        name: "classifier".into(),
        binary: 0.0,
        full_precision: (last.out_channels * config.num_classes) as f64,
    });
    rows
}

/// FLOPs of the cheapest genome (every slot at its largest group count).
pub fn min_flops(config: &NetworkConfig) -> f64 {
    let genome = GroupVector(
        config
            .slots()
            .iter()
            .map(|s| *s.candidates().last().expect("non-empty candidates"))
            .collect(),
    );
    flops(config, &genome)
}

/// FLOPs of the most expensive genome (all groups 1).
pub fn max_flops(config: &NetworkConfig) -> f64 {
    flops(config, &GroupVector::all_ones(config.num_slots()))
}

//! Self-describing binary checkpoint container.
//!
//! Little-endian throughout, magic-tagged and versioned. Stores the network
//! configuration, every parameter (value + Adam moments + step counter),
//! batch-norm running statistics, the genome when training one, all RNG
//! stream states, and the step/epoch counters — everything needed to resume
//! training bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::arch::{
    GroupNet, GroupVector, LayerSpec, ModuleKind, NetworkConfig, SharedWeightStore, StemSpec,
};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Shape4, Tensor4};
use crate::train::Parameter;

const MAGIC: &[u8; 8] = b"BGNASCK1";
const VERSION: u32 = 1;
const ELEM_BYTES: u32 = 4;

/// Serialized training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub genome: Option<GroupVector>,
    pub step: u64,
    pub epoch: u64,
    pub rng_states: Vec<(String, RngState)>,
    pub params: Vec<(String, ParamRecord)>,
    pub bn_stats: Vec<(String, BnRecord)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub shape: Shape4,
    pub value: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnRecord {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::data(format!("checkpoint: invalid utf-8 name: {e}")))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let len = self.u32()? as usize;
        let bytes = self.take(len * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn kind_tag(kind: ModuleKind) -> u8 {
    match kind {
        ModuleKind::M1 => 1,
        ModuleKind::M2 => 2,
        ModuleKind::M3 => 3,
    }
}

fn tag_kind(tag: u8) -> Result<ModuleKind> {
    match tag {
        1 => Ok(ModuleKind::M1),
        2 => Ok(ModuleKind::M2),
        3 => Ok(ModuleKind::M3),
        other => Err(Error::data(format!("checkpoint: unknown module kind tag {other}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(ELEM_BYTES);

        // network config
        let c = &self.config;
        w.u8(kind_tag(c.layers[0].module_kind));
        w.f64(c.width_multiplier);
        w.u32(c.num_classes as u32);
        w.u32(c.input.0 as u32);
        w.u32(c.input.1 as u32);
        w.u32(c.input.2 as u32);
        w.u32(c.stem.out_channels as u32);
        w.u32(c.stem.kernel as u32);
        w.u32(c.stem.stride as u32);
        w.u32(c.stem.padding as u32);
        w.u32(c.layers.len() as u32);
        for l in &c.layers {
            w.u32(l.index as u32);
            w.u32(l.in_channels as u32);
            w.u32(l.out_channels as u32);
            w.u32(l.stride.0 as u32);
            w.u32(l.stride.1 as u32);
            w.u8(kind_tag(l.module_kind));
            w.u32(l.searchable_slots as u32);
        }

        // genome
        match &self.genome {
            Some(g) => {
                w.u8(1);
                w.u32(g.len() as u32);
                for &v in &g.0 {
                    w.u32(v as u32);
                }
            }
            None => w.u8(0),
        }

        // counters
        w.u64(self.step);
        w.u64(self.epoch);

        // rng streams
        w.u32(self.rng_states.len() as u32);
        for (name, st) in &self.rng_states {
            w.str(name);
            w.u64(st.seed);
            w.u64(st.stream);
            w.u64((st.word_pos >> 64) as u64);
            w.u64(st.word_pos as u64);
        }

        // parameters
        w.u32(self.params.len() as u32);
        for (name, p) in &self.params {
            w.str(name);
            w.u32(p.shape.n as u32);
            w.u32(p.shape.c as u32);
            w.u32(p.shape.h as u32);
            w.u32(p.shape.w as u32);
            w.f32s(&p.value);
            w.f32s(&p.m);
            w.f32s(&p.v);
            w.u64(p.t);
        }

        // batch-norm running stats
        w.u32(self.bn_stats.len() as u32);
        for (name, b) in &self.bn_stats {
            w.str(name);
            w.f32s(&b.mean);
            w.f32s(&b.var);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::data(format!(
                "checkpoint: bad magic {magic:02x?} at byte offset 0"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!(
                "checkpoint: unsupported format version {version} (expected {VERSION})"
            )));
        }
        let elem = r.u32()?;
        if elem != ELEM_BYTES {
            return Err(Error::data(format!(
                "checkpoint: unsupported element size {elem} (expected {ELEM_BYTES})"
            )));
        }

        let _root_kind = r.u8()?;
        let width_multiplier = r.f64()?;
        let num_classes = r.u32()? as usize;
        let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let stem = StemSpec {
            out_channels: r.u32()? as usize,
            kernel: r.u32()? as usize,
            stride: r.u32()? as usize,
            padding: r.u32()? as usize,
        };
        let nlayers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(nlayers);
        for _ in 0..nlayers {
            layers.push(LayerSpec {
                index: r.u32()? as usize,
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
                stride: (r.u32()? as usize, r.u32()? as usize),
                module_kind: tag_kind(r.u8()?)?,
                searchable_slots: r.u32()? as usize,
            });
        }
        let config = NetworkConfig {
            layers,
            stem,
            num_classes,
            width_multiplier,
            input,
        };

        let genome = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                let mut g = Vec::with_capacity(len);
                for _ in 0..len {
                    g.push(r.u32()? as usize);
                }
                Some(GroupVector(g))
            }
            other => return Err(Error::data(format!("checkpoint: bad genome flag {other}"))),
        };

        let step = r.u64()?;
        let epoch = r.u64()?;

        let nrng = r.u32()? as usize;
        let mut rng_states = Vec::with_capacity(nrng);
        for _ in 0..nrng {
            let name = r.str()?;
            let seed = r.u64()?;
            let stream = r.u64()?;
            let hi = r.u64()?;
            let lo = r.u64()?;
            rng_states.push((
                name,
                RngState {
                    seed,
                    stream,
                    word_pos: (u128::from(hi) << 64) | u128::from(lo),
                },
            ));
        }

        let nparams = r.u32()? as usize;
        let mut params = Vec::with_capacity(nparams);
        for _ in 0..nparams {
            let name = r.str()?;
            let shape = Shape4::new(
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            );
            let value = r.f32s()?;
            let m = r.f32s()?;
            let v = r.f32s()?;
            let t = r.u64()?;
            for (field, data) in [("value", &value), ("m", &m), ("v", &v)] {
                if data.len() != shape.len() {
                    return Err(Error::data(format!(
                        "checkpoint: parameter {name} {field} has {} elements, shape {shape:?} \
                         wants {}",
                        data.len(),
                        shape.len()
                    )));
                }
            }
            params.push((name, ParamRecord { shape, value, m, v, t }));
        }

        let nbn = r.u32()? as usize;
        let mut bn_stats = Vec::with_capacity(nbn);
        for _ in 0..nbn {
            let name = r.str()?;
            let mean = r.f32s()?;
            let var = r.f32s()?;
            if mean.len() != var.len() {
                return Err(Error::data(format!(
                    "checkpoint: batch-norm {name} has {} means but {} vars",
                    mean.len(),
                    var.len()
                )));
            }
            bn_stats.push((name, BnRecord { mean, var }));
        }

        if r.pos != bytes.len() {
            return Err(Error::data(format!(
                "checkpoint: {} trailing bytes at offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }

        Ok(Checkpoint {
            config,
            genome,
            step,
            epoch,
            rng_states,
            params,
            bn_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())
            .map_err(|e| Error::data(format!("cannot write checkpoint {}: {e}", path.display())))?;
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::data(format!("cannot finalize checkpoint {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Snapshots a network + store into a checkpoint.
    pub fn capture(
        net: &mut GroupNet<f32>,
        store: &SharedWeightStore<f32>,
        genome: Option<&GroupVector>,
        step: u64,
        epoch: u64,
        rng_states: Vec<(String, RngState)>,
    ) -> Self {
        let mut params: Vec<(String, ParamRecord)> = Vec::new();
        for (name, p) in net.named_params_mut() {
            params.push((name, param_record(p)));
        }
        for i in 0..store.num_slots() {
            params.push((format!("slot{i}"), param_record(store.slot(i))));
        }
        let mut bn_stats = Vec::new();
        for (name, bn) in net.named_bn_mut() {
            bn_stats.push((
                name,
                BnRecord {
                    mean: bn.running_mean.clone(),
                    var: bn.running_var.clone(),
                },
            ));
        }
        Checkpoint {
            config: net.config.clone(),
            genome: genome.cloned(),
            step,
            epoch,
            rng_states,
            params,
            bn_stats,
        }
    }

    /// Rebuilds a network + store carrying exactly this checkpoint's state.
    pub fn restore(&self) -> Result<(GroupNet<f32>, SharedWeightStore<f32>)> {
        let mut init = crate::rng::NamedRng::new(0, "checkpoint-restore");
        let (mut net, mut store) = GroupNet::new(&self.config, &mut init)?;

        let mut by_name: BTreeMap<&str, &ParamRecord> =
            self.params.iter().map(|(n, p)| (n.as_str(), p)).collect();
        for (name, p) in net.named_params_mut() {
            let rec = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::data(format!("checkpoint: missing parameter {name}"))
            })?;
            apply_record(rec, p, &name)?;
        }
        for i in 0..store.num_slots() {
            let name = format!("slot{i}");
            let rec = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::data(format!("checkpoint: missing parameter {name}")))?;
            apply_record(rec, store.slot_mut(i), &name)?;
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::data(format!(
                "checkpoint: parameter {name} does not exist in this architecture"
            )));
        }

        let mut bn_by_name: BTreeMap<&str, &BnRecord> =
            self.bn_stats.iter().map(|(n, b)| (n.as_str(), b)).collect();
        for (name, bn) in net.named_bn_mut() {
            let rec = bn_by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::data(format!("checkpoint: missing batch-norm {name}")))?;
            if rec.mean.len() != bn.channels() {
                return Err(Error::data(format!(
                    "checkpoint: batch-norm {name} has {} channels, network wants {}",
                    rec.mean.len(),
                    bn.channels()
                )));
            }
            bn.running_mean.copy_from_slice(&rec.mean);
            bn.running_var.copy_from_slice(&rec.var);
        }
        if let Some((name, _)) = bn_by_name.into_iter().next() {
            return Err(Error::data(format!(
                "checkpoint: batch-norm {name} does not exist in this architecture"
            )));
        }

        Ok((net, store))
    }

    pub fn rng_state(&self, name: &str) -> Option<RngState> {
        self.rng_states
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }
}

fn param_record(p: &Parameter<f32>) -> ParamRecord {
    ParamRecord {
        shape: p.value.shape(),
        value: p.value.data().to_vec(),
        m: p.adam.m.clone(),
        v: p.adam.v.clone(),
        t: p.adam.t,
    }
}

fn apply_record(rec: &ParamRecord, p: &mut Parameter<f32>, name: &str) -> Result<()> {
    if rec.shape != p.value.shape() {
        return Err(Error::data(format!(
            "checkpoint: parameter {name} has shape {:?}, network wants {:?}",
            rec.shape,
            p.value.shape()
        )));
    }
    p.value = Tensor4::from_vec(rec.shape, rec.value.clone());
    p.grad = Tensor4::zeros(rec.shape);
    p.adam.m = rec.m.clone();
    p.adam.v = rec.v.clone();
    p.adam.t = rec.t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NamedRng;

    fn desk_net() -> (GroupNet<f32>, SharedWeightStore<f32>) {
        let cfg = NetworkConfig::mobilenet13(ModuleKind::M2, 0.25, (1, 28, 28), 10).unwrap();
        GroupNet::new(&cfg, &mut NamedRng::new(77, "init")).unwrap()
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        let (mut net, store) = desk_net();
        let rngs = vec![
            ("data".to_string(), NamedRng::new(5, "data").state()),
            ("groups".to_string(), NamedRng::new(5, "groups").state()),
        ];
        let genome = GroupVector(vec![1; 17]);
        let ckpt = Checkpoint::capture(&mut net, &store, Some(&genome), 123, 4, rngs);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restore_rebuilds_identical_state() {
        let (mut net, store) = desk_net();
        let ckpt = Checkpoint::capture(&mut net, &store, None, 9, 1, vec![]);
        let (mut net2, store2) = ckpt.restore().unwrap();
        let ckpt2 = Checkpoint::capture(&mut net2, &store2, None, 9, 1, vec![]);
        assert_eq!(ckpt.to_bytes(), ckpt2.to_bytes());
    }

    #[test]
    fn bad_magic_and_truncation_are_data_errors() {
        let (mut net, store) = desk_net();
        let ckpt = Checkpoint::capture(&mut net, &store, None, 0, 0, vec![]);
        let mut bytes = ckpt.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..40]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn restore_rejects_mismatched_architecture() {
        let (mut net, store) = desk_net();
        let mut ckpt = Checkpoint::capture(&mut net, &store, None, 0, 0, vec![]);
        ckpt.params.retain(|(n, _)| n != "classifier.bias");
        let err = ckpt.restore().unwrap_err();
        assert!(err.to_string().contains("missing parameter"), "{err}");
    }
}

//! Versioned binary checkpoints of a trained ensemble.
//!
//! Layout (little-endian): magic `AMC1`, `u32` version, header fields, the
//! architecture, the fusion description, a length-prefixed table of named
//! `f64` tensors, the assignment memory and a trailing FNV-1a checksum of
//! every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{MomentumBuffers, ParamStore, Tensor};
use crate::error::{config, Error, Result};
use crate::fusion::FusionModule;
use crate::model::{build_member, ArchKind, ArchitectureSpec};
use crate::objective::{AssignmentCounter, AssignmentMemory, PenaltyConfig, SpecializationMatrix};
use crate::trainer::{EnsembleState, FusionState};

pub const MAGIC: &[u8; 4] = b"AMC1";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn dims(&mut self, d: &[usize]) {
        self.u32(d.len());
        d.iter().for_each(|&x| self.u32(x));
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.dims(t.shape());
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.bytes.len() as u64, msg: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.into() })
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => self.fail(format!("{what}: invalid flag byte {v}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        match std::str::from_utf8(b) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail(format!("{what} is not UTF-8")),
        }
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        if n > 8 {
            return self.fail(format!("{what}: {n} dimensions"));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str("tensor name")?;
        let shape = self.dims("tensor shape")?;
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > (self.bytes.len() - self.pos) / 8 {
            return self.fail(format!("tensor {name} with shape {shape:?} does not fit the file"));
        }
        let data = (0..numel).map(|_| self.f64("tensor data")).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn store_tensors(prefix: &str, store: &ParamStore, table: &mut Vec<(String, Tensor)>) {
    for (name, t) in store.iter() {
        table.push((format!("{prefix}/{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")));
    }
}

fn momentum_tensors(prefix: &str, store: &ParamStore, buf: &MomentumBuffers, table: &mut Vec<(String, Tensor)>) {
    for ((name, t), b) in store.iter().zip(&buf.buffers) {
        table.push((format!("opt/{prefix}/{name}"), Tensor::new(t.shape().to_vec(), b.clone()).expect("valid")));
    }
}

/// Serializes the state into checkpoint bytes.
pub fn encode(state: &EnsembleState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.str(&state.method);
    w.u32(state.members.len());
    w.u32(state.penalty.k);
    w.u32(state.num_classes());
    w.u32(state.penalty.t_tau);
    w.u8(state.memory.is_frozen() as u8);
    w.f64(state.penalty.beta);
    w.f64(state.penalty.gamma);
    w.u64(state.epochs_completed as u64);

    let arch = &state.arch;
    w.str(arch.kind.as_str());
    w.dims(&arch.input_shape);
    w.dims(&arch.widths);
    w.u8(arch.auxiliary as u8);

    match &state.fusion {
        FusionState::None => w.u8(0),
        FusionState::Module(f) => {
            w.u8(1);
            w.u8(f.gated as u8);
            w.f64(f.residual_scale);
        }
        FusionState::Share { p_share } => {
            w.u8(2);
            w.f64(*p_share);
        }
    }

    let mut table = Vec::new();
    let stores = state.stores();
    for (i, store) in stores.iter().enumerate() {
        let prefix = if i < state.members.len() { format!("member{i}") } else { "fusion".into() };
        store_tensors(&prefix, store, &mut table);
    }
    for (i, (store, buf)) in stores.iter().zip(&state.momentum).enumerate() {
        let prefix = if i < state.members.len() { format!("member{i}") } else { "fusion".into() };
        momentum_tensors(&prefix, store, buf, &mut table);
    }
    w.u32(table.len());
    for (name, t) in &table {
        w.tensor(name, t);
    }

    let counter = &state.memory.counter;
    w.u64(counter.epochs_accumulated as u64);
    counter.counts().iter().for_each(|&c| w.u64(c));
    match state.specialization() {
        Some(spec) => {
            w.u8(1);
            spec.flags().iter().for_each(|&f| w.u8(f as u8));
        }
        None => w.u8(0),
    }
    let sum = fnv1a(&w.buf);
    w.u64(sum);
    w.buf
}

fn take_store(
    table: &mut Vec<(String, Tensor)>,
    prefix: &str,
    template: &ParamStore,
    r: &Reader,
) -> Result<(ParamStore, MomentumBuffers)> {
    let mut store = ParamStore::new();
    let mut momentum = MomentumBuffers::default();
    for (name, t) in template.iter() {
        for (key, target) in [(format!("{prefix}/{name}"), 0), (format!("opt/{prefix}/{name}"), 1)] {
            let Some(pos) = table.iter().position(|(n, _)| *n == key) else {
                return r.fail(format!("missing tensor {key}"));
            };
            let (_, value) = table.remove(pos);
            if value.shape() != t.shape() {
                return r.fail(format!("tensor {key} has shape {:?}, expected {:?}", value.shape(), t.shape()));
            }
            if target == 0 {
                store.push(name, value);
            } else {
                momentum.buffers.push(value.into_data());
            }
        }
    }
    Ok((store, momentum))
}

/// Rebuilds a state from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<EnsembleState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "not an ensemble checkpoint (bad magic)".into() });
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    if bytes.len() < 16 {
        return r.fail("file too short for a checksum");
    }
    let body = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body..].try_into().expect("8 bytes"));
    if fnv1a(&bytes[..body]) != stored {
        return Err(Error::Format { offset: body as u64, msg: "checksum mismatch".into() });
    }
    let bytes = &bytes[..body];
    r.bytes = bytes;

    let method = r.str("method")?;
    let members = r.u32("member count")?;
    let k = r.u32("overlap")?;
    let num_classes = r.u32("class count")?;
    let t_tau = r.u32("threshold epoch")?;
    let frozen = r.flag("frozen flag")?;
    let beta = r.f64("beta")?;
    let gamma = r.f64("gamma")?;
    let epochs_completed = r.u64("epoch count")? as usize;

    let kind: ArchKind = r.str("architecture")?.parse()?;
    let input_shape = r.dims("input shape")?;
    let widths = r.dims("layer widths")?;
    let auxiliary = r.flag("auxiliary flag")?;
    let arch = ArchitectureSpec { kind, input_shape, widths, num_classes, auxiliary };
    if arch.validate().is_err() || members == 0 || members > 1024 {
        return r.fail("invalid architecture or member count");
    }

    let fusion_kind = r.u8("fusion kind")?;
    let fusion_header = match fusion_kind {
        0 => (false, 0.0),
        1 => (r.flag("gate flag")?, r.f64("residual scale")?),
        2 => (false, r.f64("share probability")?),
        v => return r.fail(format!("unknown fusion kind {v}")),
    };

    let count = r.u32("tensor count")?;
    let mut table = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;

    let mut models = Vec::with_capacity(members);
    let mut momentum = Vec::new();
    for m in 0..members {
        let mut model = build_member(&arch, m, 0)?;
        let (store, buf) = take_store(&mut table, &format!("member{m}"), &model.params, &r)?;
        model.params = store;
        models.push(model);
        momentum.push(buf);
    }
    let fusion = match fusion_kind {
        0 => FusionState::None,
        2 => FusionState::Share { p_share: fusion_header.1 },
        _ => {
            let mut template = ParamStore::new();
            let prefix = "fusion/";
            for (name, t) in table.iter().filter(|(n, _)| n.starts_with(prefix)) {
                template.push(&name[prefix.len()..], t.clone());
            }
            let (params, buf) = take_store(&mut table, "fusion", &template, &r)?;
            momentum.push(buf);
            FusionState::Module(FusionModule {
                members,
                channels: arch.tap_channels(),
                spatial: arch.kind == ArchKind::SimpleCnn,
                gated: fusion_header.0,
                residual_scale: fusion_header.1,
                params,
            })
        }
    };
    if let Some((name, _)) = table.first() {
        return r.fail(format!("unexpected tensor {name}"));
    }

    let epochs_accumulated = r.u64("counter epochs")? as usize;
    let counts = (0..num_classes * members).map(|_| r.u64("counts")).collect::<Result<Vec<_>>>()?;
    let mut counter = AssignmentCounter::from_counts(num_classes, members, counts)?;
    counter.epochs_accumulated = epochs_accumulated;
    let specialization = if r.flag("specialization flag")? {
        let flags = (0..num_classes * members).map(|_| r.flag("specialization")).collect::<Result<Vec<_>>>()?;
        match SpecializationMatrix::from_flags(num_classes, members, k, flags) {
            Ok(w) => Some(w),
            Err(e) => return r.fail(format!("specialization matrix: {e}")),
        }
    } else {
        None
    };
    if specialization.is_some() != frozen {
        return r.fail("frozen flag disagrees with the stored specialization");
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(EnsembleState {
        method,
        arch,
        members: models,
        fusion,
        penalty: PenaltyConfig { beta, gamma, k, t_tau },
        memory: AssignmentMemory::restore(counter, specialization),
        momentum,
        epochs_completed,
    })
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn save_checkpoint(state: &EnsembleState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let Some(name) = path.file_name() else {
        return config(format!("checkpoint path {} has no file name", path.display()));
    };
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EnsembleState> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, DatasetSpec};
    use crate::trainer::{train, FusionKind, TrainConfig};

    fn trained(fusion: FusionKind, method: &str) -> EnsembleState {
        let ds = generate_blobs(&DatasetSpec::blobs(3, 8, 2, 3.0, 1)).unwrap();
        let cfg = TrainConfig {
            method: method.into(),
            members: 3,
            epochs: 3,
            batch_size: 8,
            arch: ArchKind::Mlp,
            hidden: [8, 8],
            fusion,
            penalty: PenaltyConfig { t_tau: 2, ..Default::default() },
            ..Default::default()
        };
        train(&ds, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (fusion, method) in [(FusionKind::Module, "amcl"), (FusionKind::Share, "cmcl"), (FusionKind::None, "smcl")] {
            let state = trained(fusion, method);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&state, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, state);
            for (a, b) in back.stores().iter().zip(state.stores()) {
                assert_eq!(a.checksum(), b.checksum());
            }
            assert!(!dir.path().join("model.ckpt.tmp").exists());
        }
    }

    #[test]
    fn frozen_memory_survives() {
        let state = trained(FusionKind::None, "amcl");
        let back = decode(&encode(&state)).unwrap();
        assert!(back.memory.is_frozen());
        assert_eq!(back.specialization(), state.specialization());
        assert_eq!(back.memory.counter, state.memory.counter);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = encode(&trained(FusionKind::None, "amcl"));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode(&trained(FusionKind::None, "ie"));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn failed_load_leaves_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"AMC1").unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert_eq!(fs::read(&path).unwrap(), b"AMC1");
    }
}

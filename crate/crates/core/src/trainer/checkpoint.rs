//! Binary checkpoint container.
//!
//! ```text
//! "CGS1"  u16 version
//! repeated: u16 name length, name bytes, u64 payload length, payload
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! All integers are little-endian and every tensor value is an `f64`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderWeights, Mlp};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::model::{Model, TENSOR_NAMES};
use crate::optim::ParamGroup;
use crate::scaffold::{AccumStats, AnchorDims, AnchorScaffold};
use crate::temporal::{FeatureMask, GlobalFeature};

use super::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CGS1";
pub const VERSION: u16 = 1;

fn corrupt(m: impl Into<String>) -> Error {
    Error::CorruptChecksum(m.into())
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn counts(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x as f64));
    }
    fn mlp(&mut self, m: &Mlp) {
        for d in [m.inputs, m.hidden, m.outputs] {
            self.u64(d as u64);
        }
        self.f64s(&m.params);
    }
}

struct Dec<'a> {
    b: &'a [u8],
    section: &'a str,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() < n {
            return Err(corrupt(format!("section `{}` is truncated", self.section)));
        }
        let (h, t) = self.b.split_at(n);
        self.b = t;
        Ok(h)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows usize"))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.b.len()) {
            return Err(corrupt(format!("section `{}` declares {n} elements beyond its end", self.section)));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("non-UTF-8 string"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn counts(&mut self) -> Result<Vec<u32>> {
        self.f64s()?
            .into_iter()
            .map(|x| {
                if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
                    Ok(x as u32)
                } else {
                    Err(corrupt(format!("invalid count {x}")))
                }
            })
            .collect()
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let (inputs, hidden, outputs) = (self.usize()?, self.usize()?, self.usize()?);
        let params = self.f64s()?;
        if params.len() != Mlp::param_count(inputs, hidden, outputs) {
            return Err(corrupt(format!("MLP {inputs}x{hidden}x{outputs} has {} parameters", params.len())));
        }
        Ok(Mlp { inputs, hidden, outputs, params })
    }
    fn finish(&self) -> Result<()> {
        if self.b.is_empty() {
            Ok(())
        } else {
            Err(corrupt(format!("section `{}` has {} trailing bytes", self.section, self.b.len())))
        }
    }
}

fn model_section(m: &Model) -> Vec<u8> {
    let s = &m.scaffold;
    let mut e = Enc::default();
    for d in [s.dims.k, s.dims.base, s.dims.var, s.dims.periods, m.global.dim] {
        e.u64(d as u64);
    }
    for f in [m.mask.base, m.mask.var, m.mask.global] {
        e.u64(f as u64);
    }
    e.f64(s.voxel_size);
    s.origin.iter().for_each(|&x| e.f64(x));
    e.u64(s.cells.len() as u64);
    for c in &s.cells {
        c.iter().for_each(|&x| e.u64(x as u64));
    }
    for t in [&s.f_base, &s.f_var, &s.offsets, &s.log_offset_scale, &s.log_shape_scale] {
        e.f64s(t);
    }
    e.f64s(&s.stats.grad_norm_sum);
    e.counts(&s.stats.visible_count);
    e.f64s(&s.stats.opacity_sum);
    e.counts(&s.stats.sample_count);
    e.f64s(&s.stats.feature_grad_sum);
    e.f64s(&m.global.g);
    for mlp in [&m.decoder.opacity, &m.decoder.color, &m.decoder.covariance] {
        e.mlp(mlp);
    }
    e.0
}

fn read_model(d: &mut Dec) -> Result<Model> {
    let dims = AnchorDims { k: d.usize()?, base: d.usize()?, var: d.usize()?, periods: d.usize()? };
    let global_dim = d.usize()?;
    let mut flags = [false; 3];
    for f in flags.iter_mut() {
        *f = match d.u64()? {
            0 => false,
            1 => true,
            v => return Err(corrupt(format!("invalid flag {v}"))),
        };
    }
    let mask = FeatureMask { base: flags[0], var: flags[1], global: flags[2] };
    let voxel_size = d.f64()?;
    let origin = Vec3::new(d.f64()?, d.f64()?, d.f64()?);
    let n = d.len(24)?;
    let cells = (0..n)
        .map(|_| Ok([d.u64()? as i64, d.u64()? as i64, d.u64()? as i64]))
        .collect::<Result<Vec<_>>>()?;
    let (f_base, f_var, offsets, los, lss) = (d.f64s()?, d.f64s()?, d.f64s()?, d.f64s()?, d.f64s()?);
    let stats = AccumStats {
        grad_norm_sum: d.f64s()?,
        visible_count: d.counts()?,
        opacity_sum: d.f64s()?,
        sample_count: d.counts()?,
        feature_grad_sum: d.f64s()?,
    };
    let g = d.f64s()?;
    if g.len() != dims.periods * global_dim {
        return Err(corrupt("global feature size does not match period count"));
    }
    let decoder = DecoderWeights { opacity: d.mlp()?, color: d.mlp()?, covariance: d.mlp()? };
    let scaffold = AnchorScaffold::from_parts(dims, voxel_size, origin, cells, f_base, f_var, offsets, los, lss, stats)
        .map_err(|e| corrupt(e.to_string()))?;
    let model = Model {
        scaffold,
        decoder,
        global: GlobalFeature { periods: dims.periods, dim: global_dim, g },
        mask,
    };
    model.check().map_err(|e| corrupt(e.to_string()))?;
    Ok(model)
}

fn optimizer_section(groups: &[ParamGroup]) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(groups.len() as u64);
    for g in groups {
        e.bytes(g.name.as_bytes());
        e.u64(g.step);
        e.f64s(&g.m);
        e.f64s(&g.v);
    }
    e.0
}

fn state_section(s: &TrainState) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(s.iteration);
    e.f64(s.spatial_lr_scale);
    e.u64(s.cursor as u64);
    e.u64(s.order.len() as u64);
    s.order.iter().for_each(|&i| e.u64(i as u64));
    e.bytes(&s.rng.get_seed());
    e.u64(s.rng.get_stream());
    e.0.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
    e.0
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let sections: [(&str, Vec<u8>); 4] = [
        ("config", state.config.to_text().into_bytes()),
        ("model", model_section(&state.model)),
        ("optimizer", optimizer_section(&state.groups)),
        ("state", state_section(state)),
    ];
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, payload) in sections {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing CGS1 header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < 10 {
        return Err(corrupt("file is truncated"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("CRC-32 mismatch"));
    }
    let mut rest = &body[6..];
    let mut sections = std::collections::BTreeMap::new();
    while !rest.is_empty() {
        if rest.len() < 2 {
            return Err(corrupt("truncated section header"));
        }
        let nl = u16::from_le_bytes([rest[0], rest[1]]) as usize;
        if rest.len() < 2 + nl + 8 {
            return Err(corrupt("truncated section header"));
        }
        let name = std::str::from_utf8(&rest[2..2 + nl]).map_err(|_| corrupt("non-UTF-8 section name"))?;
        let pl = u64::from_le_bytes(rest[2 + nl..10 + nl].try_into().unwrap());
        let start = 10 + nl;
        let end = usize::try_from(pl)
            .ok()
            .and_then(|p| start.checked_add(p))
            .filter(|&e| e <= rest.len())
            .ok_or_else(|| corrupt(format!("section `{name}` overruns the file")))?;
        sections.insert(name, &rest[start..end]);
        rest = &rest[end..];
    }
    let get = |name: &'static str| -> Result<Dec> {
        let b = sections.get(name).ok_or_else(|| corrupt(format!("missing section `{name}`")))?;
        Ok(Dec { b, section: name })
    };

    let cfg_bytes = get("config")?.b;
    let config = TrainConfig::from_text(std::str::from_utf8(cfg_bytes).map_err(|_| corrupt("config is not UTF-8"))?)
        .map_err(|e| corrupt(format!("stored config: {e}")))?;

    let mut d = get("model")?;
    let model = read_model(&mut d)?;
    d.finish()?;

    let mut d = get("optimizer")?;
    let n = d.usize()?;
    if n != TENSOR_NAMES.len() {
        return Err(corrupt(format!("{n} optimizer groups")));
    }
    let mut groups = Vec::with_capacity(n);
    for (name, len) in TENSOR_NAMES.iter().zip(tensor_lens(&model)) {
        let stored = d.str()?;
        if stored != *name {
            return Err(corrupt(format!("optimizer group `{stored}` where `{name}` expected")));
        }
        let step = d.u64()?;
        let (m, v) = (d.f64s()?, d.f64s()?);
        if m.len() != len || v.len() != len {
            return Err(corrupt(format!("optimizer group `{name}` has the wrong length")));
        }
        groups.push(ParamGroup { name: stored, schedule: crate::optim::LrSchedule::Constant(0.0), m, v, step });
    }
    d.finish()?;

    let mut d = get("state")?;
    let iteration = d.u64()?;
    let spatial_lr_scale = d.f64()?;
    let cursor = d.usize()?;
    let n = d.len(8)?;
    let order = (0..n).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
    let seed: [u8; 32] = d.bytes()?.try_into().map_err(|_| corrupt("RNG seed must be 32 bytes"))?;
    let stream = d.u64()?;
    let word_pos = u128::from_le_bytes(d.take(16)?.try_into().unwrap());
    d.finish()?;
    if cursor > order.len() {
        return Err(corrupt("view cursor past the end of the epoch"));
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let schedules = config.lr.schedules(spatial_lr_scale, config.total_iters);
    for (g, s) in groups.iter_mut().zip(schedules) {
        g.schedule = s;
    }
    Ok(TrainState { config, model, groups, iteration, rng, order, cursor, spatial_lr_scale })
}

pub(super) fn tensor_lens(m: &Model) -> [usize; 9] {
    let s = &m.scaffold;
    [
        s.f_base.len(),
        s.f_var.len(),
        s.offsets.len(),
        s.log_offset_scale.len(),
        s.log_shape_scale.len(),
        m.global.g.len(),
        m.decoder.opacity.params.len(),
        m.decoder.color.params.len(),
        m.decoder.covariance.params.len(),
    ]
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic, version `u16`, section count `u16`, then
//! per section a kind byte, a `u64` body length and the body. A body holds
//! the config hash, string metadata, an optional accountant ledger and named
//! tensors with shape headers. Floats are stored as raw IEEE-754 bits, so a
//! store/load round trip is bit-exact.

use crate::accountant::{Conversion, PrivacyLedger};
use crate::autoencoder::{Autoencoder, AutoencoderConfig};
use crate::diffusion::unet::{UNetConfig, UNetLite};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::DiffusionModel;
use crate::dp::lora::LoraSpec;
use crate::error::{bail, Error, Result};
use crate::fid::FeatureStats;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DPLDMCK\0";
pub const CHECKPOINT_VERSION: u16 = 1;
const NO_GROUP: u8 = 0xFF;

/// Write `bytes` to a temporary file next to `path`, sync it, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Hex SHA-256 of a config text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionKind {
    Autoencoder = 1,
    Diffusion = 2,
    Stats = 3,
}

impl SectionKind {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            1 => Self::Autoencoder,
            2 => Self::Diffusion,
            3 => Self::Stats,
            _ => bail!(Format, "unknown section kind {c}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    /// `None` for non-parameter arrays such as schedule constants.
    pub group: Option<ParamGroup>,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub kind: SectionKind,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub ledger: Option<PrivacyLedger>,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn new(kind: SectionKind, config_hash: &str) -> Self {
        Self { kind, config_hash: config_hash.to_string(), meta: BTreeMap::new(), ledger: None, entries: Vec::new() }
    }

    pub fn push_array(&mut self, name: &str, tensor: Tensor) {
        self.entries.push(Entry { name: name.to_string(), group: None, trainable: false, tensor });
    }

    pub fn push_store(&mut self, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.entries.push(Entry {
                name: name.to_string(),
                group: Some(p.group),
                trainable: p.trainable,
                tensor: p.value.clone(),
            });
        }
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.group.is_none() && e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Format(format!("section lacks array {name}")))
    }

    /// Parameters in stored order.
    pub fn store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(g) = e.group {
                store.insert(&e.name, e.tensor.clone(), g, e.trainable)?;
            }
        }
        Ok(store)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("section lacks {key}")))
    }

    fn meta_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.meta(key)?).map_err(|e| Error::Format(format!("{key}: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, kind: SectionKind) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {kind:?} section")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        for s in &self.sections {
            let body = encode_section(s);
            out.push(s.kind as u8);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            bail!(Format, "not a checkpoint");
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let count = r.u16()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let kind = SectionKind::from_code(r.u8()?)?;
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            sections.push(decode_section(kind, body)?);
        }
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes", bytes.len() - r.pos);
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn encode_section(s: &Section) -> Vec<u8> {
    let mut out = Vec::new();
    put_str(&mut out, &s.config_hash);
    out.extend_from_slice(&(s.meta.len() as u32).to_le_bytes());
    for (k, v) in &s.meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    match &s.ledger {
        None => out.push(0),
        Some(l) => {
            out.push(1);
            for v in [l.q, l.sigma, l.delta, l.clip] {
                put_f64(&mut out, v);
            }
            out.extend_from_slice(&l.steps.to_le_bytes());
            out.push(match l.conversion {
                Conversion::Classic => 0,
                Conversion::Improved => 1,
            });
        }
    }
    out.extend_from_slice(&(s.entries.len() as u32).to_le_bytes());
    for e in &s.entries {
        put_str(&mut out, &e.name);
        out.push(e.group.map_or(NO_GROUP, ParamGroup::code));
        out.push(e.trainable as u8);
        out.push(e.tensor.ndim() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            put_f64(&mut out, v);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "truncated checkpoint");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
}

fn decode_section(kind: SectionKind, body: &[u8]) -> Result<Section> {
    let mut r = Reader { buf: body, pos: 0 };
    let mut s = Section::new(kind, &r.string()?);
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        s.meta.insert(k, v);
    }
    if r.u8()? == 1 {
        let (q, sigma, delta, clip) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let steps = r.u64()?;
        let conversion = match r.u8()? {
            0 => Conversion::Classic,
            1 => Conversion::Improved,
            c => bail!(Format, "unknown conversion code {c}"),
        };
        s.ledger = Some(PrivacyLedger { q, sigma, steps, delta, clip, conversion });
    }
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let group = match r.u8()? {
            NO_GROUP => None,
            c => Some(ParamGroup::from_code(c).ok_or_else(|| Error::Format(format!("unknown group {c}")))?),
        };
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        s.entries.push(Entry { name, group, trainable, tensor: Tensor::new(&shape, data)? });
    }
    if r.pos != body.len() {
        bail!(Format, "section has {} trailing bytes", body.len() - r.pos);
    }
    Ok(s)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable config")
}

pub fn autoencoder_section(ae: &Autoencoder, hash: &str) -> Section {
    let mut s = Section::new(SectionKind::Autoencoder, hash);
    s.meta.insert("autoencoder".into(), to_json(&ae.config));
    s.push_array("latent_scale", Tensor::scalar(ae.latent_scale));
    s.push_store(&ae.store);
    s
}

pub fn load_autoencoder(s: &Section) -> Result<Autoencoder> {
    let config: AutoencoderConfig = s.meta_json("autoencoder")?;
    config.validate()?;
    Ok(Autoencoder { config, store: s.store()?, latent_scale: s.array("latent_scale")?.item() })
}

pub fn diffusion_section(model: &DiffusionModel, hash: &str) -> Section {
    let mut s = Section::new(SectionKind::Diffusion, hash);
    s.meta.insert("unet".into(), to_json(&model.unet.config));
    if let Some(l) = &model.lora {
        s.meta.insert("lora".into(), to_json(l));
    }
    let betas = model.schedule.betas().to_vec();
    s.push_array("schedule.beta", Tensor::new(&[betas.len()], betas).expect("1-d"));
    s.push_store(&model.store);
    s
}

pub fn load_diffusion(s: &Section) -> Result<DiffusionModel> {
    let config: UNetConfig = s.meta_json("unet")?;
    let lora: Option<LoraSpec> = if s.meta.contains_key("lora") { Some(s.meta_json("lora")?) } else { None };
    let schedule = NoiseSchedule::from_stored_betas(s.array("schedule.beta")?.data().to_vec())?;
    let unet = UNetLite::new(config)?;
    Ok(DiffusionModel { unet, schedule, store: s.store()?, lora })
}

pub fn stats_section(stats: &FeatureStats, hash: &str) -> Section {
    let mut s = Section::new(SectionKind::Stats, hash);
    let d = stats.dim();
    s.meta.insert("n".into(), stats.n.to_string());
    if let Some(b) = &stats.privatized {
        s.meta.insert("privatized".into(), to_json(b));
    }
    s.push_array("mu", Tensor::new(&[d], stats.mu.clone()).expect("1-d"));
    s.push_array("m_sec", Tensor::new(&[d, d], stats.m_sec.clone()).expect("2-d"));
    s
}

pub fn load_stats(s: &Section) -> Result<FeatureStats> {
    let n = s.meta("n")?.parse().map_err(|_| Error::Format("bad sample count".into()))?;
    let privatized = if s.meta.contains_key("privatized") { Some(s.meta_json("privatized")?) } else { None };
    Ok(FeatureStats {
        n,
        mu: s.array("mu")?.data().to_vec(),
        m_sec: s.array("m_sec")?.data().to_vec(),
        privatized,
    })
}

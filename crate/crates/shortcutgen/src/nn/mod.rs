//! Seeded parameter store, layer builders, and the checkpoint container.
//!
//! Initialization draws from an explicit ChaCha stream so that two builds
//! with the same (config, seed) produce identical parameters on any platform.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hashing::Hasher;

pub mod layers;
pub mod optim;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming normal scaled by fan-out (conv default).
    KaimingNormalFanOut { fan_out: usize },
    /// Uniform in +-1/sqrt(fan_in) (linear/bias default).
    UniformFanIn { fan_in: usize },
    Const(f64),
}

/// Named trainable parameters with deterministic, seeded initialization.
///
/// Draws happen in f32 regardless of the target dtype, so an f64 build (used
/// by finite-difference oracles) holds exactly the same values as the f32
/// build with the same seed.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha12Rng,
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(device: &Device, seed: u64) -> Self {
        Self::with_dtype(device, seed, DType::F32)
    }

    pub fn with_dtype(device: &Device, seed: u64, dtype: DType) -> Self {
        Self {
            device: device.clone(),
            dtype,
            rng: ChaCha12Rng::seed_from_u64(seed),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::KaimingNormalFanOut { fan_out } => {
                let std = (2.0 / fan_out as f64).sqrt() as f32;
                (0..count)
                    .map(|_| std * self.rng.sample::<f32, _>(StandardNormal))
                    .collect()
            }
            Init::UniformFanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..count)
                    .map(|_| ((self.rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
                    .collect()
            }
            Init::Const(v) => vec![v as f32; count],
        };
        let tensor = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Name-sorted values, flattened to f32.
    pub fn to_value_map(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.entries {
            let t = var.as_tensor();
            let dims = t.dims().to_vec();
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (dims, data));
        }
        Ok(out)
    }

    /// Overwrite parameter values from a checkpoint map (shape-checked).
    pub fn load_values(&mut self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} params, model expects {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (name, var) in &self.entries {
            let (dims, data) = values.get(name).ok_or_else(|| {
                Error::InvalidConfig(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if var.as_tensor().dims() != dims.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{name}`: checkpoint {dims:?} vs model {:?}",
                    var.as_tensor().dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), dims.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Content hash over name-sorted parameters.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hash_value_map(&self.to_value_map()?))
    }
}

pub fn hash_value_map(values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> String {
    let mut h = Hasher::new();
    for (name, (dims, data)) in values {
        h.update_str(name);
        for d in dims {
            h.update_u64(*d as u64);
        }
        h.update_f32s(data);
    }
    h.finish()
}

const CKPT_MAGIC: &[u8; 4] = b"SGCK";
const CKPT_VERSION: u32 = 1;

/// Write a checkpoint: JSON config header + raw parameter blob. Returns the
/// parameter content hash, which callers record in provenance manifests.
pub fn save_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<String> {
    let values = store.to_value_map()?;
    let hash = hash_value_map(&values);
    let mut config = config.clone();
    config["param_hash"] = serde_json::Value::String(hash.clone());
    let json = serde_json::to_vec(&config)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(values.len() as u32).to_le_bytes())?;
    for (name, (dims, data)) in &values {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dims.len() as u8])?;
        for d in dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        out.write_all(&((data.len() * 4) as u64).to_le_bytes())?;
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(hash)
}

pub type ValueMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Read a checkpoint back: (config JSON, parameter values).
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ValueMap)> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.display().to_string()));
    }
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(malformed("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CKPT_VERSION {
        return Err(malformed("unsupported version"));
    }
    reader.read_exact(&mut u32buf)?;
    let json_len = u32::from_le_bytes(u32buf) as usize;
    let mut json = vec![0u8; json_len];
    reader.read_exact(&mut json)?;
    let config: serde_json::Value = serde_json::from_slice(&json)?;
    reader.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut values = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        reader.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        reader.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| malformed("non-utf8 name"))?;
        let mut ndim = [0u8; 1];
        reader.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            reader.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut u64buf = [0u8; 8];
        reader.read_exact(&mut u64buf)?;
        let byte_len = u64::from_le_bytes(u64buf) as usize;
        if byte_len != dims.iter().product::<usize>() * 4 {
            return Err(malformed("length does not match dims"));
        }
        let mut raw = vec![0u8; byte_len];
        reader.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        values.insert(name, (dims, data));
    }
    let recorded = config
        .get("param_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| malformed("missing param_hash"))?;
    if recorded != hash_value_map(&values) {
        return Err(malformed("parameter hash mismatch"));
    }
    Ok((config, values))
}

//! Versioned binary container for model checkpoints and data memories.
//!
//! Layout (all little-endian):
//! magic `GZCK` | version u32 | arch u32 | n_classes u32 | resolution u32 |
//! seed u64 | epoch u64 | config_hash 32B | tensor_count u32 | tensors.
//! Each tensor: name (u16 len + utf8) | dtype u8 | ndim u8 | dims u32* |
//! payload. Tensors are written in a fixed canonical order, so identical
//! inputs produce identical bytes.

use crate::error::{CoreError, Result};
use crate::models::{ArchId, AutoencoderModel, ClassifierModel, DqlModel};
use crate::nn::network::Network;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GZCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerMeta {
    /// Architecture code, or 0 for generic data containers.
    pub arch: u32,
    pub n_classes: u32,
    pub resolution: u32,
    pub seed: u64,
    pub epoch: u64,
    pub config_hash: [u8; 32],
}

impl ContainerMeta {
    pub fn generic(seed: u64, config_hash: [u8; 32]) -> Self {
        Self {
            arch: 0,
            n_classes: 0,
            resolution: 0,
            seed,
            epoch: 0,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorPayload {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorPayload::F32(_) => 0,
            TensorPayload::F64(_) => 1,
            TensorPayload::U32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorPayload::F32(v) => v.len(),
            TensorPayload::F64(v) => v.len(),
            TensorPayload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: TensorPayload,
}

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

pub fn write_container<W: Write>(
    mut w: W,
    meta: &ContainerMeta,
    tensors: &[TensorRecord],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&meta.arch.to_le_bytes())?;
    w.write_all(&meta.n_classes.to_le_bytes())?;
    w.write_all(&meta.resolution.to_le_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;
    w.write_all(&meta.epoch.to_le_bytes())?;
    w.write_all(&meta.config_hash)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(bad("tensor name too long"));
        }
        let expected: usize = t.dims.iter().map(|&d| d as usize).product();
        if expected != t.payload.len() {
            return Err(bad(format!(
                "tensor {} dims {:?} disagree with payload length {}",
                t.name,
                t.dims,
                t.payload.len()
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.payload.dtype_code(), t.dims.len() as u8])?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &t.payload {
            TensorPayload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorPayload::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorPayload::U32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(ContainerMeta, Vec<TensorRecord>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint container"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let arch = read_u32(&mut r)?;
    let n_classes = read_u32(&mut r)?;
    let resolution = read_u32(&mut r)?;
    let seed = read_u64(&mut r)?;
    let epoch = read_u64(&mut r)?;
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let (dtype, ndim) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r)?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let payload = match dtype {
            0 => {
                let mut v = Vec::with_capacity(len);
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    v.push(f32::from_le_bytes(buf));
                }
                TensorPayload::F32(v)
            }
            1 => {
                let mut v = Vec::with_capacity(len);
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    v.push(f64::from_le_bytes(buf));
                }
                TensorPayload::F64(v)
            }
            2 => {
                let mut v = Vec::with_capacity(len);
                let mut buf = [0u8; 4];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    v.push(u32::from_le_bytes(buf));
                }
                TensorPayload::U32(v)
            }
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        tensors.push(TensorRecord { name, dims, payload });
    }
    Ok((
        ContainerMeta {
            arch,
            n_classes,
            resolution,
            seed,
            epoch,
            config_hash,
        },
        tensors,
    ))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn network_tensors(prefix: &str, net: &Network<f32>) -> Vec<TensorRecord> {
    net.param_names()
        .into_iter()
        .zip(net.params())
        .map(|(name, p)| TensorRecord {
            name: format!("{prefix}.{name}"),
            dims: p.shape.iter().map(|&d| d as u32).collect(),
            payload: TensorPayload::F32(p.data.clone()),
        })
        .collect()
}

fn fill_network(prefix: &str, net: &mut Network<f32>, tensors: &[TensorRecord]) -> Result<()> {
    let names = net.param_names();
    let mut params = net.params_mut();
    if names.len() != params.len() {
        return Err(bad("network parameter bookkeeping error"));
    }
    let mut cursor = 0usize;
    for (name, param) in names.iter().zip(params.iter_mut()) {
        let full = format!("{prefix}.{name}");
        let record = tensors[cursor..]
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| bad(format!("missing tensor {full}")))?;
        let data = match &record.payload {
            TensorPayload::F32(v) => v,
            _ => return Err(bad(format!("tensor {full} has the wrong dtype"))),
        };
        if data.len() != param.len() {
            return Err(bad(format!(
                "tensor {full} has {} values, expected {}",
                data.len(),
                param.len()
            )));
        }
        param.data.copy_from_slice(data);
        cursor += 1;
    }
    Ok(())
}

pub fn save_autoencoder(path: &Path, model: &AutoencoderModel, meta: &ContainerMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.arch = ArchId::Autoencoder.code();
    meta.resolution = model.resolution as u32;
    let mut tensors = network_tensors("encoder", &model.encoder);
    tensors.extend(network_tensors("decoder", &model.decoder));
    write_container(BufWriter::new(File::create(path)?), &meta, &tensors)
}

pub fn load_autoencoder(path: &Path) -> Result<(AutoencoderModel, ContainerMeta)> {
    let (meta, tensors) = read_container(BufReader::new(File::open(path)?))?;
    if meta.arch != ArchId::Autoencoder.code() {
        return Err(bad("container does not hold an autoencoder"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = AutoencoderModel::new(meta.resolution as usize, &mut rng)?;
    fill_network("encoder", &mut model.encoder, &tensors)?;
    fill_network("decoder", &mut model.decoder, &tensors)?;
    Ok((model, meta))
}

pub fn save_classifier(path: &Path, model: &ClassifierModel, meta: &ContainerMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.arch = ArchId::Classifier.code();
    meta.n_classes = model.n_classes as u32;
    meta.resolution = model.resolution as u32;
    write_container(
        BufWriter::new(File::create(path)?),
        &meta,
        &network_tensors("net", &model.net),
    )
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel, ContainerMeta)> {
    let (meta, tensors) = read_container(BufReader::new(File::open(path)?))?;
    if meta.arch != ArchId::Classifier.code() {
        return Err(bad("container does not hold a classifier"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = ClassifierModel::new(meta.resolution as usize, meta.n_classes as usize, &mut rng)?;
    fill_network("net", &mut model.net, &tensors)?;
    Ok((model, meta))
}

pub fn save_dql(path: &Path, model: &DqlModel, meta: &ContainerMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.arch = ArchId::Dql.code();
    meta.resolution = model.resolution as u32;
    write_container(
        BufWriter::new(File::create(path)?),
        &meta,
        &network_tensors("net", &model.net),
    )
}

pub fn load_dql(path: &Path) -> Result<(DqlModel, ContainerMeta)> {
    let (meta, tensors) = read_container(BufReader::new(File::open(path)?))?;
    if meta.arch != ArchId::Dql.code() {
        return Err(bad("container does not hold a dql model"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = DqlModel::new(meta.resolution as usize, &mut rng)?;
    fill_network("net", &mut model.net, &tensors)?;
    Ok((model, meta))
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip() {
        let meta = ContainerMeta {
            arch: 0,
            n_classes: 4,
            resolution: 32,
            seed: 99,
            epoch: 7,
            config_hash: [3u8; 32],
        };
        let tensors = vec![
            TensorRecord {
                name: "a".into(),
                dims: vec![2, 3],
                payload: TensorPayload::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            },
            TensorRecord {
                name: "labels".into(),
                dims: vec![3],
                payload: TensorPayload::U32(vec![7, 8, 9]),
            },
        ];
        let mut buf = Vec::new();
        write_container(&mut buf, &meta, &tensors).unwrap();
        let (meta2, tensors2) = read_container(buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors, tensors2);
    }

    #[test]
    fn saves_are_byte_identical() {
        let meta = ContainerMeta::generic(1, [0u8; 32]);
        let tensors = vec![TensorRecord {
            name: "x".into(),
            dims: vec![4],
            payload: TensorPayload::F64(vec![0.25, -1.5, 3.25, 0.0]),
        }];
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_container(&mut a, &meta, &tensors).unwrap();
        write_container(&mut b, &meta, &tensors).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_round_trip_preserves_hash() {
        let dir = std::env::temp_dir().join(format!("gzck-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = crate::models::ClassifierModel::new(32, 4, &mut rng).unwrap();
        let path = dir.join("cls.gzck");
        let meta = ContainerMeta::generic(5, [1u8; 32]);
        save_classifier(&path, &model, &meta).unwrap();
        let (loaded, meta2) = load_classifier(&path).unwrap();
        assert_eq!(loaded.param_hash(), model.param_hash());
        assert_eq!(meta2.n_classes, 4);
        assert_eq!(meta2.seed, 5);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let meta = ContainerMeta::generic(0, [0u8; 32]);
        let tensors = vec![TensorRecord {
            name: "bad".into(),
            dims: vec![5],
            payload: TensorPayload::F32(vec![1.0]),
        }];
        let mut buf = Vec::new();
        assert!(write_container(&mut buf, &meta, &tensors).is_err());
    }
}

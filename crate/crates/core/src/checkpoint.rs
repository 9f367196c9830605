//! Flat binary checkpoints: a 5-byte magic (`FSNN1` or `FCNN1`), then per
//! tensor a little-endian u32 name length, the UTF-8 name, a u32 rank, u32
//! extents and f32 values, until end of file.
//!
//! Besides the parameters a checkpoint carries `meta.*` tensors with the
//! layer stack, the network and encoder settings and the seed, so a model can
//! be rebuilt from the file alone.

use std::io::Read;
use std::path::Path;

use crate::arch::{Architecture, Block};
use crate::cnn::{CnnConfig, CnnModel};
use crate::encoding::{Encoder, NrfeParams, NrfeVariant, TemporalMode};
use crate::error::{Error, FormatError, Result};
use crate::federated::{Model, ModelKind};
use crate::nn::ParamSet;
use crate::rng::rng_from;
use crate::snn::{ResetMode, SnnConfig, SnnModel, SpikeFunction};
use crate::tensor::Tensor;

pub const SNN_MAGIC: &[u8; 5] = b"FSNN1";
pub const CNN_MAGIC: &[u8; 5] = b"FCNN1";

pub fn encode_tensors(magic: &[u8; 5], set: &ParamSet) -> Vec<u8> {
    let mut out = magic.to_vec();
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Returns the magic found and every tensor in file order.
pub fn decode_tensors(mut bytes: &[u8]) -> Result<([u8; 5], ParamSet)> {
    let mut magic = [0u8; 5];
    take(&mut bytes, &mut magic, "magic")?;
    if &magic != SNN_MAGIC && &magic != CNN_MAGIC {
        return Err(FormatError::BadMagic { expected: "FSNN1 or FCNN1" }.into());
    }
    let mut set = ParamSet::new();
    while !bytes.is_empty() {
        let name_len = take_u32(&mut bytes, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        take(&mut bytes, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = take_u32(&mut bytes, "rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(FormatError::Malformed(format!("tensor `{name}` has rank {rank}")).into());
        }
        let shape = (0..rank)
            .map(|_| take_u32(&mut bytes, "extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len * 4 > bytes.len() {
            return Err(FormatError::Truncated("tensor data").into());
        }
        let data = bytes[..len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bytes = &bytes[len * 4..];
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(format!("tensor `{name}`: {e}")))?;
        set.push(name, t);
    }
    Ok((magic, set))
}

fn take(bytes: &mut &[u8], buf: &mut [u8], what: &'static str) -> Result<()> {
    bytes.read_exact(buf).map_err(|_| Error::Format(FormatError::Truncated(what)))
}

fn take_u32(bytes: &mut &[u8], what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    take(bytes, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// A model with the settings needed to use it again.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: Model,
    pub encoder: Encoder,
    pub seed: u64,
}

fn vec_tensor(values: Vec<f32>) -> Tensor {
    Tensor::new(vec![values.len()], values).expect("non-empty meta tensor")
}

fn meta_blocks(arch: &Architecture) -> Vec<f32> {
    let mut v = Vec::with_capacity(arch.blocks.len() * 5);
    for b in &arch.blocks {
        let row = match *b {
            Block::Conv {
                out_channels,
                kernel_size,
                stride,
                padding,
            } => [0, out_channels, kernel_size, stride, padding],
            Block::AvgPool { window } => [1, window, 0, 0, 0],
            Block::Dense { out_features } => [2, out_features, 0, 0, 0],
        };
        v.extend(row.iter().map(|&x| x as f32));
    }
    v
}

fn meta_encoder(encoder: &Encoder) -> Vec<f32> {
    match encoder {
        Encoder::Nrfe(p) => [0, p.side, p.kernel_size, p.batch_size, p.channels, p.epochs]
            .iter()
            .map(|&v| v as f32)
            .chain(exact(&[p.mu_g, p.sigma_g]))
            .chain([
                (p.temporal_mode == TemporalMode::Static) as u8 as f32,
                (p.variant == NrfeVariant::Threshold) as u8 as f32,
            ])
            .collect(),
        Encoder::Rate => vec![1.0],
        Encoder::Direct => vec![2.0],
    }
}

pub fn model_to_bytes(saved: &SavedModel) -> Vec<u8> {
    let arch = saved.model.architecture();
    let mut set = ParamSet::new();
    set.push(
        "meta.arch",
        vec_tensor(
            [arch.in_channels, arch.input_side, arch.num_classes, arch.blocks.len()]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        ),
    );
    if !arch.blocks.is_empty() {
        set.push("meta.blocks", vec_tensor(meta_blocks(arch)));
    }
    match &saved.model {
        Model::Snn(m) => {
            let c = m.config();
            set.push(
                "meta.snn",
                vec_tensor(
                    [
                        c.time_steps as f32,
                        (c.reset == ResetMode::Soft) as u8 as f32,
                        (c.spike_fn == SpikeFunction::Relaxed) as u8 as f32,
                    ]
                    .into_iter()
                    .chain(exact(&[
                        c.leak,
                        c.threshold,
                        c.alpha,
                        c.bn_epsilon,
                        c.bn_momentum,
                        c.grad_clip.unwrap_or(-1.0),
                    ]))
                    .collect(),
                ),
            );
        }
        Model::Cnn(m) => {
            let c = m.config();
            set.push(
                "meta.cnn",
                vec_tensor(exact(&[c.bn_epsilon, c.bn_momentum, c.grad_clip.unwrap_or(-1.0)]).collect()),
            );
        }
    }
    set.push("meta.encoder", vec_tensor(meta_encoder(&saved.encoder)));
    // 16-bit chunks are exact in f32
    set.push(
        "meta.seed",
        vec_tensor((0..4).map(|i| ((saved.seed >> (16 * i)) & 0xffff) as f32).collect()),
    );
    for (name, t) in saved.model.param_set().iter() {
        set.push(name, t.clone());
    }
    let magic = match saved.model.kind() {
        ModelKind::Snn => SNN_MAGIC,
        ModelKind::Cnn => CNN_MAGIC,
    };
    encode_tensors(magic, &set)
}

fn meta<'a>(set: &'a ParamSet, name: &str, min_len: usize) -> Result<&'a [f32]> {
    let t = set
        .get(name)
        .ok_or_else(|| FormatError::Malformed(format!("checkpoint lacks `{name}`")))?;
    if t.len() < min_len {
        return Err(FormatError::Malformed(format!("`{name}` is too short")).into());
    }
    Ok(t.data())
}

/// Reals are stored bit-exactly as two f32 words (low, high) each.
fn exact(values: &[f64]) -> impl Iterator<Item = f32> + '_ {
    values.iter().flat_map(|v| {
        let b = v.to_bits();
        [f32::from_bits(b as u32), f32::from_bits((b >> 32) as u32)]
    })
}

fn real(words: &[f32], at: usize) -> f64 {
    f64::from_bits(words[at].to_bits() as u64 | (words[at + 1].to_bits() as u64) << 32)
}

fn count(v: f32) -> usize {
    v.max(0.0) as usize
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    let (magic, set) = decode_tensors(bytes)?;
    let a = meta(&set, "meta.arch", 4)?;
    let n_blocks = count(a[3]);
    let blocks = if n_blocks == 0 {
        Vec::new()
    } else {
        meta(&set, "meta.blocks", n_blocks * 5)?
            .chunks_exact(5)
            .map(|r| match r[0] as i32 {
                0 => Ok(Block::Conv {
                    out_channels: count(r[1]),
                    kernel_size: count(r[2]),
                    stride: count(r[3]),
                    padding: count(r[4]),
                }),
                1 => Ok(Block::AvgPool { window: count(r[1]) }),
                2 => Ok(Block::Dense { out_features: count(r[1]) }),
                k => Err(Error::Format(FormatError::Malformed(format!("unknown block kind {k}")))),
            })
            .collect::<Result<Vec<_>>>()?
    };
    let arch = Architecture {
        in_channels: count(a[0]),
        input_side: count(a[1]),
        blocks,
        num_classes: count(a[2]),
    };
    let clip = |v: f64| (v > 0.0).then_some(v);
    let mut rng = rng_from(0);
    let mut model = if &magic == SNN_MAGIC {
        let s = meta(&set, "meta.snn", 15)?;
        let config = SnnConfig {
            time_steps: count(s[0]),
            reset: if s[1] != 0.0 { ResetMode::Soft } else { ResetMode::Hard },
            spike_fn: if s[2] != 0.0 { SpikeFunction::Relaxed } else { SpikeFunction::Heaviside },
            leak: real(s, 3),
            threshold: real(s, 5),
            alpha: real(s, 7),
            bn_epsilon: real(s, 9),
            bn_momentum: real(s, 11),
            grad_clip: clip(real(s, 13)),
        };
        Model::Snn(SnnModel::new(arch, config, &mut rng)?)
    } else {
        let c = meta(&set, "meta.cnn", 6)?;
        let config = CnnConfig {
            bn_epsilon: real(c, 0),
            bn_momentum: real(c, 2),
            grad_clip: clip(real(c, 4)),
        };
        Model::Cnn(CnnModel::new(arch, config, &mut rng)?)
    };
    let e = meta(&set, "meta.encoder", 1)?;
    let encoder = match e[0] as i32 {
        0 => {
            let e = meta(&set, "meta.encoder", 12)?;
            Encoder::Nrfe(NrfeParams {
                side: count(e[1]),
                kernel_size: count(e[2]),
                batch_size: count(e[3]),
                channels: count(e[4]),
                epochs: count(e[5]),
                mu_g: real(e, 6),
                sigma_g: real(e, 8),
                temporal_mode: if e[10] != 0.0 { TemporalMode::Static } else { TemporalMode::ResamplePerStep },
                variant: if e[11] != 0.0 { NrfeVariant::Threshold } else { NrfeVariant::Literal },
            })
        }
        1 => Encoder::Rate,
        2 => Encoder::Direct,
        k => return Err(FormatError::Malformed(format!("unknown encoder kind {k}")).into()),
    };
    let seed = meta(&set, "meta.seed", 4)?
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
    let mut params = ParamSet::new();
    for (name, t) in set.iter().filter(|(n, _)| !n.starts_with("meta.")) {
        params.push(name, t.clone());
    }
    model.load_param_set(&params)?;
    Ok(SavedModel { model, encoder, seed })
}

pub fn save_model(saved: &SavedModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &model_to_bytes(saved))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    model_from_bytes(&std::fs::read(path)?)
}

//! Named-tensor archive, format `PTGW`: versioned container for network
//! weights (generator, decoder, ToRGB).
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "PTGW" (4 bytes)
//! version u32 (currently 1)
//! count   u32
//! per tensor: name (u32 byte length + UTF-8), ndims u32, dims (u32 each),
//!             payload (f32 each)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::render::{DecoderParams, ToRGBParams};
use crate::synthesis::{LayerWeights, SynthesisConfig, SynthesisNetwork};

use super::atomic_write;

const MAGIC: [u8; 4] = *b"PTGW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expect: usize = dims.iter().map(|d| *d as usize).product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "tensor {name}: dims {:?} expect {expect} values, got {}",
                dims,
                data.len()
            )));
        }
        Ok(NamedTensor { name, dims, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<NamedTensor>,
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        self.entries.push(NamedTensor::new(name, dims, data)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.entries
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("archive is missing tensor {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for t in &self.entries {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(format!("weight archive: {msg}"));
        if bytes.len() < 12 || bytes[0..4] != MAGIC {
            return Err(fail("bad magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let mut offset = 12usize;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let need = |o: usize, n: usize| -> Result<()> {
                if bytes.len() < o + n {
                    Err(fail("truncated tensor"))
                } else {
                    Ok(())
                }
            };
            need(offset, 4)?;
            let name_len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
            offset += 4;
            need(offset, name_len)?;
            let name = std::str::from_utf8(&bytes[offset..offset + name_len])
                .map_err(|_| fail("tensor name is not UTF-8"))?
                .to_string();
            offset += name_len;
            need(offset, 4)?;
            let ndims = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
            offset += 4;
            need(offset, ndims * 4)?;
            let mut dims = Vec::with_capacity(ndims);
            for i in 0..ndims {
                dims.push(u32::from_le_bytes(
                    bytes[offset + i * 4..offset + i * 4 + 4].try_into().unwrap(),
                ));
            }
            offset += ndims * 4;
            let len: usize = dims.iter().map(|d| *d as usize).product();
            need(offset, len * 4)?;
            let mut data = Vec::with_capacity(len);
            for i in 0..len {
                data.push(f32::from_le_bytes(
                    bytes[offset + i * 4..offset + i * 4 + 4].try_into().unwrap(),
                ));
            }
            offset += len * 4;
            entries.push(NamedTensor { name, dims, data });
        }
        if offset != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn meta(values: &[usize]) -> Vec<f32> {
    values.iter().map(|v| *v as f32).collect()
}

fn meta_usize(t: &NamedTensor) -> Vec<usize> {
    t.data.iter().map(|v| *v as usize).collect()
}

/// Serializes decoder + ToRGB (and optionally the generator) into one
/// archive.
pub fn scene_weights_archive(
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    net: Option<&SynthesisNetwork>,
) -> Result<TensorArchive> {
    let mut a = TensorArchive::default();
    a.push(
        "decoder.meta",
        vec![3],
        meta(&[decoder.channels, decoder.hidden, decoder.color_features]),
    )?;
    a.push("decoder.density_shift", vec![1], vec![decoder.density_shift])?;
    a.push(
        "decoder.w1",
        vec![decoder.hidden as u32, decoder.channels as u32],
        decoder.w1.clone(),
    )?;
    a.push("decoder.b1", vec![decoder.hidden as u32], decoder.b1.clone())?;
    a.push(
        "decoder.w2",
        vec![(1 + decoder.color_features) as u32, decoder.hidden as u32],
        decoder.w2.clone(),
    )?;
    a.push("decoder.b2", vec![(1 + decoder.color_features) as u32], decoder.b2.clone())?;

    a.push("torgb.meta", vec![2], meta(&[torgb.latent_dim, torgb.color_features]))?;
    a.push(
        "torgb.w_mod",
        vec![torgb.color_features as u32, torgb.latent_dim as u32],
        torgb.w_mod.clone(),
    )?;
    a.push("torgb.b_mod", vec![torgb.color_features as u32], torgb.b_mod.clone())?;
    a.push("torgb.w_rgb", vec![3, torgb.color_features as u32], torgb.w_rgb.clone())?;

    if let Some(net) = net {
        let cfg = &net.config;
        a.push(
            "synthesis.levels",
            vec![cfg.level_resolutions.len() as u32],
            meta(&cfg.level_resolutions),
        )?;
        a.push(
            "synthesis.meta",
            vec![4],
            meta(&[cfg.grid_channels, cfg.depth_layers, cfg.latent_dim, cfg.backbone_channels]),
        )?;
        let base = cfg.base_resolution() as u32;
        let cb = cfg.backbone_channels as u32;
        a.push("synthesis.const", vec![cb, base, base], net.const_input.clone())?;
        let c3 = cfg.branch_channels() as u32;
        let d = cfg.latent_dim as u32;
        for (i, l) in net.layers.iter().enumerate() {
            let p = |s: &str| format!("synthesis.layer{i}.{s}");
            a.push(p("bb_w"), vec![cb, cb, 3, 3], l.bb_w.clone())?;
            a.push(p("bb_b"), vec![cb], l.bb_b.clone())?;
            a.push(p("bb_aw"), vec![cb, d], l.bb_aw.clone())?;
            a.push(p("bb_ab"), vec![cb], l.bb_ab.clone())?;
            a.push(p("head_w"), vec![c3, cb], l.head_w.clone())?;
            a.push(p("head_b"), vec![c3], l.head_b.clone())?;
            a.push(p("t3_w"), vec![c3, c3, 3, 3], l.t3_w.clone())?;
            a.push(p("t3_b"), vec![c3], l.t3_b.clone())?;
            a.push(p("t3_aw"), vec![c3, d], l.t3_aw.clone())?;
            a.push(p("t3_ab"), vec![c3], l.t3_ab.clone())?;
        }
    }
    Ok(a)
}

pub fn decoder_from_archive(a: &TensorArchive) -> Result<DecoderParams> {
    let m = meta_usize(a.get("decoder.meta")?);
    if m.len() != 3 {
        return Err(Error::Format("decoder.meta must have 3 entries".into()));
    }
    let d = DecoderParams {
        channels: m[0],
        hidden: m[1],
        color_features: m[2],
        w1: a.get("decoder.w1")?.data.clone(),
        b1: a.get("decoder.b1")?.data.clone(),
        w2: a.get("decoder.w2")?.data.clone(),
        b2: a.get("decoder.b2")?.data.clone(),
        density_shift: a.get("decoder.density_shift")?.data[0],
    };
    d.validate()?;
    Ok(d)
}

pub fn torgb_from_archive(a: &TensorArchive) -> Result<ToRGBParams> {
    let m = meta_usize(a.get("torgb.meta")?);
    if m.len() != 2 {
        return Err(Error::Format("torgb.meta must have 2 entries".into()));
    }
    let t = ToRGBParams {
        latent_dim: m[0],
        color_features: m[1],
        w_mod: a.get("torgb.w_mod")?.data.clone(),
        b_mod: a.get("torgb.b_mod")?.data.clone(),
        w_rgb: a.get("torgb.w_rgb")?.data.clone(),
    };
    t.validate()?;
    Ok(t)
}

pub fn synthesis_from_archive(a: &TensorArchive) -> Result<SynthesisNetwork> {
    let levels = meta_usize(a.get("synthesis.levels")?);
    let m = meta_usize(a.get("synthesis.meta")?);
    if m.len() != 4 {
        return Err(Error::Format("synthesis.meta must have 4 entries".into()));
    }
    let config = SynthesisConfig {
        level_resolutions: levels,
        grid_channels: m[0],
        depth_layers: m[1],
        latent_dim: m[2],
        backbone_channels: m[3],
    };
    config.validate()?;
    let mut layers = Vec::with_capacity(config.level_resolutions.len());
    for i in 0..config.level_resolutions.len() {
        let p = |s: &str| format!("synthesis.layer{i}.{s}");
        layers.push(LayerWeights {
            bb_w: a.get(&p("bb_w"))?.data.clone(),
            bb_b: a.get(&p("bb_b"))?.data.clone(),
            bb_aw: a.get(&p("bb_aw"))?.data.clone(),
            bb_ab: a.get(&p("bb_ab"))?.data.clone(),
            head_w: a.get(&p("head_w"))?.data.clone(),
            head_b: a.get(&p("head_b"))?.data.clone(),
            t3_w: a.get(&p("t3_w"))?.data.clone(),
            t3_b: a.get(&p("t3_b"))?.data.clone(),
            t3_aw: a.get(&p("t3_aw"))?.data.clone(),
            t3_ab: a.get(&p("t3_ab"))?.data.clone(),
        });
    }
    let net = SynthesisNetwork {
        const_input: a.get("synthesis.const")?.data.clone(),
        config,
        layers,
    };
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::SynthesisConfig;

    #[test]
    fn archive_round_trip_is_bit_identical() {
        let decoder = DecoderParams::seeded(1, 6, 16, 4);
        let torgb = ToRGBParams::seeded(2, 8, 4);
        let net = SynthesisNetwork::seeded(
            3,
            SynthesisConfig {
                level_resolutions: vec![4, 8],
                grid_channels: 4,
                depth_layers: 3,
                latent_dim: 8,
                backbone_channels: 6,
            },
        )
        .unwrap();
        let archive = scene_weights_archive(&decoder, &torgb, Some(&net)).unwrap();
        let bytes = archive.encode();
        let decoded = TensorArchive::decode(&bytes).unwrap();
        assert_eq!(archive, decoded);
        assert_eq!(decoder_from_archive(&decoded).unwrap(), decoder);
        assert_eq!(torgb_from_archive(&decoded).unwrap(), torgb);
        assert_eq!(synthesis_from_archive(&decoded).unwrap(), net);
    }

    #[test]
    fn missing_tensors_are_reported_by_name() {
        let decoder = DecoderParams::seeded(4, 6, 16, 4);
        let torgb = ToRGBParams::seeded(5, 8, 4);
        let archive = scene_weights_archive(&decoder, &torgb, None).unwrap();
        let err = synthesis_from_archive(&archive).unwrap_err();
        assert!(err.to_string().contains("synthesis.levels"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected_at_construction() {
        assert!(NamedTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }
}

//! The `.tsck` parameter checkpoint for a backbone, retriever or fusion.
//!
//! | bytes      | content                                             |
//! |------------|-----------------------------------------------------|
//! | 4          | magic `TSCK`                                        |
//! | 2          | format version, `u16` LE (currently 1)              |
//! | 4          | metadata length `m`, `u32` LE                       |
//! | m          | UTF-8 JSON metadata                                 |
//! | 8          | value count `p`, `u64` LE                           |
//! | 8 · p      | parameters, `f64` LE                                |
//! | 8          | CRC-64/XZ of every preceding byte, `u64` LE         |
//!
//! The metadata names the component and its dimensions, then lists each
//! network with its output activation, frozen flag and per-layer
//! `[out, in]` shapes. Parameters follow in that order, each layer as its
//! row-major weight matrix then its bias.

use std::fs;
use std::path::Path;

use rafcast_core::backbone::{Backbone, BackboneDims};
use rafcast_core::fusion::{ChannelPrompt, Fusion, FusionPolicy, TokenConcat};
use rafcast_core::numkit::{Activation, Layer, Matrix, MlpParams};
use rafcast_core::retriever::Retriever;
use serde::{Deserialize, Serialize};

use crate::artifact::Envelope;
use crate::container::{Reader, Writer};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Backbone { dims: BackboneDims },
    Retriever { sl: usize, embed_dim: usize },
    Fusion { policy: FusionPolicy, n: usize, d: usize },
}

#[derive(Serialize, Deserialize)]
struct NetMeta {
    name: String,
    output: Activation,
    frozen: bool,
    shapes: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    component: Component,
    nets: Vec<NetMeta>,
    artifact: Option<Envelope>,
}

/// A decoded checkpoint before it is assembled into a component.
pub struct Checkpoint {
    pub component: Component,
    pub nets: Vec<(String, MlpParams)>,
    pub artifact: Option<Envelope>,
}

pub fn encode(component: Component, nets: &[(&str, &MlpParams)], artifact: Option<&Envelope>) -> Vec<u8> {
    let meta = Meta {
        component,
        nets: nets
            .iter()
            .map(|(name, p)| NetMeta {
                name: name.to_string(),
                output: p.output_activation(),
                frozen: p.is_frozen(),
                shapes: p.layers().iter().map(|l| [l.out_dim(), l.in_dim()]).collect(),
            })
            .collect(),
        artifact: artifact.cloned(),
    };
    let mut w = Writer::new(MAGIC, VERSION);
    w.block(&serde_json::to_vec(&meta).expect("metadata serializes"));
    let values: Vec<f64> = nets
        .iter()
        .flat_map(|(_, p)| p.layers().iter())
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
        .copied()
        .collect();
    w.u64(values.len() as u64);
    for v in values {
        w.f64(v);
    }
    w.finish()
}

fn bad(msg: impl ToString) -> FormatError {
    FormatError::Metadata(msg.to_string())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let meta = r.block()?;
    let count = r.u64()?;
    r.require(count.saturating_mul(8))?;
    let values = r.f64s(count as usize)?;
    r.finish()?;
    let meta: Meta = serde_json::from_slice(meta).map_err(bad)?;
    let expected: usize = meta
        .nets
        .iter()
        .flat_map(|n| &n.shapes)
        .map(|[o, i]| o * i + o)
        .sum();
    if expected != values.len() {
        return Err(bad(format!("shapes need {expected} values, file holds {}", values.len())));
    }
    let mut rest = &values[..];
    let mut nets = Vec::with_capacity(meta.nets.len());
    for n in meta.nets {
        let mut layers = Vec::with_capacity(n.shapes.len());
        for [o, i] in n.shapes {
            let (w, tail) = rest.split_at(o * i);
            let (b, tail) = tail.split_at(o);
            rest = tail;
            layers.push(Layer {
                weight: Matrix::from_vec(o, i, w.to_vec()).map_err(bad)?,
                bias: b.to_vec(),
            });
        }
        let mut p = MlpParams::from_layers(layers, n.output).map_err(bad)?;
        p.set_frozen(n.frozen);
        nets.push((n.name, p));
    }
    Ok(Checkpoint {
        component: meta.component,
        nets,
        artifact: meta.artifact,
    })
}

fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.into(),
        source,
    })
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn wrong_kind(path: &Path, want: &str, got: &Component) -> Error {
    Error::Format {
        path: path.into(),
        source: bad(format!("expected a {want} checkpoint, found {got:?}")),
    }
}

/// Takes the named networks out of `nets` in order.
fn take(path: &Path, nets: Vec<(String, MlpParams)>, names: &[&str]) -> Result<Vec<MlpParams>> {
    let got: Vec<&str> = nets.iter().map(|(n, _)| n.as_str()).collect();
    if got != names {
        return Err(Error::Format {
            path: path.into(),
            source: bad(format!("networks {got:?}, expected {names:?}")),
        });
    }
    Ok(nets.into_iter().map(|(_, p)| p).collect())
}

fn assemble<T>(path: &Path, r: rafcast_core::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Format {
        path: path.into(),
        source: bad(e),
    })
}

pub fn encode_backbone(b: &Backbone, artifact: Option<&Envelope>) -> Vec<u8> {
    encode(
        Component::Backbone { dims: b.dims() },
        &[("proj", b.proj()), ("trunk", b.trunk()), ("head", b.head())],
        artifact,
    )
}

pub fn save_backbone(path: &Path, b: &Backbone, artifact: Option<&Envelope>) -> Result<()> {
    write(path, encode_backbone(b, artifact))
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, Option<Envelope>)> {
    let ck = read(path)?;
    let Component::Backbone { dims } = ck.component else {
        return Err(wrong_kind(path, "backbone", &ck.component));
    };
    let mut parts = take(path, ck.nets, &["proj", "trunk", "head"])?.into_iter();
    let (proj, trunk, head) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    Ok((assemble(path, Backbone::from_parts(dims, proj, trunk, head))?, ck.artifact))
}

pub fn encode_retriever(r: &Retriever, artifact: Option<&Envelope>) -> Vec<u8> {
    encode(
        Component::Retriever {
            sl: r.sl(),
            embed_dim: r.embed_dim(),
        },
        &[("query", r.query_encoder()), ("candidate", r.cand_encoder())],
        artifact,
    )
}

pub fn save_retriever(path: &Path, r: &Retriever, artifact: Option<&Envelope>) -> Result<()> {
    write(path, encode_retriever(r, artifact))
}

pub fn load_retriever(path: &Path) -> Result<(Retriever, Option<Envelope>)> {
    let ck = read(path)?;
    let Component::Retriever { sl, embed_dim } = ck.component else {
        return Err(wrong_kind(path, "retriever", &ck.component));
    };
    let mut parts = take(path, ck.nets, &["query", "candidate"])?.into_iter();
    let r = assemble(path, Retriever::from_parts(parts.next().unwrap(), parts.next().unwrap()))?;
    if (r.sl(), r.embed_dim()) != (sl, embed_dim) {
        return Err(wrong_kind(path, "retriever with matching dims", &ck.component));
    }
    Ok((r, ck.artifact))
}

pub fn encode_fusion(f: &Fusion, n: usize, d: usize, artifact: Option<&Envelope>) -> Vec<u8> {
    let nets: Vec<(&str, &MlpParams)> = f.params().map(|p| ("mlp", p)).into_iter().collect();
    encode(Component::Fusion { policy: f.policy(), n, d }, &nets, artifact)
}

pub fn save_fusion(path: &Path, f: &Fusion, n: usize, d: usize, artifact: Option<&Envelope>) -> Result<()> {
    write(path, encode_fusion(f, n, d, artifact))
}

pub fn load_fusion(path: &Path) -> Result<(Fusion, Option<Envelope>)> {
    let ck = read(path)?;
    let Component::Fusion { policy, n, d } = ck.component else {
        return Err(wrong_kind(path, "fusion", &ck.component));
    };
    let fusion = match policy {
        FusionPolicy::ChannelPrompt => {
            let mlp = take(path, ck.nets, &["mlp"])?.pop().unwrap();
            Fusion::ChannelPrompt(assemble(path, ChannelPrompt::from_params(mlp, n, d))?)
        }
        FusionPolicy::TokenConcat => {
            let mlp = take(path, ck.nets, &["mlp"])?.pop().unwrap();
            Fusion::TokenConcat(assemble(path, TokenConcat::from_params(mlp, d))?)
        }
        FusionPolicy::Average => {
            take(path, ck.nets, &[])?;
            Fusion::Average
        }
        FusionPolicy::None => {
            take(path, ck.nets, &[])?;
            Fusion::None
        }
    };
    Ok((fusion, ck.artifact))
}

//! Named-array container: `BTNT`, a `u16` version, a length-prefixed JSON
//! metadata block, then raw little-endian `f32` data in metadata order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{EmaPlacement, MarginHead, MarginKind};
use crate::model::branch::{build_branch, BTNetModel, BranchNet};
use crate::model::spec::ModelSpec;
use crate::model::trunk::{build_trunk, TrunkModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTNT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub kind: MarginKind,
    pub s: f64,
    pub m: f64,
    pub t: f64,
    pub alpha: f64,
    pub placement: EmaPlacement,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// `trunk`, `btnet` or `delta`.
    pub kind: String,
    pub spec: Option<ModelSpec>,
    pub head: Option<HeadMeta>,
    pub info: BTreeMap<String, String>,
    pub arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub spec: Option<ModelSpec>,
    pub head: Option<HeadMeta>,
    pub info: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), spec: None, head: None, info: BTreeMap::new(), arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.arrays.push(NamedArray { name: name.into(), shape: shape.to_vec(), data: data.to_vec() });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            kind: self.kind.clone(),
            spec: self.spec.clone(),
            head: self.head.clone(),
            info: self.info.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayMeta { name: a.name.clone(), shape: a.shape.clone(), dtype: "f32".into() })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata block too large".into()))?;
        let total: usize = self.arrays.iter().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(10 + json.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            a.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a BTNT checkpoint".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let json = bytes.get(10..10 + len).ok_or_else(|| Error::Format("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(json)?;
        let mut pos = 10 + len;
        let mut arrays = Vec::with_capacity(meta.arrays.len());
        for a in meta.arrays {
            if a.dtype != "f32" {
                return Err(Error::Format(format!("array {} has dtype {}", a.name, a.dtype)));
            }
            let n: usize = a.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| Error::Format(format!("truncated array {}", a.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 4 * n;
            arrays.push(NamedArray { name: a.name, shape: a.shape, data });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { kind: meta.kind, spec: meta.spec, head: meta.head, info: meta.info, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn require_spec(&self) -> Result<&ModelSpec> {
        self.spec.as_ref().ok_or_else(|| Error::Format("checkpoint carries no model spec".into()))
    }

    /// Copies every array named by `visit_mut` out of this checkpoint.
    fn fill(&self, visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut [f32]))) -> Result<()> {
        let index: HashMap<&str, &NamedArray> = self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut err = None;
        visit_mut(&mut |name, dst| {
            if err.is_some() {
                return;
            }
            match index.get(name) {
                Some(a) if a.data.len() == dst.len() => dst.copy_from_slice(&a.data),
                Some(a) => err = Some(Error::Format(format!("array {name}: {} values, model needs {}", a.data.len(), dst.len()))),
                None => err = Some(Error::Format(format!("checkpoint lacks array {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Overwrites arrays of `model` that appear in this checkpoint, leaving
    /// the rest alone; returns how many were applied.
    pub fn apply_to(&self, model: &mut BTNetModel) -> usize {
        let index: HashMap<&str, &NamedArray> = self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut applied = 0;
        model.visit_mut(&mut |name, dst| {
            if let Some(a) = index.get(name).filter(|a| a.data.len() == dst.len()) {
                dst.copy_from_slice(&a.data);
                applied += 1;
            }
        });
        applied
    }
}

fn head_meta(h: &MarginHead) -> HeadMeta {
    HeadMeta { kind: h.kind, s: h.s, m: h.m, t: h.t, alpha: h.alpha, placement: h.placement, frozen: h.frozen }
}

fn head_from(meta: &HeadMeta, ck: &Checkpoint) -> Result<MarginHead> {
    let w = ck.get("head.weight").ok_or_else(|| Error::Format("checkpoint lacks head.weight".into()))?;
    Ok(MarginHead {
        weight: Tensor::new(&w.shape, w.data.clone())?,
        kind: meta.kind,
        s: meta.s,
        m: meta.m,
        t: meta.t,
        alpha: meta.alpha,
        placement: meta.placement,
        frozen: meta.frozen,
    })
}

impl TrunkModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("trunk");
        ck.spec = Some(self.spec.clone());
        ck.head = self.head.as_ref().map(head_meta);
        self.visit(&mut |n, s, d| ck.push(n, s, d));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trunk = build_trunk(ck.require_spec()?, 0)?;
        trunk.head = ck.head.as_ref().map(|h| head_from(h, ck)).transpose()?;
        ck.fill(|f| trunk.visit_mut(f))?;
        Ok(trunk)
    }
}

impl BTNetModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.trunk.to_checkpoint();
        ck.kind = "btnet".into();
        let rs: Vec<String> = self.branches.keys().map(|r| r.to_string()).collect();
        ck.info.insert("branches".into(), rs.join(","));
        self.branches.values().for_each(|b| b.visit(&mut |n, s, d| ck.push(n, s, d)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let trunk = TrunkModel::from_checkpoint(ck)?;
        let rs = ck.info.get("branches").map(String::as_str).unwrap_or("");
        let mut branches: Vec<BranchNet> = Vec::new();
        for r in rs.split(',').filter(|s| !s.is_empty()) {
            let r: usize = r.parse().map_err(|_| Error::Format(format!("bad branch list {rs:?}")))?;
            branches.push(build_branch(&trunk.spec, r, 0)?);
        }
        let mut model = BTNetModel::assemble(trunk, branches)?;
        ck.fill(|f| model.visit_mut(f))?;
        Ok(model)
    }
}

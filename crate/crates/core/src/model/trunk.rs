use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::losses::MarginHead;
use crate::model::layers::{init_unit_bns, init_unit_convs, run_units, Binder, BnSet, Linear, UnitBns, UnitConvs};
use crate::model::spec::{ModelSpec, TapPoint, UnitSpec};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Batch size used for inference passes.
pub const INFER_BATCH: usize = 128;

/// Shared trunk with per-resolution BN banks and an optional margin head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkModel {
    pub spec: ModelSpec,
    pub units: Vec<UnitSpec>,
    pub convs: Vec<UnitConvs>,
    /// Canonical-resolution bank over every unit.
    pub bns: Vec<UnitBns>,
    /// Banks for `r < S`, covering only the units after `tap(r)`.
    pub banks: BTreeMap<usize, Vec<UnitBns>>,
    /// Flattened final feature map to the embedding.
    pub fc: Linear,
    pub head: Option<MarginHead>,
}

/// Deterministic trunk initialization from `seed`.
pub fn build_trunk(spec: &ModelSpec, seed: u64) -> Result<TrunkModel> {
    spec.validate()?;
    let units = spec.units()?;
    let mut rng = substream(seed, "init.trunk");
    let convs = units.iter().map(|u| init_unit_convs(u, &mut rng)).collect();
    let s = spec.canonical_size;
    let bns: Vec<UnitBns> = units.iter().map(|u| init_unit_bns(u, s)).collect();
    let (fs, fc_ch) = spec.final_shape()?;
    let fc = Linear::he(spec.embedding_dim, fc_ch * fs * fs, &mut rng);
    let mut trunk = TrunkModel { spec: spec.clone(), units, convs, bns, banks: BTreeMap::new(), fc, head: None };
    trunk.sync_banks()?;
    Ok(trunk)
}

impl TrunkModel {
    pub fn canonical(&self) -> usize {
        self.spec.canonical_size
    }

    pub fn tap(&self, r: usize) -> Result<TapPoint> {
        self.spec.tap(r)
    }

    /// Resets every low-resolution bank to a copy of the canonical one.
    pub fn sync_banks(&mut self) -> Result<()> {
        let s = self.canonical();
        self.banks.clear();
        for &r in &self.spec.branch_resolutions {
            if r == s {
                continue;
            }
            let start = self.tap(r)?.unit + 1;
            let bank = self.bns[start..].iter().map(|ub| ub.iter().map(|b| b.retagged(r)).collect()).collect();
            self.banks.insert(r, bank);
        }
        Ok(())
    }

    /// First unit of `T_r` and the BN bank it runs with.
    pub fn bank(&self, r: usize) -> Result<(usize, &[UnitBns])> {
        let start = self.tap(r)?.unit + 1;
        if r == self.canonical() {
            return Ok((start, &self.bns[start..]));
        }
        let bank = self.banks.get(&r).ok_or(Error::UnsupportedResolution(r))?;
        Ok((start, bank))
    }

    fn embed_head(&self, g: &mut Graph, x: Var, binder: &mut Binder) -> Result<Var> {
        let flat = g.flatten(x)?;
        let w = binder.bind(g, "trunk.fc.weight", &self.fc.weight)?;
        let b = binder.bind(g, "trunk.fc.bias", &self.fc.bias)?;
        let z = g.linear(flat, w, Some(b))?;
        g.l2_normalize(z)
    }

    fn check_input(&self, g: &Graph, x: Var, size: usize) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != size || s[3] != size {
            return Err(shape_err!("trunk input {:?}, expected N x {} x {size} x {size}", s, self.spec.in_channels));
        }
        Ok(())
    }

    /// Full forward at the canonical size, updating canonical BN statistics.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, binder: &mut Binder) -> Result<Var> {
        self.check_input(g, x, self.canonical())?;
        let s = self.canonical();
        let h = run_units(g, x, &self.units, &self.convs, BnSet::Train(&mut self.bns), 0, "trunk", &format!("trunk.bn{s}"), binder)?;
        self.embed_head(g, h, binder)
    }

    /// Full forward at the canonical size with running statistics.
    pub fn forward_infer(&self, g: &mut Graph, x: Var, binder: &mut Binder) -> Result<Var> {
        self.check_input(g, x, self.canonical())?;
        let s = self.canonical();
        let h = run_units(g, x, &self.units, &self.convs, BnSet::Infer(&self.bns), 0, "trunk", &format!("trunk.bn{s}"), binder)?;
        self.embed_head(g, h, binder)
    }

    fn check_tap(&self, g: &Graph, feature: Var, r: usize) -> Result<()> {
        let tap = self.tap(r)?;
        let fs = g.shape(feature);
        if fs.len() != 4 || fs[1] != tap.channels || fs[2] != r || fs[3] != r {
            return Err(shape_err!("feature {:?} does not match tap {r}: N x {} x {r} x {r}", fs, tap.channels));
        }
        Ok(())
    }

    /// `T_r`: from a tap-shaped feature map to the embedding, updating bank `r`.
    pub fn forward_from_tap_train(&mut self, g: &mut Graph, feature: Var, r: usize, binder: &mut Binder) -> Result<Var> {
        self.check_tap(g, feature, r)?;
        let start = self.tap(r)?.unit + 1;
        let bank = if r == self.spec.canonical_size {
            &mut self.bns[start..]
        } else {
            self.banks.get_mut(&r).ok_or(Error::UnsupportedResolution(r))?.as_mut_slice()
        };
        let bn_prefix = format!("trunk.bn{r}");
        let h = run_units(g, feature, &self.units[start..], &self.convs[start..], BnSet::Train(bank), start, "trunk", &bn_prefix, binder)?;
        self.embed_head(g, h, binder)
    }

    /// `T_r` with running statistics.
    pub fn forward_from_tap_infer(&self, g: &mut Graph, feature: Var, r: usize, binder: &mut Binder) -> Result<Var> {
        self.check_tap(g, feature, r)?;
        let (start, bank) = self.bank(r)?;
        let h = run_units(g, feature, &self.units[start..], &self.convs[start..], BnSet::Infer(bank), start, "trunk", &format!("trunk.bn{r}"), binder)?;
        self.embed_head(g, h, binder)
    }

    /// The inference-mode activation at tap `r` for canonical-size inputs,
    /// `N x C_r x r x r`, computed with the canonical bank.
    pub fn tap_feature(&self, images: &Tensor, r: usize) -> Result<Tensor> {
        let tap = self.tap(r)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        self.check_input(&g, x, self.canonical())?;
        let s = self.canonical();
        let mut binder = Binder::frozen();
        let end = tap.unit + 1;
        let h = run_units(&mut g, x, &self.units[..end], &self.convs[..end], BnSet::Infer(&self.bns[..end]), 0, "trunk", &format!("trunk.bn{s}"), &mut binder)?;
        Ok(g.tensor(h))
    }

    /// Unit embeddings of canonical-size images.
    pub fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.constant(Image::batch(chunk)?)?;
            let z = self.forward_infer(&mut g, x, &mut Binder::frozen())?;
            out.extend(g.value(z).chunks(self.spec.embedding_dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Every stored array under its parameter name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (i, uc) in self.convs.iter().enumerate() {
            for (j, c) in uc.iter().enumerate() {
                f(&format!("trunk.u{i}.conv{j}.weight"), c.weight.shape(), c.weight.data());
            }
        }
        let s = self.canonical();
        visit_bank(&format!("trunk.bn{s}"), 0, &self.bns, f);
        for (r, bank) in &self.banks {
            let start = self.tap(*r).map(|t| t.unit + 1).unwrap_or(0);
            visit_bank(&format!("trunk.bn{r}"), start, bank, f);
        }
        f("trunk.fc.weight", self.fc.weight.shape(), self.fc.weight.data());
        f("trunk.fc.bias", self.fc.bias.shape(), self.fc.bias.data());
        if let Some(h) = &self.head {
            f("head.weight", h.weight.shape(), h.weight.data());
        }
    }

    /// Mutable counterpart of [`TrunkModel::visit`], same names and order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f32])) {
        for (i, uc) in self.convs.iter_mut().enumerate() {
            for (j, c) in uc.iter_mut().enumerate() {
                f(&format!("trunk.u{i}.conv{j}.weight"), c.weight.data_mut());
            }
        }
        let s = self.spec.canonical_size;
        visit_bank_mut(&format!("trunk.bn{s}"), 0, &mut self.bns, f);
        let starts: Vec<usize> = self.banks.keys().map(|r| self.spec.tap(*r).map(|t| t.unit + 1).unwrap_or(0)).collect();
        for ((r, bank), start) in self.banks.iter_mut().zip(starts) {
            visit_bank_mut(&format!("trunk.bn{r}"), start, bank, f);
        }
        f("trunk.fc.weight", self.fc.weight.data_mut());
        f("trunk.fc.bias", self.fc.bias.data_mut());
        if let Some(h) = &mut self.head {
            f("head.weight", h.weight.data_mut());
        }
    }
}

pub(crate) fn visit_bank(prefix: &str, start: usize, bank: &[UnitBns], f: &mut dyn FnMut(&str, &[usize], &[f32])) {
    for (k, ub) in bank.iter().enumerate() {
        for (j, b) in ub.iter().enumerate() {
            let n = format!("{prefix}.u{}.bn{j}", start + k);
            let c = [b.channels()];
            f(&format!("{n}.gamma"), &c, b.gamma.data());
            f(&format!("{n}.beta"), &c, b.beta.data());
            f(&format!("{n}.running_mean"), &c, &b.running_mean);
            f(&format!("{n}.running_var"), &c, &b.running_var);
        }
    }
}

pub(crate) fn visit_bank_mut(prefix: &str, start: usize, bank: &mut [UnitBns], f: &mut dyn FnMut(&str, &mut [f32])) {
    for (k, ub) in bank.iter_mut().enumerate() {
        for (j, b) in ub.iter_mut().enumerate() {
            let n = format!("{prefix}.u{}.bn{j}", start + k);
            f(&format!("{n}.gamma"), b.gamma.data_mut());
            f(&format!("{n}.beta"), b.beta.data_mut());
            f(&format!("{n}.running_mean"), &mut b.running_mean);
            f(&format!("{n}.running_var"), &mut b.running_var);
        }
    }
}

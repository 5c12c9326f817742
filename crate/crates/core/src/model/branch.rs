use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::model::layers::{init_unit_bns, init_unit_convs, run_units, Binder, BnSet, UnitBns, UnitConvs};
use crate::model::spec::{ModelSpec, UnitSpec};
use crate::model::trunk::{visit_bank, visit_bank_mut, TrunkModel, INFER_BATCH};
use crate::rng::substream;

/// Same-resolution stack mapping an `r x r` image to the trunk's tap
/// feature map at `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchNet {
    pub resolution: usize,
    pub units: Vec<UnitSpec>,
    pub convs: Vec<UnitConvs>,
    pub bns: Vec<UnitBns>,
}

fn branch_units(spec: &ModelSpec, r: usize) -> Result<Vec<UnitSpec>> {
    if !spec.supports(r) {
        return Err(Error::UnsupportedResolution(r));
    }
    let tap = spec.tap(r)?;
    Ok(spec.units()?[..=tap.unit].iter().map(|u| u.same_resolution(r)).collect())
}

/// A freshly initialized branch for resolution `r`.
pub fn build_branch(spec: &ModelSpec, r: usize, seed: u64) -> Result<BranchNet> {
    let units = branch_units(spec, r)?;
    let mut rng = substream(seed, &format!("init.branch{r}"));
    let convs = units.iter().map(|u| init_unit_convs(u, &mut rng)).collect();
    let bns = units.iter().map(|u| init_unit_bns(u, r)).collect();
    Ok(BranchNet { resolution: r, units, convs, bns })
}

impl BranchNet {
    /// Branch initialized from the trunk prefix: conv weights keep their
    /// shapes when strides drop to 1, BN starts from the canonical bank.
    pub fn from_trunk(trunk: &TrunkModel, r: usize) -> Result<BranchNet> {
        let units = branch_units(&trunk.spec, r)?;
        let n = units.len();
        let convs = trunk.convs[..n].to_vec();
        let bns = trunk.bns[..n].iter().map(|ub| ub.iter().map(|b| b.retagged(r)).collect()).collect();
        Ok(BranchNet { resolution: r, units, convs, bns })
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().map_or(0, |u| u.out_channels)
    }

    fn prefix(&self) -> String {
        format!("branch{}", self.resolution)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        let (r, c) = (self.resolution, self.units[0].in_channels);
        if s.len() != 4 || s[1] != c || s[2] != r || s[3] != r {
            return Err(shape_err!("branch {r} input {:?}, expected N x {c} x {r} x {r}", s));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, g: &mut Graph, x: Var, binder: &mut Binder) -> Result<Var> {
        self.check_input(g, x)?;
        let p = self.prefix();
        run_units(g, x, &self.units, &self.convs, BnSet::Train(&mut self.bns), 0, &p, &p, binder)
    }

    pub fn forward_infer(&self, g: &mut Graph, x: Var, binder: &mut Binder) -> Result<Var> {
        self.check_input(g, x)?;
        let p = self.prefix();
        run_units(g, x, &self.units, &self.convs, BnSet::Infer(&self.bns), 0, &p, &p, binder)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        let p = self.prefix();
        for (i, uc) in self.convs.iter().enumerate() {
            for (j, c) in uc.iter().enumerate() {
                f(&format!("{p}.u{i}.conv{j}.weight"), c.weight.shape(), c.weight.data());
            }
        }
        visit_bank(&p, 0, &self.bns, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f32])) {
        let p = self.prefix();
        for (i, uc) in self.convs.iter_mut().enumerate() {
            for (j, c) in uc.iter_mut().enumerate() {
                f(&format!("{p}.u{i}.conv{j}.weight"), c.weight.data_mut());
            }
        }
        visit_bank_mut(&p, 0, &mut self.bns, f);
    }
}

/// Branch and trunk outputs of one BTNet pass.
#[derive(Debug, Clone, Copy)]
pub struct BtOutput {
    /// Branch feature map, `N x C_r x r x r`.
    pub feature: Var,
    pub embedding: Var,
}

/// A trunk plus one branch per supported resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BTNetModel {
    pub trunk: TrunkModel,
    pub branches: BTreeMap<usize, BranchNet>,
}

impl BTNetModel {
    /// Checks every branch against its tap shape.
    pub fn assemble(trunk: TrunkModel, branches: impl IntoIterator<Item = BranchNet>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for b in branches {
            let tap = trunk.tap(b.resolution)?;
            let expected = branch_units(&trunk.spec, b.resolution)?;
            let shapes_match = b.units == expected
                && b.convs.len() == expected.len()
                && b.convs.iter().zip(&expected).all(|(c, u)| {
                    c.len() == u.convs().len()
                        && c.iter().zip(u.convs()).all(|(cv, (o, i, k, _))| cv.weight.shape() == [o, i, k, k])
                });
            if !shapes_match || b.out_channels() != tap.channels {
                return Err(shape_err!(
                    "branch {} does not produce the {}x{}x{} tap feature",
                    b.resolution,
                    tap.channels,
                    b.resolution,
                    b.resolution
                ));
            }
            map.insert(b.resolution, b);
        }
        Ok(Self { trunk, branches: map })
    }

    /// Every supported resolution gets a branch copied from the trunk prefix.
    pub fn from_trunk(trunk: TrunkModel) -> Result<Self> {
        let branches = trunk
            .spec
            .branch_resolutions
            .iter()
            .map(|&r| BranchNet::from_trunk(&trunk, r))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(trunk, branches)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.trunk.spec
    }

    pub fn branch(&self, r: usize) -> Result<&BranchNet> {
        self.branches.get(&r).ok_or(Error::UnsupportedResolution(r))
    }

    /// `T_r(B_r(x))` updating the resolution-`r` statistics.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, r: usize, binder: &mut Binder) -> Result<BtOutput> {
        let branch = self.branches.get_mut(&r).ok_or(Error::UnsupportedResolution(r))?;
        let feature = branch.forward_train(g, x, binder)?;
        let embedding = self.trunk.forward_from_tap_train(g, feature, r, binder)?;
        Ok(BtOutput { feature, embedding })
    }

    pub fn forward_infer(&self, g: &mut Graph, x: Var, r: usize, binder: &mut Binder) -> Result<BtOutput> {
        let feature = self.branch(r)?.forward_infer(g, x, binder)?;
        let embedding = self.trunk.forward_from_tap_infer(g, feature, r, binder)?;
        Ok(BtOutput { feature, embedding })
    }

    /// Unit embeddings of images already resized to `r x r`.
    pub fn embed(&self, images: &[Image], r: usize) -> Result<Vec<Vec<f32>>> {
        let dim = self.spec().embedding_dim;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.constant(Image::batch(chunk)?)?;
            let z = self.forward_infer(&mut g, x, r, &mut Binder::frozen())?.embedding;
            out.extend(g.value(z).chunks(dim).map(|v| v.to_vec()));
        }
        Ok(out)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.trunk.visit(f);
        self.branches.values().for_each(|b| b.visit(f));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f32])) {
        self.trunk.visit_mut(f);
        self.branches.values_mut().for_each(|b| b.visit_mut(f));
    }
}

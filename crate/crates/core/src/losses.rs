//! Registration and level-set loss terms, as standalone evaluators and as graph fragments.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_graph, displacement_off_faces, GradCheckResult, Wrt};
use crate::autodiff::{Graph, NodeId, ParamStore, Shape};
use crate::distance::WeightMap;
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid, Volume};
use crate::warp::DeformationField;

/// Term weights. Defaults are the reference values (1, 1, 1, 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cc: f64,
    pub grad: f64,
    pub wgrad: f64,
    pub ls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cc: 1.0, grad: 1.0, wgrad: 1.0, ls: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cc, self.grad, self.wgrad, self.ls];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Which terms make up the objective.
///
/// `Vxm` is `cc + grad`; `New` is `cc + wgrad + ls`, both scaled by [`LossWeights`].
/// The dataset presets use fixed coefficients: `Iac` and `Hkits21` are `cc + wgrad + 0.5 ls`,
/// `Segthor` is `cc + grad + 0.5 ls`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Vxm,
    New,
    Iac,
    Segthor,
    Hkits21,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] =
        [LossVariant::Vxm, LossVariant::New, LossVariant::Iac, LossVariant::Segthor, LossVariant::Hkits21];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Vxm => "vxm",
            LossVariant::New => "new",
            LossVariant::Iac => "iac",
            LossVariant::Segthor => "segthor",
            LossVariant::Hkits21 => "hkits21",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss variant {s:?}")))
    }

    /// Effective coefficients `(cc, grad, wgrad, ls)`; zero means inactive.
    pub fn coefficients(self, w: &LossWeights) -> [f64; 4] {
        match self {
            LossVariant::Vxm => [w.cc, w.grad, 0.0, 0.0],
            LossVariant::New => [w.cc, 0.0, w.wgrad, w.ls],
            LossVariant::Iac | LossVariant::Hkits21 => [1.0, 0.0, 1.0, 0.5],
            LossVariant::Segthor => [1.0, 1.0, 0.0, 0.5],
        }
    }

    /// Active terms `(cc, grad, wgrad, ls)` regardless of weight values.
    pub fn active(self) -> [bool; 4] {
        match self {
            LossVariant::Vxm => [true, true, false, false],
            LossVariant::New | LossVariant::Iac | LossVariant::Hkits21 => [true, false, true, true],
            LossVariant::Segthor => [true, true, false, true],
        }
    }

    pub fn uses_level_set(self) -> bool {
        self.active()[3]
    }

    pub fn uses_weight_map(self) -> bool {
        self.active()[2]
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-term values and the weighted total. Inactive terms are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cc: f64,
    pub grad: f64,
    pub wgrad: f64,
    pub ls: f64,
    pub total: f64,
}

/// Raw term values; `None` means not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub cc: Option<f64>,
    pub grad: Option<f64>,
    pub wgrad: Option<f64>,
    pub ls: Option<f64>,
}

const TERM_NAMES: [&str; 4] = ["cc", "grad", "wgrad", "ls"];

pub fn combined_loss(terms: &LossTerms, weights: &LossWeights, variant: LossVariant) -> Result<LossBreakdown> {
    weights.validate()?;
    let values = [terms.cc, terms.grad, terms.wgrad, terms.ls];
    let coef = variant.coefficients(weights);
    let mut out = [0.0; 4];
    let mut total = 0.0;
    for t in 0..4 {
        if !variant.active()[t] {
            continue;
        }
        let v = values[t].ok_or(Error::MissingLossTerm { variant: variant.name().into(), term: TERM_NAMES[t].into() })?;
        out[t] = v;
        total += coef[t] * v;
    }
    Ok(LossBreakdown { cc: out[0], grad: out[1], wgrad: out[2], ls: out[3], total })
}

/// `0.5 - r/2` with `r` the Pearson correlation over all voxels.
pub fn loss_cc(warped: &Volume, atlas: &Volume) -> Result<f64> {
    warped.grid().ensure_matches(atlas.grid(), "loss_cc")?;
    let (a, b) = (warped.data(), atlas.data());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (x - ma, y - mb);
        sab += p * q;
        saa += p * p;
        sbb += q * q;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a constant image".into()));
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    Ok(0.5 - 0.5 * r)
}

/// Sum over voxels of the squared Frobenius norm of the forward-difference Jacobian,
/// with differences set to zero at the far face of each axis.
fn squared_gradient_norms(f: &DeformationField) -> Vec<f64> {
    let d = f.grid().dims;
    let n = f.grid().len();
    let strides = [1, d[0], d[0] * d[1]];
    let mut out = vec![0.0; n];
    for c in 0..3 {
        let u = f.channel(c);
        for (idx, o) in out.iter_mut().enumerate() {
            let coord = f.grid().coords(idx);
            for a in 0..3 {
                if coord[a] + 1 < d[a] {
                    let diff = u[idx + strides[a]] - u[idx];
                    *o += diff * diff;
                }
            }
        }
    }
    out
}

/// `(1/N) sum ||grad u||^2`.
pub fn loss_grad(f: &DeformationField) -> f64 {
    let s = squared_gradient_norms(f);
    s.iter().sum::<f64>() / s.len() as f64
}

/// `(1/(3N)) sum W^2 ||grad u||^2`.
pub fn loss_wgrad(f: &DeformationField, w: &WeightMap) -> Result<f64> {
    f.grid().ensure_matches(w.0.grid(), "loss_wgrad")?;
    let s = squared_gradient_norms(f);
    let total: f64 = s.iter().zip(w.0.data()).map(|(g, w)| w * w * g).sum();
    Ok(total / (3.0 * s.len() as f64))
}

/// Region statistics of the level-set term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelSetStats {
    pub mu_int: f64,
    pub mu_ext: f64,
    pub var_int: f64,
    pub var_ext: f64,
    pub loss: f64,
}

/// Population variances of `warped` inside and outside `a`, summed.
pub fn loss_ls(warped: &Volume, a: &BinaryMask) -> Result<LevelSetStats> {
    warped.grid().ensure_matches(a.grid(), "loss_ls")?;
    let fg = a.count();
    if fg == 0 || fg == a.data().len() {
        return Err(Error::Empty("level-set term needs both foreground and background voxels".into()));
    }
    let stats = |inside: bool| {
        let vals = warped.data().iter().zip(a.data()).filter(|(_, &m)| (m == 1) == inside).map(|(v, _)| *v);
        let (mut s, mut c) = (0.0, 0usize);
        for v in vals.clone() {
            s += v;
            c += 1;
        }
        let mu = s / c as f64;
        let var = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        (mu, var)
    };
    let (mu_int, var_int) = stats(true);
    let (mu_ext, var_ext) = stats(false);
    Ok(LevelSetStats { mu_int, mu_ext, var_int, var_ext, loss: var_int + var_ext })
}

/// Everything needed to score a displacement field against the atlas.
pub struct LossContext<'a> {
    /// Moving image (the case being segmented) on the atlas grid.
    pub moving: &'a Volume,
    pub atlas: &'a Volume,
    pub atlas_mask: Option<&'a BinaryMask>,
    pub weight_map: Option<&'a WeightMap>,
}

/// Standalone evaluation of every term the variant needs.
pub fn evaluate(
    ctx: &LossContext<'_>,
    field: &DeformationField,
    weights: &LossWeights,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    let warped = crate::warp::warp_volume(ctx.moving, field)?;
    let active = variant.active();
    let mut terms = LossTerms { cc: Some(loss_cc(&warped, ctx.atlas)?), ..Default::default() };
    if active[1] {
        terms.grad = Some(loss_grad(field));
    }
    if active[2] {
        let w = ctx
            .weight_map
            .ok_or(Error::MissingLossTerm { variant: variant.name().into(), term: "wgrad".into() })?;
        terms.wgrad = Some(loss_wgrad(field, w)?);
    }
    if active[3] {
        let m = ctx
            .atlas_mask
            .ok_or(Error::MissingLossTerm { variant: variant.name().into(), term: "ls".into() })?;
        terms.ls = Some(loss_ls(&warped, m)?.loss);
    }
    combined_loss(&terms, weights, variant)
}

/// Node handles for the loss terms added to a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub warped: NodeId,
    pub cc: NodeId,
    pub grad: Option<NodeId>,
    pub wgrad: Option<NodeId>,
    pub ls: Option<NodeId>,
    pub total: NodeId,
}

/// Graph-side constants for a loss: atlas intensities, mask and squared weight map.
#[derive(Debug, Clone, Copy)]
pub struct LossGraphInputs {
    /// `[1,X,Y,Z]` moving image.
    pub moving: NodeId,
    /// `[3,X,Y,Z]` displacement in voxels.
    pub disp: NodeId,
    /// `[1,X,Y,Z]` atlas image.
    pub atlas: NodeId,
    /// `[1,X,Y,Z]` atlas mask as 0/1.
    pub atlas_mask: Option<NodeId>,
    /// `[1,X,Y,Z]` squared weights `W^2`.
    pub weight_sq: Option<NodeId>,
}

pub fn cc_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let ma = g.mean(a)?;
    let ac = g.sub(a, ma)?;
    let mb = g.mean(b)?;
    let bc = g.sub(b, mb)?;
    let p = g.mul(ac, bc)?;
    let sab = g.sum(p)?;
    let a2 = g.square(ac)?;
    let saa = g.sum(a2)?;
    let b2 = g.square(bc)?;
    let sbb = g.sum(b2)?;
    let prod = g.mul(saa, sbb)?;
    let den = g.sqrt(prod)?;
    let r = g.div(sab, den)?;
    g.affine(r, -0.5, 0.5)
}

fn voxel_count(g: &Graph, u: NodeId) -> f64 {
    let s = &g.shape(u).0;
    s[1..].iter().product::<usize>() as f64
}

pub fn grad_node(g: &mut Graph, u: NodeId) -> Result<NodeId> {
    let n = voxel_count(g, u);
    let fg = g.field_gradient(u)?;
    let sq = g.square(fg)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / n)
}

pub fn wgrad_node(g: &mut Graph, u: NodeId, weight_sq: NodeId) -> Result<NodeId> {
    let n = voxel_count(g, u);
    let fg = g.field_gradient(u)?;
    let sq = g.square(fg)?;
    let w = g.mul(sq, weight_sq)?;
    let s = g.sum(w)?;
    g.scale(s, 1.0 / (3.0 * n))
}

/// Level-set term: masked population variances inside and outside the mask.
pub fn ls_node(g: &mut Graph, warped: NodeId, mask: NodeId) -> Result<NodeId> {
    let shape = g.shape(mask).clone();
    let comp: Vec<f64> = g.value(mask).iter().map(|m| 1.0 - m).collect();
    let outside = g.constant(shape, comp)?;
    let mut var = |m: NodeId| -> Result<NodeId> {
        let mu = g.masked_mean(warped, m)?;
        let c = g.sub(warped, mu)?;
        let sq = g.square(c)?;
        g.masked_mean(sq, m)
    };
    let vi = var(mask)?;
    let ve = var(outside)?;
    g.add(vi, ve)
}

/// Adds `warped = moving o (id + u)` and all active terms; `total` is the weighted sum.
///
/// The mask node must already hold its final values: its complement is captured here.
pub fn build_loss(
    g: &mut Graph,
    inputs: &LossGraphInputs,
    weights: &LossWeights,
    variant: LossVariant,
) -> Result<LossNodes> {
    weights.validate()?;
    let missing = |term: &'static str| Error::MissingLossTerm { variant: variant.name().into(), term: term.into() };
    let coef = variant.coefficients(weights);
    let active = variant.active();
    let warped = g.grid_sample(inputs.moving, inputs.disp)?;
    let cc = cc_node(g, warped, inputs.atlas)?;
    let mut total = g.scale(cc, coef[0])?;
    let grad = if active[1] {
        let t = grad_node(g, inputs.disp)?;
        let s = g.scale(t, coef[1])?;
        total = g.add(total, s)?;
        Some(t)
    } else {
        None
    };
    let wgrad = if active[2] {
        let w = inputs.weight_sq.ok_or_else(|| missing("wgrad"))?;
        let t = wgrad_node(g, inputs.disp, w)?;
        let s = g.scale(t, coef[2])?;
        total = g.add(total, s)?;
        Some(t)
    } else {
        None
    };
    let ls = if active[3] {
        let m = inputs.atlas_mask.ok_or_else(|| missing("ls"))?;
        let t = ls_node(g, warped, m)?;
        let s = g.scale(t, coef[3])?;
        total = g.add(total, s)?;
        Some(t)
    } else {
        None
    };
    Ok(LossNodes { warped, cc, grad, wgrad, ls, total })
}

/// Reads the breakdown out of an evaluated graph.
pub fn read_breakdown(g: &Graph, nodes: &LossNodes) -> LossBreakdown {
    let get = |n: Option<NodeId>| n.map(|n| g.scalar(n)).unwrap_or(0.0);
    LossBreakdown {
        cc: g.scalar(nodes.cc),
        grad: get(nodes.grad),
        wgrad: get(nodes.wgrad),
        ls: get(nodes.ls),
        total: g.scalar(nodes.total),
    }
}

/// Constant graph nodes for an atlas, its mask and weight map (`W^2` is stored).
pub fn atlas_constants(
    g: &mut Graph,
    atlas: &Volume,
    mask: Option<&BinaryMask>,
    weights: Option<&WeightMap>,
) -> Result<(NodeId, Option<NodeId>, Option<NodeId>)> {
    let d = atlas.dims();
    let a = g.constant(Shape::volume(1, d), atlas.data().to_vec())?;
    let m = match mask {
        Some(m) => {
            atlas.grid().ensure_matches(m.grid(), "atlas mask")?;
            Some(g.constant(Shape::volume(1, d), m.data().iter().map(|&v| v as f64).collect())?)
        }
        None => None,
    };
    let w = match weights {
        Some(w) => {
            atlas.grid().ensure_matches(w.0.grid(), "weight map")?;
            Some(g.constant(Shape::volume(1, d), w.0.data().iter().map(|v| v * v).collect())?)
        }
        None => None,
    };
    Ok((a, m, w))
}

fn smooth_volume(grid: Grid, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.3..1.2));
    Volume::from_fn(grid, |i, j, k| {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        (c[0] * x).sin() + (c[1] * y).cos() * (c[2] * z).sin() + 0.1 * c[3] * x * y - c[4] * (c[5] * z).cos()
    })
}

fn random_mask(grid: Grid, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = BinaryMask::from_fn(grid, |_, _, _| rng.random_bool(0.4));
    // both regions non-empty
    m.set(0, 0, 0, true);
    m.set(1, 0, 0, false);
    m
}

/// Finite-difference check of every loss term and every combined variant with respect to
/// a random 6x6x6 displacement field. Terms are named `term.<name>`, variants `variant.<name>`.
pub fn gradcheck_suite(seed: u64, h: f64, tolerance: f64) -> Result<Vec<GradCheckResult>> {
    let grid = Grid::unit([6, 6, 6]);
    let moving = smooth_volume(grid, seed);
    let atlas = smooth_volume(grid, seed.wrapping_add(100));
    let mask = random_mask(grid, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wmap = WeightMap(Volume::from_fn(grid, |_, _, _| rng.random_range(0.5..1.0)));
    let disp = displacement_off_faces(&mut rng, [6, 6, 6], 1.2, 0.02);
    let mut out = Vec::new();
    let mut run = |name: String, variant: LossVariant, pick: &dyn Fn(&LossNodes) -> Option<NodeId>| -> Result<()> {
        let mut g = Graph::new();
        let (a, m, w) = atlas_constants(&mut g, &atlas, Some(&mask), Some(&wmap))?;
        let mv = g.constant(Shape::volume(1, grid.dims), moving.data().to_vec())?;
        let u = g.input(Shape::volume(3, grid.dims), true);
        let inputs = LossGraphInputs { moving: mv, disp: u, atlas: a, atlas_mask: m, weight_sq: w };
        let nodes = build_loss(&mut g, &inputs, &LossWeights::default(), variant)?;
        let target = pick(&nodes).expect("term is active in the chosen variant");
        g.set_input(u, &disp)?;
        let (rel, abs, checked) = check_graph(&mut g, &mut ParamStore::new(), target, &[Wrt::Input(u)], h)?;
        out.push(GradCheckResult {
            name,
            max_rel_error: rel,
            max_abs_error: abs,
            checked,
            tolerance,
            passed: rel <= tolerance,
        });
        Ok(())
    };
    run("term.cc".into(), LossVariant::New, &|n| Some(n.cc))?;
    run("term.grad".into(), LossVariant::Vxm, &|n| n.grad)?;
    run("term.wgrad".into(), LossVariant::New, &|n| n.wgrad)?;
    run("term.ls".into(), LossVariant::New, &|n| n.ls)?;
    for v in LossVariant::ALL {
        run(format!("variant.{}", v.name()), v, &|n| Some(n.total))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::random_smooth_field;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(grid: Grid, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(grid, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cc_examples() {
        let g = Grid::unit([4, 4, 4]);
        let a = random_volume(g, 1);
        assert!(loss_cc(&a, &a).unwrap().abs() < 1e-15);
        let neg = a.map(|v| 3.0 - v);
        assert!((loss_cc(&neg, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(loss_cc(&Volume::filled(g, 2.0), &a).is_err());
    }

    #[test]
    fn cc_matches_textbook_pearson() {
        let g = Grid::unit([4, 4, 4]);
        let (a, b) = (random_volume(g, 2), random_volume(g, 3));
        let n = 64.0;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((loss_cc(&a, &b).unwrap() - (0.5 - r / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_examples() {
        let g = Grid::unit([5, 4, 3]);
        assert_eq!(loss_grad(&DeformationField::zeros(g)), 0.0);
        let c = 0.7;
        let f = DeformationField::from_fn(g, |i, _, _| [c * i as f64, 0.0, 0.0]);
        // only x has nonzero differences, and only where i < nx - 1
        assert!((loss_grad(&f) - 4.0 / 5.0 * c * c).abs() < 1e-14);
    }

    #[test]
    fn grad_matches_brute_force() {
        let g = Grid::unit([5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DeformationField::from_fn(g, |_, _, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let mut total = 0.0;
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let u = f.at(i, j, k);
                    let nb = [(i + 1 < 5).then(|| f.at(i + 1, j, k)), (j + 1 < 5).then(|| f.at(i, j + 1, k)), (k + 1 < 5).then(|| f.at(i, j, k + 1))];
                    for v in nb.into_iter().flatten() {
                        for c in 0..3 {
                            total += (v[c] - u[c]).powi(2);
                        }
                    }
                }
            }
        }
        assert!((loss_grad(&f) - total / 125.0).abs() < 1e-12);
    }

    #[test]
    fn wgrad_examples() {
        let g = Grid::unit([5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = DeformationField::from_fn(g, |_, _, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let ones = WeightMap::uniform(g, 1.0);
        assert!((loss_wgrad(&f, &ones).unwrap() - loss_grad(&f) / 3.0).abs() < 1e-14);
        assert_eq!(loss_wgrad(&DeformationField::zeros(g), &ones).unwrap(), 0.0);
        let w = WeightMap(Volume::from_fn(g, |_, _, _| rng.random_range(0.5..1.0)));
        let mut total = 0.0;
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let u = f.at(i, j, k);
                    let wi = w.0.at(i, j, k);
                    let nb = [(i + 1 < 5).then(|| f.at(i + 1, j, k)), (j + 1 < 5).then(|| f.at(i, j + 1, k)), (k + 1 < 5).then(|| f.at(i, j, k + 1))];
                    for v in nb.into_iter().flatten() {
                        for c in 0..3 {
                            total += (wi * (v[c] - u[c])).powi(2);
                        }
                    }
                }
            }
        }
        assert!((loss_wgrad(&f, &w).unwrap() - total / 375.0).abs() < 1e-12);
        assert!(loss_wgrad(&f, &WeightMap::uniform(Grid::unit([5, 5, 4]), 1.0)).is_err());
    }

    #[test]
    fn ls_examples() {
        let g = Grid::unit([4, 1, 1]);
        let m = BinaryMask::new(g, vec![1, 1, 0, 0]).unwrap();
        let w = Volume::new(g, vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        let s = loss_ls(&w, &m).unwrap();
        assert!((s.mu_int - 0.85).abs() < 1e-15);
        assert!((s.mu_ext - 0.15).abs() < 1e-15);
        assert!((s.var_int - 0.0025).abs() < 1e-15);
        assert!((s.var_ext - 0.0025).abs() < 1e-15);
        assert!((s.loss - 0.005).abs() < 1e-15);
        let c = loss_ls(&Volume::filled(g, 0.3), &m).unwrap();
        assert_eq!((c.mu_int, c.mu_ext, c.loss), (0.3, 0.3, 0.0));
        let same = loss_ls(&m.to_volume(), &m).unwrap();
        assert_eq!((same.mu_int, same.mu_ext, same.loss), (1.0, 0.0, 0.0));
        assert!(loss_ls(&w, &BinaryMask::empty(g)).is_err());
        assert!(loss_ls(&w, &BinaryMask::new(g, vec![1; 4]).unwrap()).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::default();
        let zero = LossTerms { cc: Some(0.0), grad: Some(0.0), wgrad: Some(0.0), ls: Some(0.0) };
        for v in LossVariant::ALL {
            assert_eq!(combined_loss(&zero, &w, v).unwrap().total, 0.0);
        }
        let t = LossTerms { cc: Some(0.2), wgrad: Some(0.1), ls: Some(0.4), ..Default::default() };
        assert!((combined_loss(&t, &w, LossVariant::New).unwrap().total - 0.5).abs() < 1e-15);
        let t = LossTerms { cc: Some(0.3), grad: Some(0.2), ..Default::default() };
        assert!((combined_loss(&t, &w, LossVariant::Vxm).unwrap().total - 0.5).abs() < 1e-15);
        let t = LossTerms { cc: Some(0.3), wgrad: Some(0.2), ls: Some(0.1), ..Default::default() };
        assert!(matches!(combined_loss(&t, &w, LossVariant::Segthor), Err(Error::MissingLossTerm { .. })));
        let bad = LossWeights { cc: -1.0, ..w };
        assert!(combined_loss(&zero, &bad, LossVariant::Vxm).is_err());
        let none = LossWeights { cc: 0.0, grad: 0.0, wgrad: 0.0, ls: 0.0 };
        assert!(none.validate().is_err());
    }

    #[test]
    fn dataset_presets_use_fixed_coefficients() {
        let w = LossWeights { cc: 3.0, grad: 7.0, wgrad: 5.0, ls: 9.0 };
        let t = LossTerms { cc: Some(0.2), grad: Some(0.3), wgrad: Some(0.1), ls: Some(0.4) };
        for v in [LossVariant::Iac, LossVariant::Hkits21] {
            assert!((combined_loss(&t, &w, v).unwrap().total - 0.5).abs() < 1e-15);
        }
        assert!((combined_loss(&t, &w, LossVariant::Segthor).unwrap().total - 0.7).abs() < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(LossVariant::parse(v.name()).unwrap(), v);
            let js = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<LossVariant>(&js).unwrap(), v);
        }
        assert!(LossVariant::parse("dice").is_err());
    }

    fn loss_graph(
        moving: &Volume,
        atlas: &Volume,
        mask: &BinaryMask,
        wmap: &WeightMap,
        variant: LossVariant,
    ) -> (Graph, LossNodes, NodeId) {
        let d = atlas.dims();
        let mut g = Graph::new();
        let (a, m, w) = atlas_constants(&mut g, atlas, Some(mask), Some(wmap)).unwrap();
        let mv = g.constant(Shape::volume(1, d), moving.data().to_vec()).unwrap();
        let u = g.input(Shape::volume(3, d), true);
        let inputs = LossGraphInputs { moving: mv, disp: u, atlas: a, atlas_mask: m, weight_sq: w };
        let nodes = build_loss(&mut g, &inputs, &LossWeights::default(), variant).unwrap();
        (g, nodes, u)
    }

    fn fixture(seed: u64) -> (Volume, Volume, BinaryMask, WeightMap, DeformationField) {
        let grid = Grid::unit([6, 6, 6]);
        let moving = smooth_volume(grid, seed);
        let atlas = smooth_volume(grid, seed + 100);
        let mask = random_mask(grid, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wmap = WeightMap(Volume::from_fn(grid, |_, _, _| rng.random_range(0.5..1.0)));
        let disp = displacement_off_faces(&mut rng, [6, 6, 6], 1.2, 0.02);
        let f = DeformationField::from_channels(grid, disp).unwrap();
        (moving, atlas, mask, wmap, f)
    }

    #[test]
    fn graph_terms_match_standalone() {
        for seed in 0..3 {
            let (moving, atlas, mask, wmap, f) = fixture(seed);
            let ctx = LossContext { moving: &moving, atlas: &atlas, atlas_mask: Some(&mask), weight_map: Some(&wmap) };
            for v in LossVariant::ALL {
                let (mut g, nodes, u) = loss_graph(&moving, &atlas, &mask, &wmap, v);
                g.set_input(u, f.data()).unwrap();
                g.forward(&ParamStore::new()).unwrap();
                let got = read_breakdown(&g, &nodes);
                let want = evaluate(&ctx, &f, &LossWeights::default(), v).unwrap();
                for (a, b) in [(got.cc, want.cc), (got.grad, want.grad), (got.wgrad, want.wgrad), (got.ls, want.ls), (got.total, want.total)] {
                    assert!((a - b).abs() < 1e-10, "{v}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        for seed in [7, 8] {
            let results = gradcheck_suite(seed, 1e-4, 1e-4).unwrap();
            assert_eq!(results.len(), 4 + LossVariant::ALL.len());
            for r in results {
                assert!(r.passed, "{} seed {seed}: rel error {:.3e}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn perfect_alignment_is_global_cc_minimum() {
        let grid = Grid::unit([10, 10, 10]);
        // profile symmetric about x = 8.5, so the clamped sample at the far face is still exact
        let f = |x: f64, y: f64, z: f64| -(x - 8.5).powi(2) / 20.0 * (1.0 + 0.1 * y) + (0.7 * z).cos() + 0.3 * y;
        let atlas = Volume::from_fn(grid, |i, j, k| f(i as f64, j as f64, k as f64));
        let moving = Volume::from_fn(grid, |i, j, k| f(i as f64 - 1.0, j as f64, k as f64));
        let shift = DeformationField::from_fn(grid, |_, _, _| [1.0, 0.0, 0.0]);
        let warped = crate::warp::warp_volume(&moving, &shift).unwrap();
        let best = loss_cc(&warped, &atlas).unwrap();
        assert!(best.abs() < 1e-12);
        for seed in 0..10 {
            let f = random_smooth_field(grid, 4, 1.0, seed).unwrap();
            let w = crate::warp::warp_volume(&moving, &f).unwrap();
            assert!(loss_cc(&w, &atlas).unwrap() >= best);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cc_invariant_to_positive_affine(seed in 0u64..1000, s in 0.1f64..10.0, t in -5.0f64..5.0, which in 0usize..2) {
            let g = Grid::unit([4, 3, 5]);
            let (a, b) = (random_volume(g, seed), random_volume(g, seed + 1));
            let base = loss_cc(&a, &b).unwrap();
            let moved = if which == 0 { loss_cc(&a.map(|v| s * v + t), &b) } else { loss_cc(&a, &b.map(|v| s * v + t)) };
            prop_assert!((moved.unwrap() - base).abs() <= 1e-10);
        }

        #[test]
        fn ls_shift_invariant_and_scales_quadratically(seed in 0u64..1000, s in -4.0f64..4.0, t in -5.0f64..5.0) {
            let g = Grid::unit([4, 3, 5]);
            let a = random_volume(g, seed);
            let m = random_mask(g, seed);
            let base = loss_ls(&a, &m).unwrap().loss;
            let shifted = loss_ls(&a.map(|v| v + t), &m).unwrap().loss;
            prop_assert!((shifted - base).abs() <= 1e-10 * (1.0 + base));
            let scaled = loss_ls(&a.map(|v| s * v), &m).unwrap().loss;
            prop_assert!((scaled - s * s * base).abs() <= 1e-10 * (1.0 + s * s * base));
        }

        #[test]
        fn breakdown_total_is_weighted_sum(cc in 0.0f64..1.0, gr in 0.0f64..2.0, wg in 0.0f64..2.0, ls in 0.0f64..2.0,
                                           w in proptest::array::uniform4(0.0f64..3.0), vi in 0usize..5) {
            let weights = LossWeights { cc: w[0] + 0.01, grad: w[1], wgrad: w[2], ls: w[3] };
            let v = LossVariant::ALL[vi];
            let b = combined_loss(&LossTerms { cc: Some(cc), grad: Some(gr), wgrad: Some(wg), ls: Some(ls) }, &weights, v).unwrap();
            let c = v.coefficients(&weights);
            let expect = c[0] * b.cc + c[1] * b.grad + c[2] * b.wgrad + c[3] * b.ls;
            prop_assert!((b.total - expect).abs() <= 1e-12);
        }
    }
}

//! Network training, direct per-voxel field optimization, multi-seed trials and model
//! selection.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::AtlasBundle;
use crate::autodiff::{Graph, NodeId, ParamStore, Shape};
use crate::dataio::{augment_case, AugmentConfig, LoadedCase, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::evalstats::{dice, hd95_with, median, Hd95Options, MetricsRecord};
use crate::losses::{atlas_constants, build_loss, read_breakdown, LossBreakdown, LossGraphInputs, LossNodes, LossVariant, LossWeights};
use crate::network::{build_unet, init_params, Checkpoint, TrainingMeta, UNet, UNetConfig};
use crate::volume::{BinaryMask, Volume};
use crate::warp::{marching_cubes_surface, project_surface, rasterize_projected_mask_with, DeformationField, InversionOptions, SurfaceMesh};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// `lr = 0` is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// One Adam update of `values` in place; `step` is the 1-based step count.
pub fn adam_update(values: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Advances `store.step` and updates every block from its accumulated gradient.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step += 1;
    let step = store.step;
    for b in store.blocks_mut() {
        adam_update(&mut b.value, &b.grad, &mut b.m, &mut b.v, step, cfg);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    MinValLoss,
    MaxValDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub t_lower_mm: f64,
    pub t_upper_mm: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub selection: SelectionRule,
    pub network: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: LossVariant::New,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            epochs: 100,
            batch_size: 1,
            seeds: vec![0, 1, 2, 3, 4],
            t_lower_mm: 1.0,
            t_upper_mm: 4.0,
            augment: false,
            augmentation: AugmentConfig::default(),
            selection: SelectionRule::MinValLoss,
            network: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if !(self.t_lower_mm >= 0.0 && self.t_upper_mm > self.t_lower_mm) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= t_lower_mm < t_upper_mm, got {} and {}",
                self.t_lower_mm, self.t_upper_mm
            )));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.network.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's training steps.
    pub train: LossBreakdown,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the selected parameters.
    pub selected_epoch: usize,
    pub selected: Checkpoint,
    /// Parameters and optimizer state after the last epoch.
    pub last: Checkpoint,
}

impl TrialResult {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.train.total).collect()
    }
}

/// Epoch (1-based) chosen by `rule`; ties go to the earliest epoch. Epochs without the
/// needed metric are skipped; with none available the last epoch is returned.
pub fn select_model(history: &[EpochRecord], rule: SelectionRule) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for e in history {
        let score = match rule {
            SelectionRule::MinValLoss => e.val_loss,
            SelectionRule::MaxValDice => e.val_dice.map(|d| -d),
        };
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((e.epoch, s));
            }
        }
    }
    best.map(|(e, _)| e).unwrap_or_else(|| history.last().map_or(1, |e| e.epoch))
}

/// Graph with the U-Net applied to the target and the loss against the atlas.
struct TrainGraph {
    graph: Graph,
    net: UNet,
    loss: LossNodes,
}

impl TrainGraph {
    fn new(cfg: &TrainConfig, atlas: &AtlasBundle, store: &ParamStore) -> Result<Self> {
        let mut graph = Graph::new();
        let net = build_unet(&mut graph, &cfg.network, store)?;
        let (a, m, w) = atlas_constants(
            &mut graph,
            &atlas.image,
            cfg.variant.uses_level_set().then_some(&atlas.mask),
            cfg.variant.uses_weight_map().then_some(&atlas.weights),
        )?;
        let inputs = LossGraphInputs { moving: net.input, disp: net.output, atlas: a, atlas_mask: m, weight_sq: w };
        let loss = build_loss(&mut graph, &inputs, &cfg.weights, cfg.variant)?;
        Ok(TrainGraph { graph, net, loss })
    }

    fn forward(&mut self, image: &Volume, store: &ParamStore) -> Result<LossBreakdown> {
        self.graph.set_input(self.net.input, image.data())?;
        self.graph.forward(store)?;
        Ok(read_breakdown(&self.graph, &self.loss))
    }

    fn field(&self) -> Result<DeformationField> {
        let grid = crate::volume::Grid::unit(self.graph.shape(self.net.output).0[1..].try_into().expect("volume shape"));
        DeformationField::from_channels(grid, self.graph.value(self.net.output).to_vec())
    }
}

fn check_finite(b: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    if [b.cc, b.grad, b.wgrad, b.ls, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { epoch, step, detail: format!("loss terms {b:?}") })
    }
}

/// Inversion settings used for evaluation: never fails, reports whatever it reached.
fn eval_inversion() -> InversionOptions {
    InversionOptions { max_residual: f64::INFINITY, ..InversionOptions::default() }
}

/// Projects the atlas segmentation into target space through `field`.
pub fn project_atlas(atlas: &AtlasBundle, field: &DeformationField) -> Result<(BinaryMask, SurfaceMesh)> {
    let mut f = field.clone();
    // fields produced on a unit grid are re-labelled with the atlas spacing
    if f.grid().spacing != atlas.image.grid().spacing {
        f = DeformationField::from_channels(*atlas.image.grid(), field.data().to_vec())?;
    }
    let mask = rasterize_projected_mask_with(&atlas.mask, &f, &eval_inversion())?;
    let surface = project_surface(&atlas.surface, &f);
    Ok((mask, surface))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub case_id: String,
    pub dice: f64,
    pub hd95_mm: f64,
}

/// Dice and HD95 of the projected atlas segmentation against the case's ground truth.
pub fn evaluate_field(atlas: &AtlasBundle, field: &DeformationField, case: &LoadedCase) -> Result<CaseEval> {
    let gt = case
        .gt_mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("case {} has no ground truth", case.id)))?;
    let (mask, surface) = project_atlas(atlas, field)?;
    let d = dice(&mask, gt, case.exclusion.as_ref())?;
    let gt_surface = marching_cubes_surface(gt)?;
    let spacing = atlas.image.spacing();
    let opts = Hd95Options { sample_spacing_mm: 0.5 * spacing[0].min(spacing[1]).min(spacing[2]), ..Default::default() };
    let h = hd95_with(&surface, &gt_surface, case.exclusion.as_ref(), &opts)?;
    Ok(CaseEval { case_id: case.id.clone(), dice: d, hd95_mm: h })
}

/// Inference wrapper around a U-Net and its parameters.
pub struct Segmenter {
    graph: Graph,
    net: UNet,
    store: ParamStore,
}

impl Segmenter {
    pub fn new(cfg: &UNetConfig, store: ParamStore) -> Result<Self> {
        let mut graph = Graph::new();
        let net = build_unet(&mut graph, cfg, &store)?;
        Ok(Segmenter { graph, net, store })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.ensure_compatible(&ck.config)?;
        Segmenter::new(&ck.config, ck.params.clone())
    }

    pub fn predict(&mut self, image: &Volume) -> Result<DeformationField> {
        self.graph.set_input(self.net.input, image.data())?;
        self.graph.forward(&self.store)?;
        let data = self.graph.value(self.net.output).to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { epoch: 0, step: 0, detail: "network produced a non-finite field".into() });
        }
        DeformationField::from_channels(*image.grid(), data)
    }
}

/// Training cases, with augmented copies appended when enabled.
fn training_images(dataset: &LoadedDataset, cfg: &TrainConfig) -> Result<Vec<Volume>> {
    let mut images = Vec::new();
    let mut stream = 0u64;
    for c in dataset.split(Split::Train) {
        images.push(c.image.clone());
        if cfg.augment {
            for (img, _) in augment_case(&c.image, None, &cfg.augmentation, stream)? {
                images.push(img);
            }
        }
        stream += 1;
    }
    if images.is_empty() {
        return Err(Error::Empty("dataset has no training cases".into()));
    }
    Ok(images)
}

/// Trains one network from `seed`. `on_epoch` sees every epoch record as it is produced.
pub fn train(
    dataset: &LoadedDataset,
    atlas: &AtlasBundle,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrialResult> {
    cfg.validate()?;
    let dims = atlas.image.dims();
    if cfg.network.dims != dims {
        return Err(Error::GridMismatch(format!(
            "network dims {:?} differ from the atlas grid {dims:?}",
            cfg.network.dims
        )));
    }
    let images = training_images(dataset, cfg)?;
    let val: Vec<&LoadedCase> = dataset.split(Split::Val).collect();
    let val_has_gt = !val.is_empty() && val.iter().all(|c| c.gt_mask.is_some());

    let mut store = init_params(&cfg.network, seed)?;
    let mut tg = TrainGraph::new(cfg, atlas, &store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..images.len()).collect();

    let meta = |epoch| TrainingMeta { seed, epoch, variant: Some(cfg.variant) };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_params = store.clone();
    let mut best_score: Option<f64> = None;
    let mut best_epoch = 1;
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                global_step += 1;
                let b = tg.forward(&images[i], &store)?;
                check_finite(&b, epoch, global_step)?;
                tg.graph.backward(tg.loss.total, &mut store)?;
                sum.cc += b.cc;
                sum.grad += b.grad;
                sum.wgrad += b.wgrad;
                sum.ls += b.ls;
                sum.total += b.total;
            }
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f64;
                store.blocks_mut().iter_mut().for_each(|b| b.grad.iter_mut().for_each(|g| *g *= s));
            }
            adam_step(&mut store, &cfg.optimizer);
        }
        let n = images.len() as f64;
        let train = LossBreakdown { cc: sum.cc / n, grad: sum.grad / n, wgrad: sum.wgrad / n, ls: sum.ls / n, total: sum.total / n };

        let (mut val_loss, mut val_dice) = (None, None);
        if !val.is_empty() {
            let (mut l, mut d) = (0.0, 0.0);
            for c in &val {
                let b = tg.forward(&c.image, &store)?;
                check_finite(&b, epoch, global_step)?;
                l += b.total;
                if val_has_gt {
                    d += evaluate_dice_only(atlas, &tg.field()?, c)?;
                }
            }
            val_loss = Some(l / val.len() as f64);
            if val_has_gt {
                val_dice = Some(d / val.len() as f64);
            }
        }
        let record = EpochRecord { epoch, train, val_loss, val_dice, wall_time_s: start.elapsed().as_secs_f64() };
        on_epoch(&record);
        let score = match cfg.selection {
            SelectionRule::MinValLoss => val_loss,
            SelectionRule::MaxValDice => val_dice.map(|d| -d),
        };
        if let Some(s) = score {
            if best_score.is_none_or(|b| s < b) {
                best_score = Some(s);
                best_epoch = epoch;
                best_params = store.clone();
            }
        }
        history.push(record);
    }
    if best_score.is_none() {
        best_epoch = cfg.epochs;
        best_params = store.clone();
    }
    debug_assert_eq!(best_epoch, select_model(&history, cfg.selection));
    let mut selected_params = best_params;
    selected_params.reset_moments();
    Ok(TrialResult {
        seed,
        history,
        selected_epoch: best_epoch,
        selected: Checkpoint { config: cfg.network.clone(), meta: meta(best_epoch), params: selected_params, with_optimizer: false },
        last: Checkpoint { config: cfg.network.clone(), meta: meta(cfg.epochs), params: store, with_optimizer: true },
    })
}

fn evaluate_dice_only(atlas: &AtlasBundle, field: &DeformationField, case: &LoadedCase) -> Result<f64> {
    let gt = case.gt_mask.as_ref().expect("checked by caller");
    let f = DeformationField::from_channels(*atlas.image.grid(), field.data().to_vec())?;
    let mask = rasterize_projected_mask_with(&atlas.mask, &f, &eval_inversion())?;
    dice(&mask, gt, case.exclusion.as_ref())
}

/// Evaluates a trained model on every case of `split` that has ground truth.
pub fn evaluate_split(
    ck: &Checkpoint,
    dataset: &LoadedDataset,
    atlas: &AtlasBundle,
    split: Split,
) -> Result<Vec<CaseEval>> {
    let mut seg = Segmenter::from_checkpoint(ck)?;
    dataset
        .split(split)
        .filter(|c| c.gt_mask.is_some())
        .map(|c| {
            let f = seg.predict(&c.image)?;
            evaluate_field(atlas, &f, c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialsOutcome {
    pub trials: Vec<TrialResult>,
    /// Seeds whose trial aborted, with the error text.
    pub failures: Vec<(u64, String)>,
    /// Test-split metrics of each completed trial's selected model.
    pub test_records: Vec<MetricsRecord>,
    pub median_test_dice: f64,
    pub median_test_hd95_mm: f64,
}

/// Median over trials of the per-trial median over cases.
pub fn median_of_trials(per_trial: &[Vec<f64>]) -> f64 {
    let medians: Vec<f64> = per_trial.iter().map(|v| median(v)).collect();
    median(&medians)
}

/// Runs `train` for every configured seed on up to `workers` threads, evaluates each
/// selected model on the test split and aggregates. Aborted trials are reported in
/// `failures`; aggregation uses the completed ones.
pub fn run_trials(
    dataset: &LoadedDataset,
    atlas: &AtlasBundle,
    cfg: &TrainConfig,
    workers: usize,
    on_epoch: &(dyn Fn(u64, &EpochRecord) + Sync),
) -> Result<TrialsOutcome> {
    cfg.validate()?;
    let seeds = &cfg.seeds;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(TrialResult, Vec<CaseEval>)>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= seeds.len() {
            break;
        }
        let seed = seeds[i];
        let r = train(dataset, atlas, cfg, seed, &mut |e| on_epoch(seed, e))
            .and_then(|t| evaluate_split(&t.selected, dataset, atlas, Split::Test).map(|ev| (t, ev)));
        slots.lock().expect("trial slot lock")[i] = Some(r);
    };
    let workers = workers.clamp(1, seeds.len());
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    let mut test_records = Vec::new();
    let mut dice_per_trial = Vec::new();
    let mut hd_per_trial = Vec::new();
    for (seed, slot) in seeds.iter().zip(slots.into_inner().expect("trial slot lock")) {
        match slot.expect("every seed is processed") {
            Ok((t, evals)) => {
                dice_per_trial.push(evals.iter().map(|e| e.dice).collect::<Vec<_>>());
                hd_per_trial.push(evals.iter().map(|e| e.hd95_mm).collect::<Vec<_>>());
                test_records.extend(evals.into_iter().map(|e| MetricsRecord {
                    case_id: e.case_id,
                    seed: *seed,
                    method: cfg.variant.name().to_string(),
                    dice: e.dice,
                    hd95_mm: e.hd95_mm,
                }));
                trials.push(t);
            }
            Err(e) => failures.push((*seed, e.to_string())),
        }
    }
    if trials.is_empty() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: 0,
            detail: format!("all {} trials aborted: {failures:?}", seeds.len()),
        });
    }
    if !failures.is_empty() {
        log::warn!("{} of {} trials aborted; aggregating the rest", failures.len(), seeds.len());
    }
    Ok(TrialsOutcome {
        trials,
        failures,
        test_records,
        median_test_dice: median_of_trials(&dice_per_trial),
        median_test_hd95_mm: median_of_trials(&hd_per_trial),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectConfig {
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub iterations: usize,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig {
            variant: LossVariant::New,
            weights: LossWeights::default(),
            optimizer: AdamConfig { lr: 0.1, ..AdamConfig::default() },
            iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectResult {
    /// Field at the lowest loss seen.
    pub field: DeformationField,
    pub best: LossBreakdown,
    /// 0-based iteration of `best`; 0 is the zero field.
    pub best_iteration: usize,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

/// Minimizes the training objective over a raw displacement array with Adam.
pub fn optimize_field_direct(target: &Volume, atlas: &AtlasBundle, cfg: &DirectConfig) -> Result<DirectResult> {
    cfg.weights.validate()?;
    cfg.optimizer.validate()?;
    target.grid().ensure_matches(atlas.image.grid(), "direct optimization target")?;
    let d = target.dims();
    let mut g = Graph::new();
    let moving = g.constant(Shape::volume(1, d), target.data().to_vec())?;
    let disp: NodeId = g.input(Shape::volume(3, d), true);
    let (a, m, w) = atlas_constants(
        &mut g,
        &atlas.image,
        cfg.variant.uses_level_set().then_some(&atlas.mask),
        cfg.variant.uses_weight_map().then_some(&atlas.weights),
    )?;
    let nodes = build_loss(&mut g, &LossGraphInputs { moving, disp, atlas: a, atlas_mask: m, weight_sq: w }, &cfg.weights, cfg.variant)?;
    let n = 3 * target.grid().len();
    let mut u = vec![0.0; n];
    let (mut mom, mut vel) = (vec![0.0; n], vec![0.0; n]);
    let mut store = ParamStore::new();
    let mut best: Option<(LossBreakdown, usize, Vec<f64>)> = None;
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        g.set_input(disp, &u)?;
        g.forward(&store)?;
        let b = read_breakdown(&g, &nodes);
        check_finite(&b, 0, it)?;
        losses.push(b.total);
        if best.as_ref().is_none_or(|(bb, _, _)| b.total < bb.total) {
            best = Some((b, it, u.clone()));
        }
        if it == cfg.iterations {
            break;
        }
        g.backward(nodes.total, &mut store)?;
        let grad = g.grad(disp).to_vec();
        adam_update(&mut u, &grad, &mut mom, &mut vel, it as u64 + 1, &cfg.optimizer);
    }
    let (best, best_iteration, u) = best.expect("at least one evaluation");
    Ok(DirectResult { field: DeformationField::from_channels(*target.grid(), u)?, best, best_iteration, losses })
}

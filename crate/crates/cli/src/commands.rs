use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use atlasseg_core::atlas::AtlasBundle;
use atlasseg_core::autodiff::gradcheck::{op_names, op_suite, GradCheckResult};
use atlasseg_core::dataio::{
    generate_synthetic, load_dataset, load_image, load_label, load_manifest, preprocess_dataset, save_field, save_mask,
    write_synthetic,
};
use atlasseg_core::evalstats::{
    compare, dice, hd95_with, per_case_medians, read_records_csv, summarize, write_records_csv, write_report, Hd95Options,
    Metric, MetricsRecord,
};
use atlasseg_core::losses::{self, LossVariant};
use atlasseg_core::network::load_checkpoint;
use atlasseg_core::trainer::{optimize_field_direct, project_atlas, run_trials, Segmenter};
use atlasseg_core::warp::marching_cubes_surface;
use atlasseg_core::{Error, ErrorKind, SurfaceMesh};
use serde_json::json;

use crate::config::{key_listing, RunConfig};
use crate::{usage, Command, ConfigArgs};

/// A failure reported with an exit code class.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn effective_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::load(args.config.as_deref())?.with_overrides(&args.sets)?;
    if let Some(s) = args.seed {
        rc.synth.seed = s;
        rc.train.augmentation.seed = s;
        let n = rc.train.seeds.len() as u64;
        rc.train.seeds = (0..n).map(|i| s.wrapping_add(i)).collect();
    }
    Ok(rc)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

pub fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth { cfg, out } => synth(&cfg, &out),
        Command::Preprocess { cfg, manifest, out } => {
            let rc = effective_config(&cfg)?;
            let m = load_manifest(&manifest)?;
            let pre = preprocess_dataset(&m, rc.crop, &out)?;
            print_json(&json!({ "manifest": out.join("manifest.json"), "cases": pre.cases.len(), "normalization": pre.normalization }));
            Ok(())
        }
        Command::Train { cfg, manifest, out, workers, variant, epochs, trials } => {
            train(&cfg, &manifest, &out, workers, variant, epochs, trials)
        }
        Command::Segment { cfg, checkpoint, image, atlas, out, direct } => {
            segment(&cfg, checkpoint.as_deref(), &image, &atlas, &out, direct)
        }
        Command::Eval { cfg, pred, gt, exclusion, out, method, trial_seed } => {
            eval(&cfg, &pred, &gt, exclusion.as_deref(), &out, &method, trial_seed)
        }
        Command::Ttest { a, b, metric } => ttest(&a, &b, &metric),
        Command::Gradcheck { op, all: _, list, seed, step, tolerance } => gradcheck(op.as_deref(), list, seed, step, tolerance),
        Command::Report { records, out, pairs } => report(&records, &out, &pairs),
        Command::Config { dump_defaults, keys, cfg } => {
            if dump_defaults {
                print!("{}", RunConfig::default().to_json());
            } else if keys {
                println!("{}", key_listing());
            } else {
                let rc = effective_config(&cfg)?;
                rc.validate()?;
                print!("{}", rc.to_json());
            }
            Ok(())
        }
    }
}

fn synth(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let rc = effective_config(cfg)?;
    rc.synth.validate()?;
    let ds = generate_synthetic(&rc.synth)?;
    let m = write_synthetic(out, &ds)?;
    print_json(&json!({ "manifest": out.join("manifest.json"), "cases": m.cases.len(), "seed": rc.synth.seed }));
    Ok(())
}

fn train(
    cfg: &ConfigArgs,
    manifest: &Path,
    out: &Path,
    workers: usize,
    variant: Option<String>,
    epochs: Option<usize>,
    trials: Option<usize>,
) -> Result<()> {
    let mut rc = effective_config(cfg)?;
    if let Some(v) = variant {
        rc.train.variant = LossVariant::parse(&v)?;
    }
    if let Some(e) = epochs {
        rc.train.epochs = e;
    }
    if let Some(n) = trials {
        let base = cfg.seed.unwrap_or(0);
        rc.train.seeds = (0..n as u64).map(|i| base.wrapping_add(i)).collect();
    }
    let m = load_manifest(manifest)?;
    let data = load_dataset(&m)?;
    let dims = data.atlas_image.dims();
    if rc.train.network.dims != dims {
        log::info!("network input dims set to the atlas grid {dims:?}");
        rc.train.network.dims = dims;
    }
    rc.validate()?;
    let atlas = AtlasBundle::new(data.atlas_image.clone(), data.atlas_mask.clone(), rc.train.t_lower_mm, rc.train.t_upper_mm)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("run_config.json"), &rc.to_json())?;
    let outcome = run_trials(&data, &atlas, &rc.train, workers, &|seed, e| {
        log::info!(
            "seed {seed} epoch {}: train {:.5} val_loss {} val_dice {} ({:.1} s)",
            e.epoch,
            e.train.total,
            e.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            e.val_dice.map_or("-".into(), |v| format!("{v:.4}")),
            e.wall_time_s
        );
    })?;
    for t in &outcome.trials {
        let dir = out.join(format!("seed_{}", t.seed));
        let history: String = t.history.iter().map(|e| serde_json::to_string(e).expect("record serializes") + "\n").collect();
        write_text(&dir.join("history.jsonl"), &history)?;
        atlasseg_core::network::save_checkpoint(&dir.join("selected.ckpt"), &t.selected)?;
        atlasseg_core::network::save_checkpoint(&dir.join("last.ckpt"), &t.last)?;
    }
    write_records_csv(&out.join("records.csv"), &outcome.test_records)?;
    let summary = json!({
        "variant": rc.train.variant.name(),
        "seeds": rc.train.seeds,
        "selected_epochs": outcome.trials.iter().map(|t| json!({"seed": t.seed, "epoch": t.selected_epoch})).collect::<Vec<_>>(),
        "failures": outcome.failures.iter().map(|(s, m)| json!({"seed": s, "error": m})).collect::<Vec<_>>(),
        "median_test_dice": outcome.median_test_dice,
        "median_test_hd95_mm": outcome.median_test_hd95_mm,
    });
    write_text(&out.join("trials.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    print_json(&summary);
    Ok(())
}

fn load_atlas(dir: &Path, rc: &RunConfig) -> Result<AtlasBundle> {
    let image = load_image(&dir.join("atlas_image.dvol"))?;
    let mask = load_label(&dir.join("atlas_mask.dvol"))?;
    Ok(AtlasBundle::new(image, mask, rc.train.t_lower_mm, rc.train.t_upper_mm)?)
}

fn segment(cfg: &ConfigArgs, checkpoint: Option<&Path>, image: &Path, atlas_dir: &Path, out: &Path, direct: bool) -> Result<()> {
    let rc = effective_config(cfg)?;
    let atlas = load_atlas(atlas_dir, &rc)?;
    let target = load_image(image)?;
    target.grid().ensure_matches(atlas.image.grid(), "segment image")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let field = if direct {
        let r = optimize_field_direct(&target, &atlas, &rc.direct)?;
        let log = json!({ "best_iteration": r.best_iteration, "best": r.best, "losses": r.losses });
        write_text(&out.join("direct.json"), &(serde_json::to_string_pretty(&log).expect("json") + "\n"))?;
        r.field
    } else {
        let path = checkpoint.ok_or_else(|| usage("--checkpoint is required without --direct"))?;
        let ck = load_checkpoint(path)?;
        Segmenter::from_checkpoint(&ck)?.predict(&target)?
    };
    let (mask, surface) = project_atlas(&atlas, &field)?;
    save_field(&out.join("field"), &field)?;
    save_mask(&out.join("mask.dvol"), &mask)?;
    write_text(&out.join("surface.obj"), &surface.to_obj())?;
    print_json(&json!({ "out": out, "mask_voxels": mask.count(), "max_displacement_voxels": field.max_abs() }));
    Ok(())
}

fn eval(cfg: &ConfigArgs, pred: &Path, gt: &Path, exclusion: Option<&Path>, out: &Path, method: &str, seed: u64) -> Result<()> {
    let rc = effective_config(cfg)?;
    let mut ids: Vec<String> = fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("mask.dvol").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Empty(format!("no <id>/mask.dvol predictions under {}", pred.display())).into());
    }
    let mut records = Vec::new();
    for id in ids {
        let case_dir = pred.join(&id);
        let p = load_label(&case_dir.join("mask.dvol"))?;
        let g = load_label(&gt.join(format!("{id}_mask.dvol")))?;
        p.grid().ensure_matches(g.grid(), "prediction")?;
        let ex = match exclusion {
            Some(dir) => {
                let path = dir.join(format!("{id}_exclusion.dvol"));
                if path.is_file() {
                    Some(load_label(&path)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let surf_path = case_dir.join("surface.obj");
        let pred_surface = if surf_path.is_file() {
            SurfaceMesh::from_obj(&fs::read_to_string(&surf_path).map_err(|e| Error::io(&surf_path, e))?)?
        } else {
            marching_cubes_surface(&p)?
        };
        let sp = g.grid().spacing;
        let opts = Hd95Options {
            mode: rc.eval.hd95_mode,
            sample_spacing_mm: rc.eval.sample_spacing_voxels * sp[0].min(sp[1]).min(sp[2]),
        };
        let d = dice(&p, &g, ex.as_ref())?;
        let h = hd95_with(&pred_surface, &marching_cubes_surface(&g)?, ex.as_ref(), &opts)?;
        records.push(MetricsRecord { case_id: id, seed, method: method.to_string(), dice: d, hd95_mm: h });
    }
    write_records_csv(out, &records)?;
    print_json(&json!({ "records": records.len(), "out": out }));
    Ok(())
}

fn ttest(a: &Path, b: &Path, metric: &str) -> Result<()> {
    let metric = Metric::parse(metric)?;
    let ra = read_records_csv(a)?;
    let rb = read_records_csv(b)?;
    let ma = per_case_medians(&ra.iter().collect::<Vec<_>>(), metric);
    let mb = per_case_medians(&rb.iter().collect::<Vec<_>>(), metric);
    if ma.keys().ne(mb.keys()) {
        return Err(usage("record files cover different cases").into());
    }
    let x: Vec<f64> = ma.values().copied().collect();
    let y: Vec<f64> = mb.values().copied().collect();
    let r = compare(&x, &y, metric)?;
    print_json(&json!({ "a": a, "b": b, "metric": metric, "result": r }));
    Ok(())
}

fn gradcheck(op: Option<&str>, list: bool, seed: u64, step: f64, tolerance: f64) -> Result<()> {
    let loss_names = ["term.cc", "term.grad", "term.wgrad", "term.ls"]
        .into_iter()
        .map(String::from)
        .chain(LossVariant::ALL.iter().map(|v| format!("variant.{}", v.name())));
    let names: Vec<String> = op_names().into_iter().map(String::from).chain(loss_names).collect();
    if list {
        names.iter().for_each(|n| println!("{n}"));
        return Ok(());
    }
    if let Some(o) = op {
        if !names.iter().any(|n| n == o) {
            return Err(usage(format!("unknown op {o:?}; see `gradcheck --list`")).into());
        }
    }
    if !(step > 0.0 && tolerance > 0.0) {
        return Err(usage("step and tolerance must be positive").into());
    }
    let wanted = |r: &GradCheckResult| op.is_none_or(|o| r.name == o);
    let mut results: Vec<GradCheckResult> = op_suite(seed, step, tolerance)?.into_iter().filter(wanted).collect();
    if op.is_none_or(|o| o.starts_with("term.") || o.starts_with("variant.")) {
        results.extend(losses::gradcheck_suite(seed, step, tolerance)?.into_iter().filter(wanted));
    }
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(stdout, "{}", serde_json::to_string(r).expect("result serializes"));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { kind: ErrorKind::Numerical, message: format!("gradient check failed for {}", failed.join(", ")) })
    }
}

fn report(paths: &[PathBuf], out: &Path, pairs: &[String]) -> Result<()> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_records_csv(p)?);
    }
    let pairs: Vec<(String, String)> = if pairs.is_empty() {
        let methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
        let mut v = Vec::new();
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                v.push((methods[i].to_string(), methods[j].to_string()));
            }
        }
        v
    } else {
        pairs
            .iter()
            .map(|p| {
                p.split_once(':')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| usage(format!("pair {p:?} is not LEFT:RIGHT")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let summary = summarize(&records, &pairs)?;
    write_report(out, &records, &summary)?;
    for m in &summary.methods {
        println!(
            "{:<12} cases {:>4} trials {:>2} median dice {:.4} median hd95 {:.3} mm",
            m.method,
            m.cases,
            m.trials.len(),
            m.median_dice,
            m.median_hd95_mm
        );
    }
    for c in &summary.comparisons {
        println!(
            "{} vs {} {:?}: mean diff {:+.4} t {:.3} p {:.3e} {}",
            c.left, c.right, c.metric, c.result.mean_diff, c.result.t, c.result.p, c.result.glyph
        );
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stalkfusion::datapipe::{
    load_manifest, read_ppm, split, synth_generate, write_dataset, Label, Passthrough, Split,
};
use stalkfusion::geomfeat::{fit_scaler, PoseSolver, ScalerParams};
use stalkfusion::gradcheck::{check_model, check_primitives, CheckConfig};
use stalkfusion::model::{build_variant, load_checkpoint, save_checkpoint, ArchitectureConfig, Checkpoint, Variant};
use stalkfusion::pipeline::{apply_scaler, extract_examples, load_dataset, prepare, Example, FrameFlag, ScalerFit};
use stalkfusion::trainer;

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "model.sfm";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

impl FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            _ => Err(format!("expected train, val, test or all, got {s:?}")),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// S from the config, else the extent of the first frame on disk.
fn image_size(cfg: &RunConfig) -> Result<usize> {
    if let Some(s) = cfg.image_size {
        return Ok(s);
    }
    let manifest = load_manifest(&cfg.manifest())?;
    let first = manifest
        .records
        .first()
        .and_then(|r| r.frames.first())
        .with_context(|| format!("{} lists no frames", cfg.manifest().display()))?;
    let frame = read_ppm(&manifest.resolve(first))?;
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    if h != w {
        bail!("frames are {w}×{h}; pass --size to choose the square extent");
    }
    Ok(h)
}

fn architecture(cfg: &RunConfig) -> Result<ArchitectureConfig> {
    let arch = cfg.model.clone().with_image_size(image_size(cfg)?);
    arch.validate()?;
    Ok(arch)
}

fn load_examples(manifest: &Path, size: usize) -> Result<(Vec<Example>, Vec<FrameFlag>)> {
    let samples = load_dataset(manifest, size, &Passthrough)?;
    Ok(extract_examples(samples, &PoseSolver::default())?)
}

fn ids(part: &[Example]) -> Vec<&str> {
    part.iter().map(|e| e.id.as_str()).collect()
}

fn split_ids(s: &Split<Example>) -> BTreeMap<&'static str, Vec<&str>> {
    BTreeMap::from([("train", ids(&s.train)), ("val", ids(&s.val)), ("test", ids(&s.test))])
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.data_dir();
    let videos = synth_generate(&cfg.synth)?;
    let manifest = write_dataset(dir, &videos)?;
    cfg.echo(dir)?;
    let truth: BTreeMap<&str, _> = videos.iter().map(|v| (v.sample.id.as_str(), &v.truth)).collect();
    write_json(&dir.join("truth.json"), &truth)?;
    println!("wrote {} videos to {}", videos.len(), manifest.display());
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.run_dir;
    cfg.echo(out)?;
    let (examples, flags) = load_examples(&cfg.manifest(), image_size(cfg)?)?;
    let mut csv = String::from("video_id,label,frame");
    for j in 0..29 {
        let _ = write!(csv, ",f{j}");
    }
    csv.push('\n');
    for e in &examples {
        for (j, row) in e.features.data().chunks(29).enumerate() {
            let _ = write!(csv, "{},{},{j}", e.id, e.label);
            for v in row {
                let _ = write!(csv, ",{v:?}");
            }
            csv.push('\n');
        }
    }
    fs::write(out.join("features.csv"), csv).context("writing features.csv")?;
    let parts = split(examples.clone(), &cfg.split)?;
    let fit_on: &[Example] = match cfg.scaler_fit {
        ScalerFit::TrainOnly => &parts.train,
        ScalerFit::AllData => &examples,
    };
    let rows: Vec<&[f64]> = fit_on.iter().flat_map(|e| e.features.data().chunks(29)).collect();
    let scaler = fit_scaler(&rows)?;
    write_json(&out.join("scaler.json"), &scaler)?;
    write_json(&out.join("flagged.json"), &flags)?;
    write_json(&out.join("split.json"), &split_ids(&parts))?;
    println!(
        "{} videos → {} feature rows, {} flagged frames, written to {}",
        examples.len(),
        examples.len() * 5,
        flags.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.run_dir;
    cfg.echo(out)?;
    let arch = architecture(cfg)?;
    let samples = load_dataset(&cfg.manifest(), arch.image_size, &Passthrough)?;
    let data = prepare(samples, &cfg.split, cfg.scaler_fit, &PoseSolver::default())?;
    eprintln!(
        "training {} on {}/{}/{} videos at S = {}",
        cfg.variant,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        arch.image_size
    );
    let params = build_variant(cfg.variant, &arch, cfg.train.seed)?;
    let result = trainer::train(params, &data.train, &data.val, &cfg.train)?;
    for h in &result.summary.history {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            h.epoch + 1,
            h.train_loss,
            h.train_accuracy,
            h.val_loss,
            h.val_accuracy
        );
    }
    save_checkpoint(&result.params, &data.scaler, &out.join(CHECKPOINT))?;
    write_json(&out.join("metrics.json"), &result.report)?;
    write_json(&out.join("history.json"), &result.summary.history)?;
    write_json(&out.join("flagged.json"), &data.flags)?;
    let parts: BTreeMap<&str, Vec<&str>> =
        BTreeMap::from([("train", ids(&data.train)), ("val", ids(&data.val)), ("test", ids(&data.test))]);
    write_json(&out.join("split.json"), &parts)?;
    println!(
        "best epoch {} of {}, validation accuracy {:.4}; checkpoint at {}",
        result.summary.best_epoch + 1,
        result.summary.history.len(),
        result.report.accuracy,
        out.join(CHECKPOINT).display()
    );
    Ok(())
}

fn checkpoint(cfg: &RunConfig, path: Option<PathBuf>) -> Result<(PathBuf, Checkpoint)> {
    let path = path.unwrap_or_else(|| cfg.run_dir.join(CHECKPOINT));
    let ck = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((path, ck))
}

fn scaled(mut examples: Vec<Example>, scaler: &ScalerParams) -> Result<Vec<Example>> {
    apply_scaler(scaler, &mut examples)?;
    Ok(examples)
}

pub fn eval(cfg: &RunConfig, path: Option<PathBuf>, which: SplitChoice) -> Result<()> {
    let out = &cfg.run_dir;
    let (path, ck) = checkpoint(cfg, path)?;
    cfg.echo(out)?;
    let (examples, _) = load_examples(&cfg.manifest(), ck.model.config.image_size)?;
    let chosen = match which {
        SplitChoice::All => examples,
        _ => {
            let parts = split(examples, &cfg.split)?;
            match which {
                SplitChoice::Train => parts.train,
                SplitChoice::Val => parts.val,
                _ => parts.test,
            }
        }
    };
    let chosen = scaled(chosen, &ck.scaler)?;
    let report = trainer::evaluate(&ck.model, &chosen, cfg.train.threshold)?;
    write_json(&out.join("eval.json"), &report)?;
    let m = report.confusion_matrix;
    println!(
        "{} on {} videos: accuracy {:.4}, macro F {:.4} (tp {} fp {} tn {} fn {})",
        path.display(),
        chosen.len(),
        report.accuracy,
        report.macro_avg.f_measure,
        m.tp,
        m.fp,
        m.tn,
        m.fn_
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    probability: f64,
    label: Label,
}

pub fn predict(cfg: &RunConfig, path: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<()> {
    let out = &cfg.run_dir;
    let (_, ck) = checkpoint(cfg, path)?;
    cfg.echo(out)?;
    let manifest = manifest.unwrap_or_else(|| cfg.manifest());
    let (examples, _) = load_examples(&manifest, ck.model.config.image_size)?;
    let examples = scaled(examples, &ck.scaler)?;
    let probs = trainer::predict(&ck.model, &examples)?;
    let rows: Vec<Prediction> = examples
        .iter()
        .zip(&probs)
        .map(|(e, &p)| Prediction {
            id: &e.id,
            probability: p,
            label: Label::from_probability(p, cfg.train.threshold),
        })
        .collect();
    let mut csv = String::from("video_id,probability,label\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:?},{}", r.id, r.probability, r.label);
    }
    fs::write(out.join("predictions.csv"), &csv).context("writing predictions.csv")?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(seeds: u64, layers_only: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = CheckConfig::default();
    // name → (worst error, tolerance)
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let mut note = |name: &str, err: f64, tol: f64| match rows.iter_mut().find(|r| r.0 == name) {
        Some(r) => r.1 = r.1.max(err),
        None => rows.push((name.to_string(), err, tol)),
    };
    for seed in 0..seeds {
        for r in check_primitives(seed, &cfg)? {
            note(&r.name, r.max_rel_error, 1e-5);
        }
    }
    if !layers_only {
        let arch = ArchitectureConfig::tiny();
        for seed in 0..seeds {
            for v in Variant::ALL {
                let r = check_model(v, &arch, seed, &cfg)?;
                note(&format!("model/{v}"), r.max_rel_error, 1e-4);
            }
        }
    }
    println!("{:<28} {:>6} {:>12} {:>10}  result", "check", "seeds", "max rel err", "tolerance");
    let mut failed = 0;
    for (name, err, tol) in &rows {
        let ok = *err < *tol;
        failed += usize::from(!ok);
        println!(
            "{name:<28} {seeds:>6} {err:>12.3e} {tol:>10.0e}  {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", rows.len());
    }
    Ok(())
}

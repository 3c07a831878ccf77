use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use mood_core::datamodel::{
    encode_feature_dump, generate_synthetic, read_feature_dump, Dtype, ImageDataset, RunManifest, Stage,
};
use mood_core::evaluate::{build_report, confusion_counts, threshold_at_tpr, ReportOptions, DEFAULT_BINS, DEFAULT_TPR};
use mood_core::finetune::{
    extract_features, extract_logits, finetune_classifier, FeatureLayer, FinetuneConfig, FinetuneMode,
    SmoothingConfig, DEFAULT_ALPHA,
};
use mood_core::gaussian::{fit_gaussian_with, FitOptions, GaussianModel, DEFAULT_REG};
use mood_core::mim::{train_mim, MimConfig, ToyMimModel};
use mood_core::scores::{read_score_csv, score_batch, Metric, ScoreContext, DEFAULT_TEMPERATURE};
use mood_core::{MoodError, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::config::{digest, finish, merged, take, CliConfig, Overrides};
use crate::outputs::Outputs;
use crate::selfcheck;

pub fn dispatch(cmd: Command, cfg: &CliConfig) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a, cfg),
        Command::Pretrain(a) => pretrain(a, cfg),
        Command::Finetune(a) => finetune(a, cfg),
        Command::Extract(a) => extract(a, cfg),
        Command::Fit(a) => fit(a, cfg),
        Command::Score(a) => score(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Confusion(a) => confusion(a, cfg),
        Command::Selfcheck(a) => selfcheck(a),
    }
}

fn manifest(stage: Stage, resolved: serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> Result<RunManifest> {
    let mut m = RunManifest::new(stage, digest(&json!({ "stage": stage, "config": resolved, "seed": seed })), seed)?;
    m.inputs = inputs.iter().map(|p| p.to_path_buf()).collect();
    Ok(m)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn gen(a: GenArgs, cfg: &CliConfig) -> Result<()> {
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let data = generate_synthetic(a.classes, a.per_class, a.side, a.channels, a.ood, seed)?;
    let mut out = Outputs::default();
    out.add(&a.out, data.to_container().to_bytes());
    out.commit()
}

fn pretrain(a: PretrainArgs, cfg: &CliConfig) -> Result<()> {
    let mut o = Overrides::default();
    o.set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("learning_rate", a.learning_rate)
        .set("momentum", a.momentum)
        .set("mask_ratio", a.mask_ratio)
        .set("target", a.target)
        .set("codebook_size", a.codebook_size)
        .set("patch_size", a.patch_size)
        .set("embed_dim", a.embed_dim)
        .set("depth", a.depth)
        .set("heads", a.heads)
        .set("seed", a.seed);
    let mut m = merged(&cfg.pretrain, o);
    let seed = take::<u64>(&mut m, "pretrain", "seed")?.or(cfg.seed).unwrap_or(0);
    let mim: MimConfig = finish(m, "pretrain")?;
    mim.validate()?;

    let data = ImageDataset::load(&a.data)?;
    let trained = train_mim(&data, &mim, seed)?;
    let mut man = manifest(Stage::Pretrain, to_value(&mim), Some(seed), &[&a.data])?;
    man.trace = Some(to_value(&trained.trace));

    let mut out = Outputs::default();
    out.add(&a.out, trained.model.to_container().to_bytes());
    out.add_manifest(&a.out, man)?;
    out.commit()
}

fn finetune(a: FinetuneArgs, cfg: &CliConfig) -> Result<()> {
    let mut o = Overrides::default();
    o.set("mode", a.mode)
        .set("class_count", a.classes)
        .set("target_class", a.target_class)
        .set("alpha", a.alpha)
        .set("seed", a.seed)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("learning_rate", a.learning_rate)
        .set("momentum", a.momentum);
    let mut m = merged(&cfg.finetune, o);
    let alpha = take::<f64>(&mut m, "finetune", "alpha")?.unwrap_or(DEFAULT_ALPHA);
    let seed = take::<u64>(&mut m, "finetune", "seed")?.or(cfg.seed).unwrap_or(0);
    m.insert("seed".into(), seed.into());
    let ft: FinetuneConfig = finish(m, "finetune")?;
    let smoothing = SmoothingConfig::new(alpha, ft.class_count)?;

    let model = ToyMimModel::load(&a.model)?;
    let data = ImageDataset::load(&a.data)?;
    let tuned = finetune_classifier(&model, &data, &ft, &smoothing)?;
    let stage = match ft.mode {
        FinetuneMode::Intermediate => Stage::IntermediateFt,
        FinetuneMode::MultiClass | FinetuneMode::OneClass => Stage::Finetune,
    };
    let resolved = json!({ "finetune": ft, "smoothing": smoothing });
    let mut man = manifest(stage, resolved, Some(seed), &[&a.model, &a.data])?;
    man.trace = Some(json!({ "epochs": tuned.trace }));

    let mut out = Outputs::default();
    out.add(&a.out, tuned.model.to_container().to_bytes());
    out.add_manifest(&a.out, man)?;
    out.commit()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExtractSettings {
    layer: FeatureLayer,
    dtype: Dtype,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        ExtractSettings {
            layer: FeatureLayer::PooledFinal,
            dtype: Dtype::F32,
        }
    }
}

fn extract(a: ExtractArgs, cfg: &CliConfig) -> Result<()> {
    let mut o = Overrides::default();
    o.set("layer", a.layer).set("dtype", a.dtype);
    let s: ExtractSettings = finish(merged(&cfg.extract, o), "extract")?;
    let model = ToyMimModel::load(&a.model)?;
    let data = ImageDataset::load(&a.data)?;
    let features = extract_features(&model, &data, s.layer)?;

    let mut out = Outputs::default();
    out.add(&a.out, encode_feature_dump(&features, s.dtype));
    let mut trace = json!({ "rows": features.n_rows(), "feature_dim": features.n_cols() });
    if let Some(path) = &a.logits_out {
        let logits = extract_logits(&model, &data)?;
        trace["logit_dim"] = logits.n_cols().into();
        out.add(path, encode_feature_dump(&logits, s.dtype));
    }
    let mut man = manifest(Stage::Extract, to_value(&s), None, &[&a.model, &a.data])?;
    man.trace = Some(trace);
    out.add_manifest(&a.out, man)?;
    out.commit()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitSettings {
    reg: f64,
    standardize: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            reg: DEFAULT_REG,
            standardize: false,
        }
    }
}

fn fit(a: FitArgs, cfg: &CliConfig) -> Result<()> {
    let mut o = Overrides::default();
    o.set("reg", a.reg).set("standardize", a.standardize.then_some(true));
    let s: FitSettings = finish(merged(&cfg.fit, o), "fit")?;
    let fs = read_feature_dump(&a.features)?;
    let g = fit_gaussian_with(
        &fs,
        FitOptions {
            reg: s.reg,
            standardize: s.standardize,
        },
    )?;
    let mut man = manifest(Stage::Fit, to_value(&s), None, &[&a.features])?;
    man.trace = Some(json!({
        "classes": g.class_count(),
        "dim": g.dim(),
        "class_counts": g.class_counts(),
        "reg_epsilon": g.reg_epsilon(),
    }));
    let mut out = Outputs::default();
    out.add(&a.out, g.to_container().to_bytes());
    out.add_manifest(&a.out, man)?;
    out.commit()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScoreSettings {
    metric: Option<Metric>,
    temperature: f64,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            metric: None,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

fn score(a: ScoreArgs, cfg: &CliConfig) -> Result<()> {
    let mut o = Overrides::default();
    o.set("metric", a.metric).set("temperature", a.temperature);
    let s: ScoreSettings = finish(merged(&cfg.score, o), "score")?;
    let metric = s
        .metric
        .ok_or_else(|| MoodError::Config("no metric given (--metric or score.metric)".into()))?;
    let input = read_feature_dump(&a.input)?;
    let mut inputs: Vec<&Path> = vec![&a.input];

    let gaussian;
    let model;
    let ctx = match metric {
        Metric::Mahalanobis => {
            let p = a
                .gaussian
                .as_deref()
                .ok_or_else(|| MoodError::Config("mahalanobis scoring needs --gaussian".into()))?;
            gaussian = GaussianModel::load(p)?;
            inputs.push(p);
            ScoreContext::Gaussian(&gaussian)
        }
        Metric::Gradnorm => {
            let p = a
                .model
                .as_deref()
                .ok_or_else(|| MoodError::Config("gradnorm scoring needs --model".into()))?;
            model = ToyMimModel::load(p)?;
            inputs.push(p);
            let head = model
                .cls_head
                .as_ref()
                .ok_or_else(|| MoodError::Config(format!("{} has no classifier head", p.display())))?;
            ScoreContext::Head {
                weight: &head.weight,
                bias: &head.bias,
            }
        }
        Metric::Msp | Metric::Entropy | Metric::Energy => ScoreContext::None,
    };
    let scores = score_batch(input.features(), metric, s.temperature, ctx)?;

    let mut man = manifest(Stage::Score, to_value(&s), None, &inputs)?;
    man.trace = Some(json!({ "metric": metric, "samples": scores.len() }));
    let mut out = Outputs::default();
    out.add(&a.out, scores.to_csv());
    out.add_manifest(&a.out, man)?;
    out.commit()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    tpr: f64,
    bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tpr: DEFAULT_TPR,
            bins: DEFAULT_BINS,
        }
    }
}

fn eval_settings(cfg: &CliConfig, tpr: Option<f64>, bins: Option<usize>) -> Result<EvalSettings> {
    let mut o = Overrides::default();
    o.set("tpr", tpr).set("bins", bins);
    finish(merged(&cfg.eval, o), "eval")
}

/// File stems, made unique with a `#n` suffix where they collide.
fn set_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or_else(|| "ood".into(), |s| s.to_string_lossy().into_owned());
            let mut name = stem.clone();
            let mut n = 2;
            while !seen.insert(name.clone()) {
                name = format!("{stem}#{n}");
                n += 1;
            }
            name
        })
        .collect()
}

fn eval(a: EvalArgs, cfg: &CliConfig) -> Result<()> {
    let s = eval_settings(cfg, a.tpr, a.bins)?;
    let id = read_score_csv(&a.id)?;
    let names = set_names(&a.ood);
    let mut sets = Vec::with_capacity(a.ood.len());
    for (name, p) in names.iter().zip(&a.ood) {
        sets.push((name.clone(), read_score_csv(p)?));
    }
    let report = build_report(&id, &sets, &ReportOptions { tpr: s.tpr, bins: s.bins }, None)?;

    let mut out = Outputs::default();
    out.add(&a.out, report.to_json().into_bytes());
    if let Some(dir) = &a.histogram_dir {
        out.add(&dir.join("id.hist.csv"), report.id_histogram.to_csv());
        for set in &report.ood_sets {
            out.add(&dir.join(format!("{}.hist.csv", set.name)), set.histogram.to_csv());
        }
    }
    let mut inputs: Vec<&Path> = vec![&a.id];
    inputs.extend(a.ood.iter().map(PathBuf::as_path));
    let mut man = manifest(Stage::Eval, to_value(&s), None, &inputs)?;
    man.trace = Some(json!({ "auroc": report.auroc, "fpr_at_tpr95": report.fpr_at_tpr95 }));
    out.add_manifest(&a.out, man)?;
    out.commit()?;

    let mut stdout = std::io::stdout().lock();
    for set in &report.ood_sets {
        let _ = writeln!(stdout, "{}\tauroc={:.6}\tfpr@tpr{}={:.6}", set.name, set.auroc, s.tpr, set.fpr_at_tpr);
    }
    let _ = writeln!(stdout, "average\tauroc={:.6}\tfpr@tpr{}={:.6}", report.auroc, s.tpr, report.fpr_at_tpr95);
    Ok(())
}

fn confusion(a: ConfusionArgs, cfg: &CliConfig) -> Result<()> {
    let s = eval_settings(cfg, a.tpr, None)?;
    let g = GaussianModel::load(&a.gaussian)?;
    let ood = read_feature_dump(&a.ood_features)?;
    let id = read_score_csv(&a.id)?;
    let counts = confusion_counts(&g, &ood, &id, s.tpr)?;
    let accepted: usize = counts.iter().sum();
    let doc = json!({
        "tpr": s.tpr,
        "threshold": threshold_at_tpr(&id, s.tpr)?,
        "ood_samples": ood.n_rows(),
        "accepted": accepted,
        "counts": counts,
    });
    let mut out = Outputs::default();
    out.add(&a.out, serde_json::to_vec_pretty(&doc).expect("json"));
    let mut man = manifest(Stage::Eval, to_value(&s), None, &[&a.gaussian, &a.ood_features, &a.id])?;
    man.trace = Some(json!({ "accepted": accepted }));
    out.add_manifest(&a.out, man)?;
    out.commit()
}

fn selfcheck(a: SelfcheckArgs) -> Result<()> {
    let results = selfcheck::run_all();
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(stdout, "{} {:<28} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    if let Some(path) = &a.out {
        let mut out = Outputs::default();
        out.add(path, serde_json::to_vec_pretty(&results).expect("json"));
        out.commit()?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(MoodError::numeric(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_names_are_unique() {
        let p = |s: &str| PathBuf::from(s);
        let names = set_names(&[p("a/svhn.csv"), p("b/svhn.csv"), p("lsun.csv")]);
        assert_eq!(names, vec!["svhn", "svhn#2", "lsun"]);
    }
}

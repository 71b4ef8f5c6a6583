use std::fs;
use std::path::Path;

use dfsp_core::data::{generate, write_manifest, Manifest, Split, SyntheticSpec};
use dfsp_core::diff::GradCheckReport;
use dfsp_core::eval::{curve_csv, evaluate, report_json, Evaluation, MetricsReport};
use dfsp_core::model::DfspModel;
use dfsp_core::space::{CompositionSpace, World};
use dfsp_core::trainer::{log_jsonl, train, Checkpoint, TrainConfig, TrainOutcome};
use dfsp_core::{Error, Result};

use crate::args::{EvalArgs, GenArgs, GradcheckArgs, SplitArg, SweepArgs, SweepParam};
use crate::config::RunConfig;

const SCORE_CHUNK: usize = 64;

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn summary(r: &MetricsReport) -> String {
    format!(
        "{} world: S={:.4} U={:.4} H={:.4} AUC={:.4}",
        r.world, r.best_seen, r.best_unseen, r.best_harmonic, r.auc
    )
}

/// Evaluation of `model` on one split of `manifest`, in the run's world.
fn evaluate_split(
    cfg: &RunConfig,
    manifest: &Manifest,
    model: &DfspModel,
    split: Split,
) -> Result<(CompositionSpace, Evaluation)> {
    let space = manifest.space(cfg.world)?;
    let (x, y) = manifest.split_data(split)?;
    let phi = cfg.phi(manifest)?;
    let ev = evaluate(model, &space, &x, &y, cfg.threshold, &phi, SCORE_CHUNK)?;
    Ok((space, ev))
}

fn write_report(dir: &Path, ev: &Evaluation, space: &CompositionSpace) -> Result<()> {
    write(dir, "metrics.json", report_json(&ev.report)?)?;
    write(dir, "curve.csv", curve_csv(&ev.report))?;
    if let Some(f) = &ev.feasibility {
        let mut csv = String::from("state,object,q,retained\n");
        for (&(s, o), q) in f.pairs.iter().zip(&f.q) {
            let kept = ev.prediction.columns.contains(&(s, o));
            csv.push_str(&format!(
                "{},{},{q},{}\n",
                space.states()[s],
                space.objects()[o],
                u8::from(kept)
            ));
        }
        write(dir, "feasibility.csv", csv)?;
    }
    Ok(())
}

fn train_and_eval(cfg: &RunConfig, manifest: &Manifest) -> Result<(TrainOutcome, Evaluation)> {
    let outcome = train(manifest, &cfg.train)?;
    let (_, ev) = evaluate_split(cfg, manifest, &outcome.best.model, Split::Test)?;
    Ok((outcome, ev))
}

pub fn train_cmd(mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.output_dir("train");
    cfg.output = Some(dir.clone());
    let manifest = cfg.load_data()?;
    create(&dir)?;
    let (outcome, ev) = train_and_eval(&cfg, &manifest)?;
    for r in &outcome.log {
        eprintln!(
            "epoch {:>3}  total {:.6}  l_dfm {:.6}  l_st_obj {:.6}  l_spm {:.6}  val {:.6}",
            r.epoch, r.total, r.l_dfm, r.l_st_obj, r.l_spm, r.val_total
        );
    }
    outcome.best.save(dir.join("checkpoint.json"))?;
    write(&dir, "train_log.jsonl", log_jsonl(&outcome.log)?)?;
    write(&dir, "config.json", cfg.to_json()?)?;
    write_report(&dir, &ev, &manifest.space(cfg.world)?)?;
    println!(
        "best epoch {} (val loss {:.6}); test {}",
        outcome.best.epoch,
        outcome.best.val_loss,
        summary(&ev.report)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    if !cfg.threshold.is_finite() {
        return Err(Error::Config("threshold must be finite".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let manifest = match (&cfg.data, &cfg.synthetic) {
        (None, None) => {
            return Err(Error::Config(
                "no data source: pass --data, --synthetic or --config".into(),
            ))
        }
        _ => {
            cfg.validate()?;
            cfg.load_data()?
        }
    };
    ckpt.check_compatible(&manifest.space(World::Closed)?)?;
    if manifest.feature_dim() != ckpt.model.config.input_dim {
        return Err(Error::Checkpoint(format!(
            "data features have dimension {}, the model expects {}",
            manifest.feature_dim(),
            ckpt.model.config.input_dim
        )));
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let (space, ev) = evaluate_split(&cfg, &manifest, &ckpt.model, split)?;
    let dir = cfg.output_dir("eval");
    create(&dir)?;
    write_report(&dir, &ev, &space)?;
    println!(
        "{} split, {} columns; {}",
        args.split_name(),
        ev.report.columns,
        summary(&ev.report)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

impl EvalArgs {
    fn split_name(&self) -> &'static str {
        match self.split {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Alpha => "alpha",
        SweepParam::Beta => "beta",
        SweepParam::K => "K",
        SweepParam::T => "T",
    }
}

fn apply(cfg: &mut RunConfig, param: SweepParam, value: f64) -> Result<()> {
    match param {
        SweepParam::Alpha => cfg.train.alpha = value,
        SweepParam::Beta => cfg.train.beta = value,
        SweepParam::T => cfg.threshold = value,
        SweepParam::K => {
            if value.fract() != 0.0 || !(1.0..=1e6).contains(&value) {
                return Err(Error::Config(format!(
                    "K must be a positive integer, got {value}"
                )));
            }
            cfg.train.blocks = value as usize;
        }
    }
    cfg.validate()
}

/// Returns the first per-value error after all values have run.
pub fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let mut base = args.run.resolve()?;
    base.validate()?;
    let dir = base.output_dir("sweep");
    base.output = Some(dir.clone());
    let manifest = base.load_data()?;
    create(&dir)?;
    write(&dir, "config.json", base.to_json()?)?;
    let name = param_name(args.param);
    let mut csv = String::from("param,value,status,best_seen,best_unseen,best_harmonic,auc\n");
    let mut first_err = None;
    for &value in &args.values {
        let mut cfg = base.clone();
        let result =
            apply(&mut cfg, args.param, value).and_then(|_| train_and_eval(&cfg, &manifest));
        match result {
            Ok((_, ev)) => {
                let r = &ev.report;
                csv.push_str(&format!(
                    "{name},{value},ok,{},{},{},{}\n",
                    r.best_seen, r.best_unseen, r.best_harmonic, r.auc
                ));
                println!("{name}={value}: {}", summary(r));
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                csv.push_str(&format!("{name},{value},error: {msg},,,,\n"));
                eprintln!("{name}={value}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    write(&dir, "sweep.csv", csv)?;
    println!("wrote {}", dir.join("sweep.csv").display());
    first_err.map_or(Ok(()), Err)
}

/// Outcome of a gradient check; a failed check is not an `Err`.
pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<GradCheckReport> {
    let spec = SyntheticSpec {
        states: args.states,
        objects: args.objects,
        dim: args.dim,
        samples_per_pair: 1,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    if args.samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let (manifest, _) = generate(&spec)?;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        seed: args.seed,
        alpha: args.alpha.unwrap_or(defaults.alpha),
        beta: args.beta.unwrap_or(defaults.beta),
        blocks: args.blocks.unwrap_or(defaults.blocks),
        variant: args.variant.unwrap_or(defaults.variant),
        temperature: args.temperature.unwrap_or(defaults.temperature),
        image_tokens: args.image_tokens.unwrap_or(defaults.image_tokens),
        prefix_len: args.prefix_len.unwrap_or(defaults.prefix_len),
        use_dfm: args.use_dfm.unwrap_or(defaults.use_dfm),
        prompt_dim: args.dim,
        feature_dim: args.dim,
        ..defaults
    };
    train.validate()?;
    let space = manifest.space(World::Closed)?;
    let model = DfspModel::init(train.model_config(args.dim), &space, args.seed)?
        .perturbed(args.perturb, args.seed ^ 0x9e37);
    let (x, y) = manifest.split_data(Split::Train)?;
    let idx: Vec<usize> = (0..args.samples).map(|i| i % y.len()).collect();
    let images = model.encode(&x.select_rows(&idx)?)?;
    let labels: Vec<_> = idx.iter().map(|&i| y[i]).collect();
    let report = model.grad_check(
        &space,
        &images,
        &labels,
        space.seen_pairs(),
        train.weights(),
        args.step,
        args.tolerance,
        args.corrupt.as_deref(),
    )?;
    for g in &report.groups {
        println!(
            "{} {:<40} coords {:>5}  max rel error {:.3e}",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.coordinates,
            g.max_rel_error
        );
    }
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:.1e}, step {:.1e})",
        if report.passed { "passed" } else { "failed" },
        report.max_rel_error,
        report.tolerance,
        report.step
    );
    if let Some(dir) = &args.out {
        create(dir)?;
        write(
            dir,
            "gradcheck.json",
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(report)
}

pub fn gen_cmd(args: &GenArgs) -> Result<()> {
    let (manifest, _) = generate(&args.synthetic)?;
    let dir = RunConfig {
        output: args.out.clone(),
        ..RunConfig::default()
    }
    .output_dir("gen-synthetic");
    write_manifest(&manifest, &dir)?;
    let p = manifest.pairs();
    println!(
        "{} states, {} objects, {} seen / {} unseen pairs, {} samples of dimension {} -> {}",
        manifest.states().len(),
        manifest.objects().len(),
        p.train.len(),
        p.test_unseen.len(),
        manifest.records().len(),
        manifest.feature_dim(),
        dir.display()
    );
    Ok(())
}

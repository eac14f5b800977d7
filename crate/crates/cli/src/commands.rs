use std::fs;
use std::path::{Path, PathBuf};

use mmcd_autograd::{Graph, ParamStore};
use mmcd_core::metrics::ConfusionMatrix;
use mmcd_core::model::Model;
use mmcd_core::synth::{build_dataset, encode_png, load_sample, load_split, quantize, write_label_png, Sample, MANIFEST_FILE};
use mmcd_core::trainer::{fit, predict_samples, prior_cache, Batch};

use crate::config::FileConfig;
use crate::{Cli, CliError, Command, EvalArgs, SampleArgs, SynthArgs, TrainArgs};

pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTION_FILE: &str = "pred.png";

const EVAL_BATCH: usize = 8;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = cli.out.clone().or_else(|| file.out.clone()).ok_or_else(|| CliError::Usage("--out is required (flag or `out` in the config file)".into()))?;
    match cli.command {
        Command::Synth(a) => synth(&file, a, cli.seed, &out),
        Command::Train(a) => train(&file, a, cli.seed, &out),
        Command::Eval(a) => eval(&file, a, &out),
        Command::Predict(a) => predict(a, &out),
        Command::InspectPrior(a) => inspect_prior(&file, a, cli.seed, &out),
    }
}

fn synth(file: &FileConfig, a: SynthArgs, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut config = file.dataset()?;
    config.count = a.count.unwrap_or(config.count);
    config.size = a.size.unwrap_or(config.size);
    config.seed = seed.unwrap_or(config.seed);
    config.validate()?;
    let manifest = build_dataset(out, &config)?;
    let (tr, te, va) = manifest.split_counts;
    println!("{} ({tr} train / {te} test / {va} val)", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(file: &FileConfig, a: TrainArgs, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut config = file.train()?;
    if let Some(d) = a.data {
        config.dataset_root = d;
    }
    config.variant = a.variant.unwrap_or(config.variant);
    config.iterations = a.iters.unwrap_or(config.iterations);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.learning_rate = a.lr.unwrap_or(config.learning_rate);
    config.class_weight_mode = a.class_weights.unwrap_or(config.class_weight_mode);
    config.checkpoint_interval = a.checkpoint_interval.unwrap_or(config.checkpoint_interval);
    config.val_interval = a.val_interval.unwrap_or(config.val_interval);
    config.seed = seed.unwrap_or(config.seed);
    if a.no_val {
        config.val_split = None;
    }
    let report = fit(&config, out)?;
    println!("checkpoint {}", report.final_checkpoint.display());
    println!("log {}", report.log_path.display());
    if let Some(v) = report.final_val {
        println!("validation mIoU {:.4}", v.miou);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model<f32>, ParamStore<f32>), CliError> {
    Ok(Model::load(path)?)
}

fn check_size(model: &Model<f32>, samples: &[Sample]) -> Result<(), CliError> {
    let want = model.config.image_size();
    match samples.iter().find(|s| s.optical.dim(1) != want || s.optical.dim(2) != want) {
        Some(s) => Err(mmcd_core::Error::IncompatibleCheckpoint(format!("checkpoint expects {want}×{want} tiles, sample {} is {}×{}", s.id, s.optical.dim(1), s.optical.dim(2))).into()),
        None => Ok(()),
    }
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}

fn write(path: PathBuf, body: &str) -> Result<(), CliError> {
    fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn eval(file: &FileConfig, a: EvalArgs, out: &Path) -> Result<(), CliError> {
    let root = match a.data {
        Some(d) => d,
        None => file.train()?.dataset_root,
    };
    let (model, store) = load_checkpoint(&a.checkpoint)?;
    let samples = load_split(&root, a.split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {} of {} is empty", a.split.name(), root.display())));
    }
    check_size(&model, &samples)?;
    let preds = predict_samples(&model, &store, &samples, EVAL_BATCH)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (p, s) in preds.iter().zip(&samples) {
        cm.accumulate(p, if a.self_score { p } else { &s.label })?;
    }
    let report = cm.report()?;
    create_out(out)?;
    write(out.join(METRICS_FILE), &report.to_json())?;
    println!("OA {:.4}  mIoU {:.4}  F1_bcd {:.4}  F1_clf {:.4}", report.oa, report.miou, report.f1_bcd, report.f1_clf);
    Ok(())
}

fn predict(a: SampleArgs, out: &Path) -> Result<(), CliError> {
    let ckpt = a.checkpoint.ok_or_else(|| CliError::Usage("predict needs --checkpoint".into()))?;
    let (model, store) = load_checkpoint(&ckpt)?;
    let sample = load_sample(&a.sample)?;
    check_size(&model, std::slice::from_ref(&sample))?;
    let pred = predict_samples(&model, &store, std::slice::from_ref(&sample), 1)?;
    create_out(out)?;
    let path = out.join(PREDICTION_FILE);
    write_label_png(&path, &pred[0])?;
    println!("{}", path.display());
    Ok(())
}

fn inspect_prior(file: &FileConfig, a: SampleArgs, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let sample = load_sample(&a.sample)?;
    let (model, store) = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let config = file.train()?;
            let mc = config.model_config(sample.optical.dim(1));
            Model::build(&mc, seed.unwrap_or(config.seed))?
        }
    };
    if !model.config.variant.flags().use_pgffm {
        return Err(CliError::Usage(format!("variant {} has no prior-guided fusion", model.config.variant.name())));
    }
    let samples = std::slice::from_ref(&sample);
    check_size(&model, samples)?;
    let dists = prior_cache(&model, &store, samples)?;
    let batch = Batch::assemble(&[&sample], &[&dists[0]]);
    let mut g = Graph::inference(&store);
    let (o, s) = (g.input(batch.optical), g.input(batch.sar));
    let res = model.forward(&mut g, o, s, Some(&batch.distances))?;
    let maps: Vec<_> = res.gates.iter().map(|&m| g.value(m).clone()).collect();
    create_out(out)?;
    for (i, m) in maps.iter().enumerate() {
        let (h, w) = (m.dim(2), m.dim(3));
        let bytes: Vec<u8> = m.data().iter().map(|&v| quantize(v)).collect();
        let path = out.join(format!("prior_s{}.png", i + 1));
        encode_png(&path, w, h, png::ColorType::Grayscale, &bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}

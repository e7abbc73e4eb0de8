use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use uconvert_core::checkpoint::{ROLE_DISCRIMINATOR, ROLE_GENERATOR, ROLE_MODEL};
use uconvert_core::{
    build_espcn, build_srgan, build_uconvertnet, convert_volume, evaluate_volume, fuse, generate_dataset,
    generate_pair, load_checkpoint, read_mvol, save_checkpoint, split_by_subject, train_gan_with, train_mse_with,
    write_mvol, Axis, Dataset, EpochRecord, EspcnConfig, Model, ModelKind, PhantomParams, SrganConfig, TrainConfig,
    TrainHistory, UConvertNetConfig, Volume,
};

use crate::config::{
    require, sibling, write_resolved, BenchmarkConfig, ConvertConfig, EvaluateConfig, GenDataConfig, TrainRunConfig,
};

const RESOLVED_CONFIG: &str = "run_config.toml";

pub fn gen_data(cfg: GenDataConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let manifest = generate_dataset(cfg.subjects, cfg.seed, &cfg.phantom_params(), &cfg.degrade_params(), out)?;
    write_resolved(&cfg, &out.join(RESOLVED_CONFIG))?;
    println!(
        "wrote {} subject pairs ({}³) to {}",
        manifest.subjects.len(),
        cfg.size,
        out.display()
    );
    Ok(())
}

/// Freshly initialised networks for `kind`; SRGAN yields a generator and a
/// discriminator.
fn build(kind: ModelKind, seed: u64, adversarial_weight: f64) -> Result<Vec<(&'static str, Model<f32>)>> {
    Ok(match kind {
        ModelKind::Uconvert => vec![(ROLE_MODEL, build_uconvertnet(UConvertNetConfig::default(), seed)?)],
        ModelKind::Espcn => vec![(ROLE_MODEL, build_espcn(EspcnConfig::default(), seed)?)],
        ModelKind::Srgan => {
            let cfg = SrganConfig { adversarial_weight, ..Default::default() };
            let (g, d) = build_srgan(cfg, seed)?;
            vec![(ROLE_GENERATOR, g), (ROLE_DISCRIMINATOR, d)]
        }
    })
}

fn fit(
    nets: &mut [(&'static str, Model<f32>)],
    pairs: &[uconvert_core::SubjectPair],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    Ok(match nets {
        [(_, model)] => train_mse_with(model, pairs, config, on_epoch)?,
        [(_, g), (_, d)] => train_gan_with(g, d, pairs, config, on_epoch)?,
        _ => unreachable!("one or two networks"),
    })
}

pub fn train(cfg: TrainRunConfig) -> Result<()> {
    let kind = ModelKind::from_str(&cfg.model)?;
    let data = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    let dataset = Dataset::open(data)?;
    let (train_ids, test_ids) = split_by_subject(&dataset.manifest, cfg.train_fraction, cfg.split_seed)?;
    eprintln!("train subjects {train_ids:?}, held out {test_ids:?}");
    let pairs = dataset.load_pairs(&train_ids)?;

    let config = TrainConfig {
        model: kind,
        view: cfg.view,
        learning_rate: cfg.lr,
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        seed: cfg.seed,
        adversarial_weight: cfg.adversarial_weight,
    };
    let mut nets = build(kind, cfg.seed, cfg.adversarial_weight)?;
    let history = fit(&mut nets, &pairs, &config, |r| {
        eprintln!("epoch {}/{}: loss {:.6} ({:.1}s)", r.epoch + 1, cfg.epochs, r.loss, r.seconds)
    })?;

    let refs: Vec<(&str, &Model<f32>)> = nets.iter().map(|(role, m)| (*role, m)).collect();
    save_checkpoint(out, &refs, &history)?;
    history.write_jsonl(&sibling(out, "history.jsonl"))?;
    write_resolved(&cfg, &sibling(out, "config.toml"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_converter(path: &Path) -> Result<(Axis, Model<f32>)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.converter()?.clone();
    Ok((ck.view(), model))
}

pub fn convert(cfg: ConvertConfig) -> Result<()> {
    let input = require(&cfg.input, "in")?;
    let out = require(&cfg.out, "out")?;
    let source = read_mvol(input)?;
    if cfg.multiview {
        let (Some(sag), Some(cor), Some(ax)) = (&cfg.ckpt, &cfg.ckpt_coronal, &cfg.ckpt_axial) else {
            bail!("three view checkpoints required (--ckpt, --ckpt-coronal, --ckpt-axial)");
        };
        let mut views = Vec::with_capacity(3);
        for (path, expected) in [(sag, Axis::Sagittal), (cor, Axis::Coronal), (ax, Axis::Axial)] {
            let (view, model) = load_converter(path)?;
            if view != expected {
                bail!("{} was trained on the {view} view, expected {expected}", path.display());
            }
            views.push(convert_volume(&model, &source, view)?);
        }
        let fused = fuse(&views)?;
        write_mvol(&fused, out)?;
        if cfg.keep_views {
            for (vol, axis) in views.iter().zip(Axis::ALL) {
                write_mvol(vol, sibling(out, &format!("{axis}.mvol")))?;
            }
        }
    } else {
        if cfg.keep_views {
            bail!("--keep-views needs --multiview");
        }
        let ckpt = require(&cfg.ckpt, "ckpt")?;
        let (view, model) = load_converter(ckpt)?;
        write_mvol(&convert_volume(&model, &source, view)?, out)?;
    }
    write_resolved(&cfg, &sibling(out, "config.toml"))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn evaluate(cfg: EvaluateConfig) -> Result<()> {
    let pred = read_mvol(require(&cfg.pred, "pred")?)?;
    let target = read_mvol(require(&cfg.target, "target")?)?;
    let report = evaluate_volume(&pred, &target, cfg.axis)?;
    println!("PSNR {:.4}", report.psnr_mean);
    println!("SSIM {:.4}", report.ssim_mean);
    if let Some(json) = &cfg.json {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(json, text + "\n").with_context(|| format!("writing {}", json.display()))?;
        write_resolved(&cfg, &sibling(json, "config.toml"))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchmarkRow {
    model: String,
    params: usize,
    sec_per_epoch: f64,
    sec_per_slice: f64,
}

pub fn benchmark(cfg: BenchmarkConfig) -> Result<()> {
    let kind = ModelKind::from_str(&cfg.model)?;
    if cfg.subjects < 1 {
        bail!("benchmark needs at least 1 subject");
    }
    let pp = PhantomParams { size: cfg.size, ..Default::default() };
    let pairs = (0..cfg.subjects as u32)
        .map(|id| generate_pair(id, cfg.seed, &pp, &Default::default()))
        .collect::<uconvert_core::Result<Vec<_>>>()?;
    let config = TrainConfig {
        model: kind,
        learning_rate: cfg.lr,
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut nets = build(kind, cfg.seed, config.adversarial_weight)?;
    let params = nets.iter().map(|(_, m)| m.count_parameters()).sum();
    let history = fit(&mut nets, &pairs, &config, |_| {})?;
    let sec_per_epoch = history.records.iter().map(|r| r.seconds).sum::<f64>() / history.records.len() as f64;

    let source: &Volume = &pairs[0].source;
    let start = Instant::now();
    convert_volume(&nets[0].1, source, config.view)?;
    let sec_per_slice = start.elapsed().as_secs_f64() / source.shape()[config.view.index()] as f64;

    let row = BenchmarkRow { model: kind.name().into(), params, sec_per_epoch, sec_per_slice };
    let line = serde_json::to_string(&row)?;
    println!("{line}");
    if let Some(out) = &cfg.out {
        fs::write(out, line + "\n").with_context(|| format!("writing {}", out.display()))?;
        write_resolved(&cfg, &sibling(out, "config.toml"))?;
    }
    Ok(())
}

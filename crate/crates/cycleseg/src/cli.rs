//! Subcommand implementations. Every run materializes its resolved config
//! next to its outputs; all metric CSVs are deterministic given the seed
//! (wallclock measurements go to their own file).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::crm::{
    decode_from_traces, forward_full, foreground_probability, CrmConfig, ModelParams,
    ModelPredictor,
};
use crate::error::{Error, Result};
use crate::groupstrat::{metrics, run_group_segmentation, Strategy, StrategyConfig};
use crate::synthdata::{derive_seed, generate, generate_for_class, pnm, ImageGroup, ShapeClass};
use crate::tensor::{Tape, Tensor};
use crate::train::{test_set, train, TEST_SALT};
use crate::verify::{run_suite, Scope};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(dir, "config.resolved", &cfg.to_config_string())?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    write_resolved_config(cfg, &out)?;

    let started = Instant::now();
    let result = train(cfg)?;
    write_file(&out, "train_log.csv", &result.log_csv)?;
    result.model.save(&out.join("model.ckpt"))?;

    let last_val = result
        .log_csv
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next().filter(|v| !v.is_empty()))
        .last()
        .unwrap_or("-")
        .to_string();
    println!(
        "trained {} iterations in {:.1}s, final val jaccard {}, outputs in {}",
        cfg.iterations,
        started.elapsed().as_secs_f64(),
        last_val,
        out.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ModelParams> {
    let mut model = ModelParams::init(cfg.seed, &cfg.model_config())?;
    model.load(checkpoint)?;
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, per_step: bool) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    write_resolved_config(cfg, &out)?;
    let model = load_model(cfg, checkpoint)?;
    let pairs = test_set(cfg)?;
    let mcfg = cfg.model_config();
    let crm = cfg.crm_config();

    if !per_step {
        let mut csv = String::from("pair,precision,jaccard\n");
        let mut sums = (0.0, 0.0);
        for (i, group) in pairs.iter().enumerate() {
            let (p, j) = eval_one_group(&model, cfg, &crm, group)?;
            let _ = writeln!(csv, "{i},{p:.6},{j:.6}");
            sums.0 += p;
            sums.1 += j;
        }
        let n = pairs.len() as f64;
        let _ = writeln!(csv, "mean,{:.6},{:.6}", sums.0 / n, sums.1 / n);
        write_file(&out, "eval.csv", &csv)?;
        println!(
            "evaluated {} pairs: precision {:.4}, jaccard {:.4}",
            pairs.len(),
            sums.0 / n,
            sums.1 / n
        );
        return Ok(());
    }

    // per-step metrics from one trace per pair
    let mut per_step_metrics = vec![(0.0f64, 0.0f64); crm.steps];
    let dump_pairs = pairs.len().min(4);
    let steps_dir = out.join("steps");
    ensure_dir(&steps_dir)?;
    for (pi, group) in pairs.iter().enumerate() {
        let mut tape = Tape::new();
        let refs: Vec<&Tensor> = group.images.iter().collect();
        let fwd = forward_full(&mut tape, &model, &mcfg, &crm, &refs)?;
        for t in 0..crm.steps {
            for (b, gt) in group.masks.iter().enumerate() {
                let logits = decode_from_traces(&mut tape, &model, &fwd.traces, Some(t), b)?;
                let prob = foreground_probability(&mut tape, &logits)?;
                let mask = threshold(&prob);
                let (p, j) = metrics(&mask, gt)?;
                per_step_metrics[t].0 += p;
                per_step_metrics[t].1 += j;
                if pi < dump_pairs {
                    pnm::write_pgm(
                        &steps_dir.join(format!("step{}_pair{pi}_img{b}.pgm", t + 1)),
                        &mask,
                    )?;
                }
            }
        }
    }
    let denom = (pairs.len() * 2) as f64;
    let mut csv = String::from("step,mean_precision,mean_jaccard\n");
    for (t, (p, j)) in per_step_metrics.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.6},{:.6}", t + 1, p / denom, j / denom);
    }
    write_file(&out, "per_step.csv", &csv)?;

    // wallclock per step count, measured on a fixed subset
    let timing_pairs = pairs.len().min(10);
    let mut timing = String::from("steps,seconds_per_pair\n");
    for s in 1..=crm.steps {
        let mut crm_s = crm.clone();
        crm_s.steps = s;
        let t0 = Instant::now();
        for group in &pairs[..timing_pairs] {
            let mut tape = Tape::new();
            let refs: Vec<&Tensor> = group.images.iter().collect();
            forward_full(&mut tape, &model, &mcfg, &crm_s, &refs)?;
        }
        let _ = writeln!(
            timing,
            "{s},{:.6}",
            t0.elapsed().as_secs_f64() / timing_pairs as f64
        );
    }
    write_file(&out, "timing.csv", &timing)?;
    println!(
        "per-step eval over {} pairs written to {}",
        pairs.len(),
        out.display()
    );
    Ok(())
}

fn threshold(prob: &Tensor) -> Tensor {
    Tensor::from_fn(prob.shape(), |i| {
        if prob.data()[i] > 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

fn eval_one_group(
    model: &ModelParams,
    cfg: &RunConfig,
    crm: &CrmConfig,
    group: &ImageGroup,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let refs: Vec<&Tensor> = group.images.iter().collect();
    let out = forward_full(&mut tape, model, &cfg.model_config(), crm, &refs)?;
    let mut p_sum = 0.0;
    let mut j_sum = 0.0;
    for (logits, gt) in out.logits.iter().zip(&group.masks) {
        let prob = foreground_probability(&mut tape, logits)?;
        let (p, j) = metrics(&threshold(&prob), gt)?;
        p_sum += p;
        j_sum += j;
    }
    let n = group.images.len() as f64;
    Ok((p_sum / n, j_sum / n))
}

/// One `group_n`-image group per held-out class, seeded per class.
fn class_groups(cfg: &RunConfig) -> Result<Vec<(ShapeClass, ImageGroup)>> {
    cfg.test_classes
        .iter()
        .enumerate()
        .map(|(ci, &class)| {
            let seed = derive_seed(derive_seed(cfg.seed, TEST_SALT ^ 0xC1A5), ci as u64);
            let spec = cfg.scene_spec(&cfg.test_classes, seed);
            Ok((class, generate_for_class(&spec, cfg.group_n, class)?))
        })
        .collect()
}

pub fn cmd_group_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    write_resolved_config(cfg, &out)?;
    let model = load_model(cfg, checkpoint)?;
    let mcfg = cfg.model_config();
    let predictor = ModelPredictor {
        params: &model,
        mcfg: &mcfg,
        crm: cfg.crm_config(),
    };

    let mut csv = String::from("class,strategy,k,precision,jaccard\n");
    for (class, group) in class_groups(cfg)? {
        let scfg = StrategyConfig {
            strategy: cfg.strategy,
            n: cfg.group_n,
            k: cfg.k,
            seed: cfg.seed,
            tuple_cap: cfg.tuple_cap,
        };
        let res = run_group_segmentation(&group.images, &group.masks, &predictor, &scfg)?;
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{:.6}",
            class.name(),
            cfg.strategy.name(),
            cfg.k,
            res.mean_precision(),
            res.mean_jaccard()
        );
        println!(
            "class {}: strategy {} k={} jaccard {:.4}",
            class.name(),
            cfg.strategy.name(),
            cfg.k,
            res.mean_jaccard()
        );
    }
    write_file(&out, "group_eval.csv", &csv)?;
    Ok(())
}

pub fn cmd_strategy_bench(
    cfg: &RunConfig,
    checkpoint: &Path,
    strategies: &[Strategy],
    k_values: &[usize],
) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    write_resolved_config(cfg, &out)?;
    let model = load_model(cfg, checkpoint)?;
    let mcfg = cfg.model_config();
    let groups = class_groups(cfg)?;

    let mut csv = String::from("strategy,k,class,precision,jaccard,wallclock_s\n");
    for &strategy in strategies {
        for &k in k_values {
            for (class, group) in &groups {
                // exhaustive enumeration is only reported for small k
                if strategy == Strategy::A && k > 3 {
                    let _ = writeln!(csv, "{},{},{},-,-,-", strategy.name(), k, class.name());
                    continue;
                }
                let predictor = ModelPredictor {
                    params: &model,
                    mcfg: &mcfg,
                    crm: cfg.crm_config(),
                };
                let scfg = StrategyConfig {
                    strategy,
                    n: cfg.group_n,
                    k,
                    seed: cfg.seed,
                    tuple_cap: cfg.tuple_cap,
                };
                let t0 = Instant::now();
                let res =
                    run_group_segmentation(&group.images, &group.masks, &predictor, &scfg)?;
                let secs = t0.elapsed().as_secs_f64();
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6},{:.6},{:.3}",
                    strategy.name(),
                    k,
                    class.name(),
                    res.mean_precision(),
                    res.mean_jaccard(),
                    secs
                );
                println!(
                    "strategy {} k={} class {}: jaccard {:.4} ({:.1}s)",
                    strategy.name(),
                    k,
                    class.name(),
                    res.mean_jaccard(),
                    secs
                );
            }
        }
    }
    write_file(&out, "strategy_bench.csv", &csv)?;
    Ok(())
}

/// Runs the gradient suites; returns whether everything passed.
pub fn cmd_gradcheck(scope: Scope, seed: u64) -> Result<bool> {
    let results = run_suite(scope, seed)?;
    let mut all_pass = true;
    println!("{:<28} {:>14} {:>10} status", "component", "worst_rel_err", "tol");
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        all_pass &= r.passed();
        println!(
            "{:<28} {:>14.3e} {:>10.0e} {status}",
            r.name, r.worst_rel_err, r.tolerance
        );
    }
    println!(
        "{} checks, worst {:.3e}",
        results.len(),
        results
            .iter()
            .map(|r| r.worst_rel_err)
            .fold(0.0f64, f64::max)
    );
    Ok(all_pass)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    write_resolved_config(cfg, &out)?;

    for (split, count, classes, salt, size) in [
        (
            "train",
            cfg.train_groups,
            &cfg.train_classes,
            crate::train::TRAIN_SALT,
            cfg.k,
        ),
        ("test", cfg.test_groups, &cfg.test_classes, TEST_SALT, 2),
    ] {
        let dir = out.join(split);
        ensure_dir(&dir)?;
        let mut manifest = String::new();
        for gi in 0..count {
            let seed = derive_seed(derive_seed(cfg.seed, salt), gi as u64);
            let group = generate(&cfg.scene_spec(classes, seed), size)?;
            let mut fields = Vec::new();
            for (ii, (img, mask)) in group.images.iter().zip(&group.masks).enumerate() {
                let img_name = format!("group_{gi:04}_img_{ii}.ppm");
                let mask_name = format!("group_{gi:04}_mask_{ii}.pgm");
                pnm::write_ppm(&dir.join(&img_name), img)?;
                pnm::write_pgm(&dir.join(&mask_name), mask)?;
                fields.push(img_name);
                fields.push(mask_name);
            }
            manifest.push_str(&fields.join("\t"));
            manifest.push('\n');
        }
        write_file(&dir, "manifest.tsv", &manifest)?;
        println!("{split}: {count} groups under {}", dir.display());
    }
    Ok(())
}

/// Map an error to the documented exit code:
/// 1 verification failure, 2 usage/config, 3 I/O.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Format(_) => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

//! The six verbs. Every command validates before computing, writes only
//! under its declared output path, and derives all randomness from the seed
//! in the resolved config.

use crate::config::RunSpec;
use crate::{coded, CONFIG_EXIT, CORRUPT_EXIT, TRAIN_EXIT};
use anyhow::{anyhow, bail, Context, Result};
use propetl::backbone::{init_backbone, BackboneWeights};
use propetl::masking::Sparsity;
use propetl::petl::{ProPetlAttachment, Variant};
use propetl::storage::{
    bls_only_mask, bls_vanilla, inspect_checkpoint, load_checkpoint, propetl_report,
    save_checkpoint,
};
use propetl::tasks::{imbalanced_suite, load_tasks, standard_suite, warmup_task, Task, TaskSet};
use propetl::trainer::{
    evaluate, sweep_size, sweep_sparsity, train_multi_task, train_single_task, warmup_backbone,
    write_metrics, SweepPoint,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Tasks come from the configured file or the built-in generated suite.
fn load_suite(spec: &RunSpec) -> Result<TaskSet> {
    match &spec.tasks_file {
        Some(path) => load_tasks(Path::new(path))
            .map_err(|e| coded(CORRUPT_EXIT, anyhow!("{e}")))
            .with_context(|| format!("loading tasks from {path}")),
        None => Ok(standard_suite(spec.seed)),
    }
}

fn pick_task<'a>(spec: &RunSpec, set: &'a TaskSet) -> Result<&'a Task> {
    set.tasks.get(spec.task_index).ok_or_else(|| {
        coded(
            CONFIG_EXIT,
            anyhow!(
                "data.task_index {} out of range; suite has {} tasks",
                spec.task_index,
                set.tasks.len()
            ),
        )
    })
}

/// Deterministic backbone for a run: seeded init, optionally warmed up on
/// the held-out warm-start task so frozen-backbone training has usable
/// features. Reruns with the same spec give identical weights.
fn build_backbone(spec: &RunSpec, classes: Vec<usize>) -> Result<BackboneWeights> {
    let mut cfg = spec.backbone.clone();
    cfg.num_classes = classes;
    let bb = if spec.warmup_steps > 0 {
        warmup_backbone(&cfg, &warmup_task(spec.seed), spec.warmup_steps, spec.warmup_lr, spec.seed)
    } else {
        init_backbone(&cfg, spec.seed)
    };
    bb.map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))
}

fn build_attachment(spec: &RunSpec, num_tasks: usize) -> Result<ProPetlAttachment> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ProPetlAttachment::build(&spec.attachment_spec(num_tasks), &mut rng)
        .map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))
}

fn train_exit(e: propetl::Error) -> anyhow::Error {
    let code = match e {
        propetl::Error::Divergence { .. } | propetl::Error::NonFinite { .. } => TRAIN_EXIT,
        _ => CONFIG_EXIT,
    };
    coded(code, anyhow!("{e}"))
}

pub fn cmd_train(spec: &RunSpec, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| coded(CONFIG_EXIT, anyhow!("cannot create {}: {e}", out.display())))?;
    let set = load_suite(spec)?;

    let manifest = spec.manifest();
    print!("{manifest}");
    std::fs::write(out.join("manifest.txt"), &manifest)
        .map_err(|e| coded(TRAIN_EXIT, anyhow!("{e}")))?;

    let layers = spec.backbone.layers;
    let (rows, att, summary) = if spec.multi {
        let classes: Vec<usize> = set.tasks.iter().map(|t| t.num_classes).collect();
        let mut bb = build_backbone(spec, classes)?;
        let mut att = build_attachment(spec, set.tasks.len())?;
        let report =
            train_multi_task(&mut bb, &mut att, &set, &spec.train).map_err(train_exit)?;
        let mut line = format!(
            "trained {} tasks for {} steps",
            set.tasks.len(),
            spec.train.steps
        );
        if let Some(acc) = report.best_mean_valid_acc {
            line.push_str(&format!("; best mean validation accuracy {acc:.4}"));
        }
        (report.rows, att, line)
    } else {
        let task = pick_task(spec, &set)?;
        let mut bb = build_backbone(spec, vec![task.num_classes])?;
        let mut att = build_attachment(spec, 0)?;
        let report =
            train_single_task(&mut bb, Some(&mut att), 0, task, &spec.train).map_err(train_exit)?;
        let mut line = format!(
            "trained {} for {} steps; final train loss {:.6}",
            task.name, spec.train.steps, report.final_train_loss
        );
        if let Some((loss, acc)) = report.final_valid {
            line.push_str(&format!("; validation loss {loss:.6} accuracy {acc:.4}"));
        }
        (report.rows, att, line)
    };

    write_metrics(&rows, layers, &out.join("metrics.csv"))
        .map_err(|e| coded(TRAIN_EXIT, anyhow!("{e}")))?;
    save_checkpoint(&att, &out.join("checkpoint.pptl"))
        .map_err(|e| coded(TRAIN_EXIT, anyhow!("{e}")))?;
    println!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(spec: &RunSpec, checkpoint: &Path, split: &str) -> Result<()> {
    let set = load_suite(spec)?;
    let att = load_checkpoint(checkpoint).map_err(|e| coded(CORRUPT_EXIT, anyhow!("{e}")))?;
    let (backbone, task_id, task) = if spec.multi {
        let classes: Vec<usize> = set.tasks.iter().map(|t| t.num_classes).collect();
        let bb = build_backbone(spec, classes)?;
        let task = pick_task(spec, &set)?;
        (bb, spec.task_index, task)
    } else {
        let task = pick_task(spec, &set)?;
        (build_backbone(spec, vec![task.num_classes])?, 0, task)
    };
    let examples = task.split(split).map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))?;
    let (loss, acc) = evaluate(&backbone, Some(&att), task_id, examples, spec.train.eval_batch)
        .map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))?;
    println!("task={} split={split} loss={loss:.6} accuracy={acc:.4}", task.name);
    Ok(())
}

pub enum SweepAxis {
    Sparsity,
    Size,
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity" => Ok(SweepAxis::Sparsity),
            "size" => Ok(SweepAxis::Size),
            other => bail!("unknown sweep axis {other:?}; expected sparsity or size"),
        }
    }
}

fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("# sweep-v1\nbn,k,bits,mean,sd,accs\n");
    for p in points {
        let accs: Vec<String> = p.accs.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.bn,
            p.k.as_f64(),
            p.bits,
            p.mean,
            p.sd,
            accs.join(";")
        ));
    }
    out
}

pub fn cmd_sweep(
    spec: &RunSpec,
    axis: SweepAxis,
    grid: &str,
    seeds: &str,
    out: &Path,
) -> Result<()> {
    if spec.variant != Variant::Adapter {
        return Err(coded(CONFIG_EXIT, anyhow!("sweep supports the adapter variant only")));
    }
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| coded(CONFIG_EXIT, anyhow!("seed {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    let set = load_suite(spec)?;
    let task = pick_task(spec, &set)?;
    let backbone = build_backbone(spec, vec![task.num_classes])?;

    let points = match axis {
        SweepAxis::Sparsity => {
            let ks: Vec<Sparsity> = grid
                .split(',')
                .map(|s| s.parse::<Sparsity>().map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}"))))
                .collect::<Result<_>>()?;
            sweep_sparsity(&backbone, task, spec.size, &ks, spec.nonlin, &spec.train, &seeds)
        }
        SweepAxis::Size => {
            let bns: Vec<usize> = grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| coded(CONFIG_EXIT, anyhow!("bn {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            sweep_size(&backbone, task, &bns, spec.k, spec.nonlin, &spec.train, &seeds)
        }
    }
    .map_err(train_exit)?;

    std::fs::create_dir_all(out)
        .map_err(|e| coded(CONFIG_EXIT, anyhow!("cannot create {}: {e}", out.display())))?;
    let csv = sweep_csv(&points);
    std::fs::write(out.join("sweep.csv"), &csv)
        .map_err(|e| coded(TRAIN_EXIT, anyhow!("{e}")))?;
    for p in &points {
        println!(
            "bn={} k={} bits={} accuracy {:.4} +/- {:.4}",
            p.bn,
            p.k.as_f64(),
            p.bits,
            p.mean,
            p.sd
        );
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

pub enum BlsMode {
    Propetl,
    Vanilla,
    OnlyMask,
}

impl std::str::FromStr for BlsMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propetl" => Ok(BlsMode::Propetl),
            "vanilla" => Ok(BlsMode::Vanilla),
            "only_mask" | "only-mask" => Ok(BlsMode::OnlyMask),
            other => bail!("unknown bls mode {other:?}; expected propetl, vanilla, or only_mask"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bls(
    variant: Variant,
    d: usize,
    size: usize,
    layers: usize,
    tasks: usize,
    mode: BlsMode,
    k: Sparsity,
    literal_prefix: bool,
    full_params: Option<u64>,
) -> Result<()> {
    let err2 = |e: propetl::Error| coded(CONFIG_EXIT, anyhow!("{e}"));
    match mode {
        BlsMode::Propetl => {
            let report = propetl_report(variant, d, size, layers, tasks, None).map_err(err2)?;
            for g in &report.groups {
                println!(
                    "group {:<24} count={:<10} width={:<2} bits={}",
                    g.name,
                    g.count,
                    g.width,
                    g.count * g.width as u64
                );
            }
            println!("total_bits={}", report.total_bits);
            if let (Some(base), Some(ratio)) = (report.baseline_bits, report.ratio) {
                println!("vanilla_bits={base} ratio={ratio:.6}");
            }
            if let Some(full) = full_params {
                let r = propetl_report(variant, d, size, layers, tasks, Some(full)).map_err(err2)?;
                if let Some(frac) = r.ratio {
                    println!(
                        "full_model_bits={} fraction_of_full={:.6} ({:.4}%)",
                        r.baseline_bits.unwrap(),
                        frac,
                        frac * 100.0
                    );
                }
            }
        }
        BlsMode::Vanilla => {
            let bits = bls_vanilla(variant, d, size, layers).map_err(err2)?;
            println!("total_bits={bits}");
        }
        BlsMode::OnlyMask => {
            let bits = bls_only_mask(variant, d, size, layers, k, literal_prefix).map_err(err2)?;
            let vanilla = bls_vanilla(variant, d, size, layers).map_err(err2)?;
            println!("total_bits={bits}");
            println!("vanilla_bits={vanilla} ratio={:.6}", bits as f64 / vanilla as f64);
        }
    }
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> Result<()> {
    let summary = inspect_checkpoint(path).map_err(|e| coded(CORRUPT_EXIT, anyhow!("{e}")))?;
    println!("{summary}");
    if summary.tasks > 0 {
        // Hybrid densities need the actual bits, not just the section table.
        let att = load_checkpoint(path).map_err(|e| coded(CORRUPT_EXIT, anyhow!("{e}")))?;
        for layer in 0..att.num_layers {
            for task in 0..summary.tasks as usize {
                if let Some(masks) =
                    att.eval_masks(layer, Some(task)).map_err(|e| coded(CORRUPT_EXIT, anyhow!("{e}")))?
                {
                    for (slot, m) in masks.iter().enumerate() {
                        println!(
                            "hybrid layer={layer} task={task} slot={slot} density={:.4}",
                            m.density()
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_gen_tasks(out: &Path, seed: u64, suite: &str, sizes: (usize, usize)) -> Result<()> {
    let set = match suite {
        "standard" => standard_suite(seed),
        "imbalanced" => imbalanced_suite(seed, [sizes.0, sizes.1]),
        other => {
            return Err(coded(
                CONFIG_EXIT,
                anyhow!("unknown suite {other:?}; expected standard or imbalanced"),
            ))
        }
    };
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| coded(CONFIG_EXIT, anyhow!("cannot create {}: {e}", dir.display())))?;
        }
    }
    propetl::tasks::write_tasks(&set, out).map_err(|e| coded(CONFIG_EXIT, anyhow!("{e}")))?;
    for t in &set.tasks {
        println!(
            "task {} classes={} train={} valid={} test={}",
            t.name,
            t.num_classes,
            t.train.len(),
            t.valid.len(),
            t.test.len()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

//! Storage-matched baselines and grid sweeps. Every baseline is sized so
//! its bit-level storage lands within 5% of the shared-prototype reference
//! configuration, then trained under the identical protocol; sweeps fan the
//! independent runs out across threads without affecting their results.

use super::{evaluate, mean_sd, train_single_task, TrainConfig};
use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::masking::{CombineMode, Sparsity};
use crate::petl::{AttachMode, AttachmentSpec, Nonlinearity, ProPetlAttachment, Variant, VariantConfig};
use crate::storage::{bls_only_mask, bls_propetl, bls_vanilla};
use crate::tasks::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Shared prototype with learned per-layer masks.
    Propetl,
    /// Shared prototype with fresh uniform masks every step.
    RandomMask,
    /// Per-layer modules at the reference bottleneck, sparsified until the
    /// storage matches.
    OnlyMaskSameBn,
    /// Per-layer modules at the reference sparsity, shrunk until the
    /// storage matches.
    OnlyMaskSameK,
    /// One shared module without masks, widened until the storage matches.
    OnlyShare,
}

pub const ALL_ABLATION_MODES: [AblationMode; 5] = [
    AblationMode::Propetl,
    AblationMode::RandomMask,
    AblationMode::OnlyMaskSameBn,
    AblationMode::OnlyMaskSameK,
    AblationMode::OnlyShare,
];

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Propetl => "propetl",
            AblationMode::RandomMask => "random_mask",
            AblationMode::OnlyMaskSameBn => "only_mask_same_bn",
            AblationMode::OnlyMaskSameK => "only_mask_same_k",
            AblationMode::OnlyShare => "only_share",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propetl" => Ok(AblationMode::Propetl),
            "random_mask" => Ok(AblationMode::RandomMask),
            "only_mask_same_bn" => Ok(AblationMode::OnlyMaskSameBn),
            "only_mask_same_k" => Ok(AblationMode::OnlyMaskSameK),
            "only_share" => Ok(AblationMode::OnlyShare),
            other => Err(Error::config(format!("unknown ablation mode {other:?}"))),
        }
    }
}

/// A baseline's resolved configuration and its storage cost in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeBudget {
    pub mode: AblationMode,
    pub bn: usize,
    pub k: Sparsity,
    pub bits: u64,
}

fn round_div(num: f64, den: f64) -> usize {
    (num / den).round() as usize
}

fn check_budget(mode: AblationMode, bits: u64, target: u64) -> Result<()> {
    let off = (bits as f64 - target as f64).abs() / target as f64;
    if off > BUDGET_TOLERANCE {
        return Err(Error::config(format!(
            "{mode}: matched storage {bits} is {:.1}% away from target {target}",
            off * 100.0
        )));
    }
    Ok(())
}

/// Size each requested baseline of an adapter reference configuration
/// (bottleneck `bn`, kept fraction `k`, `layers` layers at width `d`) so
/// that its bit cost lands within 5% of the shared-prototype cost. Rejects
/// dimensions too small to match (e.g. a bottleneck that would shrink
/// below 1, or a bit grid too coarse to land inside the tolerance).
pub fn budget_match_modes(
    d: usize,
    bn: usize,
    k: Sparsity,
    layers: usize,
    modes: &[AblationMode],
) -> Result<Vec<ModeBudget>> {
    let target = bls_propetl(Variant::Adapter, d, bn, layers)?;
    let df = d as f64;
    let lf = layers as f64;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let budget = match mode {
            AblationMode::Propetl | AblationMode::RandomMask => {
                ModeBudget { mode, bn, k, bits: target }
            }
            AblationMode::OnlyShare => {
                // 32 * (2*bn'*d + bn' + d) = target
                let bn_s = round_div(target as f64 / 32.0 - df, 2.0 * df + 1.0);
                if bn_s < 1 {
                    return Err(Error::config(format!(
                        "{mode}: no bottleneck >= 1 matches {target} bits"
                    )));
                }
                let n = 2 * bn_s as u64 * d as u64 + bn_s as u64 + d as u64;
                ModeBudget { mode, bn: bn_s, k: Sparsity::FULL, bits: 32 * n }
            }
            AblationMode::OnlyMaskSameK => {
                // 32 * L * (2*k*bn'*d + bn' + d) = target
                let bn_m =
                    round_div(target as f64 / (32.0 * lf) - df, 2.0 * k.as_f64() * df + 1.0);
                if bn_m < 1 {
                    return Err(Error::config(format!(
                        "{mode}: no bottleneck >= 1 matches {target} bits"
                    )));
                }
                let bits = bls_only_mask(Variant::Adapter, d, bn_m, layers, k, false)?;
                ModeBudget { mode, bn: bn_m, k, bits }
            }
            AblationMode::OnlyMaskSameBn => {
                // 32 * L * (k'*2*bn*d + bn + d) = target, solved exactly as
                // a rational kept fraction.
                let unmaskable = 32 * layers as u64 * (bn as u64 + d as u64);
                let den = 32 * layers as u64 * 2 * bn as u64 * d as u64;
                let num = target.checked_sub(unmaskable).ok_or_else(|| {
                    Error::config(format!("{mode}: biases alone exceed the {target}-bit target"))
                })?;
                let k_m = Sparsity::ratio(num, den)?;
                let bits = bls_only_mask(Variant::Adapter, d, bn, layers, k_m, false)?;
                ModeBudget { mode, bn, k: k_m, bits }
            }
        };
        check_budget(mode, budget.bits, target)?;
        out.push(budget);
    }
    Ok(out)
}

/// All five baselines, storage-matched.
pub fn budget_match(d: usize, bn: usize, k: Sparsity, layers: usize) -> Result<Vec<ModeBudget>> {
    budget_match_modes(d, bn, k, layers, &ALL_ABLATION_MODES)
}

impl ModeBudget {
    /// Attachment spec realizing this budget (single-task).
    pub fn spec(&self, d: usize, layers: usize, nonlin: Nonlinearity) -> AttachmentSpec {
        let mode = match self.mode {
            AblationMode::Propetl => AttachMode::Propetl,
            AblationMode::RandomMask => AttachMode::RandomMask,
            AblationMode::OnlyMaskSameBn | AblationMode::OnlyMaskSameK => AttachMode::OnlyMask,
            AblationMode::OnlyShare => AttachMode::OnlyShare,
        };
        AttachmentSpec {
            variant_cfg: VariantConfig::Adapter { bn: self.bn, d, nonlin },
            mode,
            k: self.k,
            num_layers: layers,
            num_tasks: 0,
            combine: CombineMode::Or,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub budget: ModeBudget,
    /// Test accuracy per seed, in seed order.
    pub accs: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub target_bits: u64,
    pub rows: Vec<AblationRow>,
}

/// One storage-matched run: build the attachment from `spec` with the
/// seed's own generator, train on the task, report test accuracy of the
/// frozen final model.
fn run_budgeted(
    backbone: &BackboneWeights,
    task: &Task,
    spec: &AttachmentSpec,
    train: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut att = ProPetlAttachment::build(spec, &mut rng)?;
    let mut bb = backbone.clone();
    let mut cfg = train.clone();
    cfg.seed = seed;
    train_single_task(&mut bb, Some(&mut att), 0, task, &cfg)?;
    let (_, acc) = evaluate(&bb, Some(&att), 0, &task.test, cfg.eval_batch)?;
    Ok(acc)
}

/// Train every storage-matched baseline across the seeds. Runs are
/// independent, so they execute in parallel; results are keyed by
/// (mode, seed) and therefore identical at any thread count.
pub fn run_ablation(
    backbone: &BackboneWeights,
    task: &Task,
    bn: usize,
    k: Sparsity,
    nonlin: Nonlinearity,
    train: &TrainConfig,
    seeds: &[u64],
    modes: &[AblationMode],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    if modes.is_empty() {
        return Err(Error::config("no ablation modes selected"));
    }
    let d = backbone.cfg.hidden;
    let layers = backbone.cfg.layers;
    let budgets = budget_match_modes(d, bn, k, layers, modes)?;
    let target_bits = bls_propetl(Variant::Adapter, d, bn, layers)?;

    let jobs: Vec<(usize, u64)> = budgets
        .iter()
        .enumerate()
        .flat_map(|(bi, _)| seeds.iter().map(move |&s| (bi, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(bi, seed)| {
            let spec = budgets[bi].spec(d, layers, nonlin);
            run_budgeted(backbone, task, &spec, train, seed)
        })
        .collect::<Result<_>>()?;

    let rows = budgets
        .iter()
        .enumerate()
        .map(|(bi, &budget)| {
            let accs: Vec<f64> = jobs
                .iter()
                .zip(&accs)
                .filter(|((j, _), _)| *j == bi)
                .map(|(_, &a)| a)
                .collect();
            let (mean, sd) = mean_sd(&accs);
            AblationRow { budget, accs, mean, sd }
        })
        .collect();
    Ok(AblationReport { target_bits, rows })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub bn: usize,
    pub k: Sparsity,
    pub bits: u64,
    pub accs: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

fn run_grid(
    backbone: &BackboneWeights,
    task: &Task,
    points: &[(usize, Sparsity)],
    nonlin: Nonlinearity,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if points.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one point and one seed"));
    }
    let d = backbone.cfg.hidden;
    let layers = backbone.cfg.layers;
    let jobs: Vec<(usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| seeds.iter().map(move |&s| (pi, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(pi, seed)| {
            let (bn, k) = points[pi];
            let spec = AttachmentSpec {
                variant_cfg: VariantConfig::Adapter { bn, d, nonlin },
                mode: if k.is_full() { AttachMode::OnlyShare } else { AttachMode::Propetl },
                k,
                num_layers: layers,
                num_tasks: 0,
                combine: CombineMode::Or,
            };
            run_budgeted(backbone, task, &spec, train, seed)
        })
        .collect::<Result<_>>()?;

    points
        .iter()
        .enumerate()
        .map(|(pi, &(bn, k))| {
            let point_accs: Vec<f64> = jobs
                .iter()
                .zip(&accs)
                .filter(|((j, _), _)| *j == pi)
                .map(|(_, &a)| a)
                .collect();
            let (mean, sd) = mean_sd(&point_accs);
            let bits = if k.is_full() {
                bls_vanilla(Variant::Adapter, d, bn, 1)?
            } else {
                bls_propetl(Variant::Adapter, d, bn, layers)?
            };
            Ok(SweepPoint { bn, k, bits, accs: point_accs, mean, sd })
        })
        .collect()
}

/// Accuracy across kept fractions at a fixed bottleneck. `k = 1` runs as
/// pure sharing (no masks, one module) so the endpoint is the true
/// mask-free model.
pub fn sweep_sparsity(
    backbone: &BackboneWeights,
    task: &Task,
    bn: usize,
    ks: &[Sparsity],
    nonlin: Nonlinearity,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    let points: Vec<(usize, Sparsity)> = ks.iter().map(|&k| (bn, k)).collect();
    run_grid(backbone, task, &points, nonlin, train, seeds)
}

/// Accuracy across bottleneck widths at a fixed kept fraction.
pub fn sweep_size(
    backbone: &BackboneWeights,
    task: &Task,
    bns: &[usize],
    k: Sparsity,
    nonlin: Nonlinearity,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    let points: Vec<(usize, Sparsity)> = bns.iter().map(|&bn| (bn, k)).collect();
    run_grid(backbone, task, &points, nonlin, train, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, TransformerConfig};
    use crate::tasks::{generate_task, GenSpec, TaskRule};

    #[test]
    fn reference_dims_match_published_baseline_sizes() {
        let k = Sparsity::ratio(1, 2).unwrap();
        let budgets = budget_match(768, 64, k, 12).unwrap();
        let by_mode = |m: AblationMode| budgets.iter().find(|b| b.mode == m).unwrap();

        let target = bls_propetl(Variant::Adapter, 768, 64, 12).unwrap();
        assert_eq!(target, 4_352_000);
        assert_eq!(by_mode(AblationMode::Propetl).bits, target);
        assert_eq!(by_mode(AblationMode::RandomMask).bits, target);

        // Widened shared module: (4,352,000/32 - 768) / 1537 rounds to 88.
        let share = by_mode(AblationMode::OnlyShare);
        assert_eq!(share.bn, 88);
        assert!(share.k.is_full());

        // Same sparsity, narrower: (4,352,000/384 - 768) / 769 rounds to 14.
        let same_k = by_mode(AblationMode::OnlyMaskSameK);
        assert_eq!(same_k.bn, 14);
        assert_eq!(same_k.k, k);

        // Same bottleneck, sparser: exact rational near 0.1068.
        let same_bn = by_mode(AblationMode::OnlyMaskSameBn);
        assert_eq!(same_bn.bn, 64);
        assert!((same_bn.k.as_f64() - 0.106825).abs() < 1e-4, "{:?}", same_bn.k);

        for b in &budgets {
            let off = (b.bits as f64 - target as f64).abs() / target as f64;
            assert!(off <= BUDGET_TOLERANCE, "{}: {off}", b.mode);
        }
    }

    #[test]
    fn impossible_budgets_are_rejected() {
        // A 1-wide bottleneck over many layers: per-layer bias storage alone
        // exceeds the shared-prototype target, so no baseline can match it.
        let k = Sparsity::ratio(1, 10).unwrap();
        let err = budget_match(8, 1, k, 64).unwrap_err().to_string();
        assert!(err.contains("only_mask"), "{err}");
        // At tiny dims the only_mask bit grid is coarser than 5% of the
        // target; matching just that mode is rejected while the others fit.
        let half = Sparsity::ratio(1, 2).unwrap();
        assert!(
            budget_match_modes(8, 4, half, 2, &[AblationMode::OnlyMaskSameK]).is_err()
        );
        assert!(
            budget_match_modes(8, 4, half, 2, &[AblationMode::OnlyShare, AblationMode::Propetl])
                .is_ok()
        );
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in ALL_ABLATION_MODES {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("nope".parse::<AblationMode>().is_err());
    }

    #[test]
    fn small_ablation_runs_all_modes_deterministically() {
        let cfg = TransformerConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 16,
            max_seq: 12,
            num_classes: vec![2],
        };
        let backbone = init_backbone(&cfg, 5).unwrap();
        let task = generate_task(
            &GenSpec {
                rule: TaskRule::Contains { token: 3 },
                vocab: 16,
                seq_len: 8,
                train: 48,
                valid: 16,
                test: 16,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let train = TrainConfig {
            lambda_p: 5e-3,
            lambda_m: 3e-2,
            steps: 6,
            batch_size: 8,
            ..TrainConfig::default()
        };
        // bn = 9 gives every baseline a bit grid fine enough to land
        // within the 5% budget tolerance at this tiny width.
        let k = Sparsity::ratio(1, 2).unwrap();
        let report =
            run_ablation(&backbone, &task, 9, k, Nonlinearity::Relu, &train, &[1, 2], &ALL_ABLATION_MODES)
                .unwrap();
        assert_eq!(report.rows.len(), 5);
        for row in &report.rows {
            assert_eq!(row.accs.len(), 2);
            for &a in &row.accs {
                assert!((0.0..=1.0).contains(&a));
            }
        }
        // Same inputs, same report, regardless of the parallel schedule.
        let again =
            run_ablation(&backbone, &task, 9, k, Nonlinearity::Relu, &train, &[1, 2], &ALL_ABLATION_MODES)
                .unwrap();
        for (a, b) in report.rows.iter().zip(&again.rows) {
            assert_eq!(a.accs, b.accs);
        }
    }

    #[test]
    fn sparsity_sweep_covers_full_sharing_endpoint() {
        let cfg = TransformerConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 16,
            max_seq: 12,
            num_classes: vec![2],
        };
        let backbone = init_backbone(&cfg, 5).unwrap();
        let task = generate_task(
            &GenSpec {
                rule: TaskRule::Contains { token: 3 },
                vocab: 16,
                seq_len: 8,
                train: 32,
                valid: 16,
                test: 16,
            },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let train = TrainConfig { steps: 3, batch_size: 4, ..TrainConfig::default() };
        let ks = [Sparsity::ratio(3, 10).unwrap(), Sparsity::FULL];
        let points =
            sweep_sparsity(&backbone, &task, 4, &ks, Nonlinearity::Relu, &train, &[9]).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].k, ks[0]);
        assert!(points[1].k.is_full());
        // The mask-free endpoint stores one unmasked module.
        assert_eq!(points[1].bits, 32 * (2 * 4 * 8 + 4 + 8));
    }
}

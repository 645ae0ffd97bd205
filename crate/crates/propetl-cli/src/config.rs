//! Run configuration: defaults, overlaid by an optional flat key = value
//! config file, overlaid by command-line flags. The fully resolved map is
//! echoed into the run manifest so every artifact records how it was made.

use anyhow::{anyhow, bail, Context, Result};
use propetl::backbone::TransformerConfig;
use propetl::masking::{CombineMode, Sparsity};
use propetl::petl::{AttachMode, AttachmentSpec, Nonlinearity, Variant, VariantConfig};
use propetl::trainer::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Section-qualified key, e.g. "train.steps". Values stay strings until the
/// typed spec is built, so the manifest shows exactly what was resolved.
pub type KeyMap = BTreeMap<String, String>;

pub fn defaults() -> KeyMap {
    let pairs = [
        ("backbone.layers", "2"),
        ("backbone.hidden", "32"),
        ("backbone.heads", "2"),
        ("backbone.ffn", "64"),
        ("backbone.vocab", "16"),
        ("backbone.max_seq", "12"),
        ("backbone.warmup_steps", "0"),
        ("backbone.warmup_lr", "0.001"),
        ("module.variant", "adapter"),
        ("module.size", "8"),
        ("module.mode", "propetl"),
        ("module.k", "1/2"),
        ("module.nonlin", "relu"),
        ("module.combine", "or"),
        ("module.alpha", "16"),
        ("module.reparam", "0"),
        ("train.lambda_p", "0.001"),
        ("train.lambda_m", "0.003"),
        ("train.steps", "100"),
        ("train.batch_size", "16"),
        ("train.optimizer", "adamw"),
        ("train.schedule", "constant"),
        ("train.eval_every", "0"),
        ("train.eval_batch", "64"),
        ("train.multi", "false"),
        ("data.tasks_file", ""),
        ("data.task_index", "0"),
        ("run.seed", "0"),
    ];
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Parse a flat `key = value` file with `[section]` headers. `#` starts a
/// comment; blank lines are ignored. Unknown keys are rejected with their
/// line number so typos cannot silently fall back to defaults.
pub fn parse_config_file(path: &Path, map: &mut KeyMap) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let known = defaults();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| anyhow!("{}:{}: unterminated section header", path.display(), i + 1))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
        let full = if section.is_empty() {
            key.trim().to_string()
        } else {
            format!("{section}.{}", key.trim())
        };
        if !known.contains_key(&full) {
            bail!("{}:{}: unknown key {full:?}", path.display(), i + 1);
        }
        map.insert(full, value.trim().to_string());
    }
    Ok(())
}

/// Everything a run needs, fully typed and validated.
pub struct RunSpec {
    pub backbone: TransformerConfig,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub variant: Variant,
    pub size: usize,
    pub mode: AttachMode,
    pub k: Sparsity,
    pub nonlin: Nonlinearity,
    pub combine: CombineMode,
    pub alpha: f32,
    pub reparam: usize,
    pub train: TrainConfig,
    pub multi: bool,
    pub tasks_file: Option<String>,
    pub task_index: usize,
    pub seed: u64,
    /// The resolved string map, for the manifest.
    pub resolved: KeyMap,
}

fn get<T: FromStr>(map: &KeyMap, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = map.get(key).ok_or_else(|| anyhow!("missing key {key}"))?;
    raw.parse::<T>().map_err(|e| anyhow!("key {key} = {raw:?}: {e}"))
}

impl RunSpec {
    /// `k_explicit` says whether module.k came from the file or a flag
    /// rather than the default; only_share takes no keep fraction.
    pub fn from_map(map: KeyMap, k_explicit: bool) -> Result<RunSpec> {
        let mode: AttachMode = get(&map, "module.mode")?;
        if mode == AttachMode::OnlyShare && k_explicit {
            bail!("module.k has no meaning for mode only_share; remove it");
        }
        let k = if mode == AttachMode::OnlyShare {
            Sparsity::FULL
        } else {
            get(&map, "module.k")?
        };
        let train = TrainConfig {
            lambda_p: get(&map, "train.lambda_p")?,
            lambda_m: get(&map, "train.lambda_m")?,
            steps: get(&map, "train.steps")?,
            batch_size: get(&map, "train.batch_size")?,
            optimizer: get(&map, "train.optimizer")?,
            schedule: get(&map, "train.schedule")?,
            seed: get(&map, "run.seed")?,
            eval_every: get(&map, "train.eval_every")?,
            eval_batch: get(&map, "train.eval_batch")?,
            train_backbone: false,
            record_walltime: false,
        };
        train.validate().map_err(|e| anyhow!("{e}"))?;
        let tasks_file: String = map.get("data.tasks_file").cloned().unwrap_or_default();
        let spec = RunSpec {
            backbone: TransformerConfig {
                layers: get(&map, "backbone.layers")?,
                hidden: get(&map, "backbone.hidden")?,
                heads: get(&map, "backbone.heads")?,
                ffn: get(&map, "backbone.ffn")?,
                vocab: get(&map, "backbone.vocab")?,
                max_seq: get(&map, "backbone.max_seq")?,
                num_classes: vec![],
            },
            warmup_steps: get(&map, "backbone.warmup_steps")?,
            warmup_lr: get(&map, "backbone.warmup_lr")?,
            variant: get(&map, "module.variant")?,
            size: get(&map, "module.size")?,
            mode,
            k,
            nonlin: get(&map, "module.nonlin")?,
            combine: get(&map, "module.combine")?,
            alpha: get(&map, "module.alpha")?,
            reparam: get(&map, "module.reparam")?,
            train,
            multi: parse_bool(&map, "train.multi")?,
            tasks_file: if tasks_file.is_empty() { None } else { Some(tasks_file) },
            task_index: get(&map, "data.task_index")?,
            seed: get(&map, "run.seed")?,
            resolved: map,
        };
        if spec.size == 0 {
            bail!("module.size must be positive");
        }
        Ok(spec)
    }

    pub fn variant_cfg(&self) -> VariantConfig {
        let d = self.backbone.hidden;
        match self.variant {
            Variant::Adapter => VariantConfig::Adapter { bn: self.size, d, nonlin: self.nonlin },
            Variant::Lora => VariantConfig::Lora { bn: self.size, d, alpha: self.alpha },
            Variant::Prefix => VariantConfig::Prefix {
                l: self.size,
                r: if self.reparam == 0 { None } else { Some(self.reparam) },
                d,
            },
        }
    }

    pub fn attachment_spec(&self, num_tasks: usize) -> AttachmentSpec {
        AttachmentSpec {
            variant_cfg: self.variant_cfg(),
            mode: self.mode,
            k: self.k,
            num_layers: self.backbone.layers,
            num_tasks,
            combine: self.combine,
        }
    }

    /// Deterministic manifest: sorted key = value lines, sections implicit
    /// in the dotted keys.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# manifest-v1\n");
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn parse_bool(map: &KeyMap, key: &str) -> Result<bool> {
    let raw = map.get(key).ok_or_else(|| anyhow!("missing key {key}"))?;
    match raw.as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(anyhow!("key {key} = {other:?}: expected true/false")),
    }
}

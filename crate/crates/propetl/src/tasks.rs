//! Synthetic classification tasks with exact-rule labels. Each generator
//! builds sequences label-first, so every dataset is class-balanced and its
//! labels can be re-derived from the rule with 100% agreement.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub name: String,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    /// Temperature for size-proportional task sampling.
    pub sampling_temperature: f64,
}

/// Exact labeling rules over token sequences; all binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRule {
    /// Does `token` appear at least once?
    Contains { token: usize },
    /// Is the count of `token` odd?
    CountParity { token: usize },
    /// Does `a` appear strictly more often than `b`?
    CountCompare { a: usize, b: usize },
}

impl TaskRule {
    pub fn label(&self, tokens: &[usize]) -> usize {
        match *self {
            TaskRule::Contains { token } => tokens.contains(&token) as usize,
            TaskRule::CountParity { token } => {
                tokens.iter().filter(|&&t| t == token).count() % 2
            }
            TaskRule::CountCompare { a, b } => {
                let ca = tokens.iter().filter(|&&t| t == a).count();
                let cb = tokens.iter().filter(|&&t| t == b).count();
                (ca > cb) as usize
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TaskRule::Contains { token } => format!("contains{token}"),
            TaskRule::CountParity { token } => format!("parity{token}"),
            TaskRule::CountCompare { a, b } => format!("compare{a}v{b}"),
        }
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    /// Tokens the rule watches; fillers must avoid these.
    fn special_tokens(&self) -> Vec<usize> {
        match *self {
            TaskRule::Contains { token } | TaskRule::CountParity { token } => vec![token],
            TaskRule::CountCompare { a, b } => vec![a, b],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub rule: TaskRule,
    pub vocab: usize,
    pub seq_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn filler(vocab: usize, avoid: &[usize], rng: &mut ChaCha8Rng) -> usize {
    loop {
        let t = rng.random_range(0..vocab);
        if !avoid.contains(&t) {
            return t;
        }
    }
}

/// One sequence whose rule-derived label equals `label`, built by placing
/// the exact number of watched tokens and filling the rest randomly.
fn build_example(spec: &GenSpec, label: usize, rng: &mut ChaCha8Rng) -> Example {
    let avoid = spec.rule.special_tokens();
    let mut tokens: Vec<usize> =
        (0..spec.seq_len).map(|_| filler(spec.vocab, &avoid, rng)).collect();
    match spec.rule {
        TaskRule::Contains { token } => {
            if label == 1 {
                let count = rng.random_range(1..=3.min(spec.seq_len));
                let mut pos: Vec<usize> = (0..spec.seq_len).collect();
                pos.shuffle(rng);
                for &p in &pos[..count] {
                    tokens[p] = token;
                }
            }
        }
        TaskRule::CountParity { token } => {
            // Parity matches the label: 0 or 2 occurrences vs 1 or 3.
            let count = label + 2 * rng.random_range(0..=1usize);
            let mut pos: Vec<usize> = (0..spec.seq_len).collect();
            pos.shuffle(rng);
            for &p in &pos[..count.min(spec.seq_len)] {
                tokens[p] = token;
            }
        }
        TaskRule::CountCompare { a, b } => {
            let (ca, cb) = if label == 1 {
                let ca = rng.random_range(1..=3usize);
                (ca, rng.random_range(0..ca))
            } else {
                let cb = rng.random_range(0..=3usize);
                (rng.random_range(0..=cb), cb)
            };
            let mut pos: Vec<usize> = (0..spec.seq_len).collect();
            pos.shuffle(rng);
            for &p in &pos[..ca] {
                tokens[p] = a;
            }
            for &p in &pos[ca..ca + cb] {
                tokens[p] = b;
            }
        }
    }
    debug_assert_eq!(spec.rule.label(&tokens), label);
    Example { tokens, label }
}

fn build_split(spec: &GenSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    // Alternate labels for exact balance, then shuffle the order.
    let mut out: Vec<Example> =
        (0..count).map(|i| build_example(spec, i % 2, rng)).collect();
    out.shuffle(rng);
    out
}

pub fn generate_task(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<Task> {
    if spec.vocab < 4 {
        return Err(Error::invalid("generate_task", "vocab must be at least 4"));
    }
    if spec.seq_len < 8 {
        return Err(Error::invalid(
            "generate_task",
            "sequences shorter than 8 leave no room for watched-token placement",
        ));
    }
    let special = spec.rule.special_tokens();
    if special.iter().any(|&t| t >= spec.vocab) {
        return Err(Error::invalid("generate_task", "rule token outside vocab"));
    }
    if let TaskRule::CountCompare { a, b } = spec.rule {
        if a == b {
            return Err(Error::invalid("generate_task", "compare rule needs two distinct tokens"));
        }
    }
    if spec.train == 0 {
        return Err(Error::invalid("generate_task", "empty train split"));
    }
    Ok(Task {
        name: spec.rule.name(),
        num_classes: spec.rule.num_classes(),
        train: build_split(spec, spec.train, rng),
        valid: build_split(spec, spec.valid, rng),
        test: build_split(spec, spec.test, rng),
    })
}

pub const SUITE_VOCAB: usize = 16;
pub const SUITE_SEQ_LEN: usize = 12;

/// Three-task classification suite over one shared vocabulary.
pub fn standard_suite(seed: u64) -> TaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rules = [
        TaskRule::Contains { token: 3 },
        TaskRule::Contains { token: 7 },
        TaskRule::CountCompare { a: 4, b: 6 },
    ];
    let tasks = rules
        .iter()
        .map(|&rule| {
            generate_task(
                &GenSpec {
                    rule,
                    vocab: SUITE_VOCAB,
                    seq_len: SUITE_SEQ_LEN,
                    train: 512,
                    valid: 128,
                    test: 128,
                },
                &mut rng,
            )
            .expect("suite spec is valid")
        })
        .collect();
    TaskSet { tasks, sampling_temperature: 10.0 }
}

/// Held-out task for backbone warmup; disjoint from the standard suite's
/// watched tokens.
pub fn warmup_task(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_task(
        &GenSpec {
            rule: TaskRule::Contains { token: 11 },
            vocab: SUITE_VOCAB,
            seq_len: SUITE_SEQ_LEN,
            train: 1024,
            valid: 128,
            test: 128,
        },
        &mut rng,
    )
    .expect("warmup spec is valid")
}

/// Two tasks with heavily skewed train sizes, for temperature-sampling
/// checks.
pub fn imbalanced_suite(seed: u64, sizes: [usize; 2]) -> TaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rules = [TaskRule::Contains { token: 3 }, TaskRule::CountParity { token: 5 }];
    let tasks = rules
        .iter()
        .zip(sizes)
        .map(|(&rule, n)| {
            generate_task(
                &GenSpec {
                    rule,
                    vocab: SUITE_VOCAB,
                    seq_len: SUITE_SEQ_LEN,
                    train: n,
                    valid: 64,
                    test: 64,
                },
                &mut rng,
            )
            .expect("imbalanced spec is valid")
        })
        .collect();
    TaskSet { tasks, sampling_temperature: 10.0 }
}

// ---------------------------------------------------------------------------
// Text serialization: "# tasks-v1" header, then per task a header line,
// per split a marker line, one example per line as "label tok tok ...".
// ---------------------------------------------------------------------------

pub fn write_tasks(set: &TaskSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# tasks-v1 temperature={}", set.sampling_temperature).unwrap();
    for task in &set.tasks {
        writeln!(out, "task {} classes={}", task.name, task.num_classes).unwrap();
        for (split, examples) in
            [("train", &task.train), ("valid", &task.valid), ("test", &task.test)]
        {
            writeln!(out, "split {split}").unwrap();
            for ex in examples {
                write!(out, "{}", ex.label).unwrap();
                for t in &ex.tokens {
                    write!(out, " {t}").unwrap();
                }
                out.push('\n');
            }
        }
        writeln!(out, "end").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<TaskSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::corrupt(format!("tasks file line {}: {msg}", line + 1));

    let (_, first) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let temp_str = first
        .strip_prefix("# tasks-v1 temperature=")
        .ok_or_else(|| bad(0, "missing tasks-v1 header"))?;
    let sampling_temperature: f64 =
        temp_str.trim().parse().map_err(|_| bad(0, "bad temperature"))?;

    let mut tasks = Vec::new();
    let mut current: Option<Task> = None;
    let mut split: Option<&str> = None;
    for (ln, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("task ") {
            if current.is_some() {
                return Err(bad(ln, "task begins before previous task ended"));
            }
            let (name, classes) = rest
                .split_once(" classes=")
                .ok_or_else(|| bad(ln, "task line missing classes="))?;
            let num_classes: usize =
                classes.trim().parse().map_err(|_| bad(ln, "bad class count"))?;
            if num_classes < 2 {
                return Err(bad(ln, "task needs at least two classes"));
            }
            current = Some(Task {
                name: name.trim().to_string(),
                num_classes,
                train: Vec::new(),
                valid: Vec::new(),
                test: Vec::new(),
            });
            split = None;
        } else if let Some(rest) = line.strip_prefix("split ") {
            if current.is_none() {
                return Err(bad(ln, "split outside a task"));
            }
            split = Some(match rest.trim() {
                "train" => "train",
                "valid" => "valid",
                "test" => "test",
                other => return Err(bad(ln, &format!("unknown split {other:?}"))),
            });
        } else if line == "end" {
            let task = current.take().ok_or_else(|| bad(ln, "end outside a task"))?;
            if task.train.is_empty() {
                return Err(bad(ln, "task has an empty train split"));
            }
            tasks.push(task);
            split = None;
        } else {
            let task = current.as_mut().ok_or_else(|| bad(ln, "example outside a task"))?;
            let split = split.ok_or_else(|| bad(ln, "example outside a split"))?;
            let mut nums = line.split_ascii_whitespace();
            let label: usize = nums
                .next()
                .ok_or_else(|| bad(ln, "empty example"))?
                .parse()
                .map_err(|_| bad(ln, "bad label"))?;
            if label >= task.num_classes {
                return Err(bad(ln, "label outside class range"));
            }
            let tokens: Vec<usize> = nums
                .map(|t| t.parse().map_err(|_| bad(ln, "bad token id")))
                .collect::<Result<_>>()?;
            if tokens.is_empty() {
                return Err(bad(ln, "example has no tokens"));
            }
            let ex = Example { tokens, label };
            match split {
                "train" => task.train.push(ex),
                "valid" => task.valid.push(ex),
                _ => task.test.push(ex),
            }
        }
    }
    if current.is_some() {
        return Err(Error::corrupt("tasks file ends inside a task"));
    }
    if tasks.is_empty() {
        return Err(Error::corrupt("tasks file holds no tasks"));
    }
    Ok(TaskSet { tasks, sampling_temperature })
}

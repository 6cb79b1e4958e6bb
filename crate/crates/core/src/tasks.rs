//! Deterministic synthetic task sequences.
//!
//! Three families, all generated from a single seed:
//!
//! - `RotatedGaussians`: class means on a circle in the first two feature
//!   dimensions; task `t` rotates the same base samples by `t * drift`
//!   radians. Remaining dimensions are unit Gaussian noise.
//! - `PermutedFeatures`: one base Gaussian-cluster task; task `t > 0` applies
//!   its own feature permutation.
//! - `SplitClasses`: `num_classes` clusters split evenly over the tasks, labels
//!   remapped to `0..num_classes / num_tasks` so every task shares one head.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

const CLUSTER_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskKind {
    #[default]
    RotatedGaussians,
    PermutedFeatures,
    SplitClasses,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotated_gaussians" => Ok(TaskKind::RotatedGaussians),
            "permuted_features" => Ok(TaskKind::PermutedFeatures),
            "split_classes" => Ok(TaskKind::SplitClasses),
            other => Err(Error::InvalidConfig(format!("unknown task kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::RotatedGaussians => "rotated_gaussians",
            TaskKind::PermutedFeatures => "permuted_features",
            TaskKind::SplitClasses => "split_classes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub num_tasks: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Rotation increment per task in radians (rotated_gaussians only).
    pub drift: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::RotatedGaussians,
            num_tasks: 6,
            train_samples: 2000,
            test_samples: 500,
            input_dim: 16,
            num_classes: 4,
            seed: 0,
            drift: PI / 6.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be at least 1".into());
        }
        if !self.drift.is_finite() {
            return bad(format!("drift {} is not finite", self.drift));
        }
        match self.kind {
            TaskKind::RotatedGaussians if self.input_dim < 2 => {
                bad("rotated_gaussians needs input_dim >= 2".into())
            }
            TaskKind::SplitClasses if !self.num_classes.is_multiple_of(self.num_tasks) => {
                bad(format!(
                    "split_classes needs num_classes ({}) divisible by num_tasks ({})",
                    self.num_classes, self.num_tasks
                ))
            }
            _ => Ok(()),
        }
    }

    /// Width of the shared classifier head.
    pub fn output_classes(&self) -> usize {
        match self.kind {
            TaskKind::SplitClasses => self.num_classes / self.num_tasks,
            _ => self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Original class of each label before remapping, in label order.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub config: TaskConfig,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes `task_{k}_{train,test}.csv` (one-based `k`) with columns
    /// `x0..x{d-1},label`.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (k, task) in self.tasks.iter().enumerate() {
            for (split, samples) in [("train", &task.train), ("test", &task.test)] {
                let mut w =
                    csv::Writer::from_path(dir.join(format!("task_{}_{split}.csv", k + 1)))?;
                let mut header: Vec<String> = (0..self.config.input_dim)
                    .map(|i| format!("x{i}"))
                    .collect();
                header.push("label".into());
                w.write_record(&header)?;
                for s in samples.iter() {
                    let mut row: Vec<String> = s.features.iter().map(f64::to_string).collect();
                    row.push(s.label.to_string());
                    w.write_record(&row)?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Base draws for a cluster task: label `i % classes` at mean + unit noise.
fn cluster_samples(rng: &mut impl Rng, means: &[Vec<f64>], count: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let label = i % means.len();
            let features = means[label].iter().map(|m| m + normal(rng)).collect();
            Sample { features, label }
        })
        .collect()
}

fn split(mut samples: Vec<Sample>, train: usize) -> (Vec<Sample>, Vec<Sample>) {
    let test = samples.split_off(train);
    (samples, test)
}

fn rotate(samples: &[Sample], angle: f64) -> Vec<Sample> {
    let (sin, cos) = angle.sin_cos();
    samples
        .iter()
        .map(|s| {
            let mut features = s.features.clone();
            let (x, y) = (features[0], features[1]);
            features[0] = cos * x - sin * y;
            features[1] = sin * x + cos * y;
            Sample {
                features,
                label: s.label,
            }
        })
        .collect()
}

/// Class means of the unrotated rotated-gaussians base task.
pub fn rotated_gaussian_means(config: &TaskConfig) -> Vec<Vec<f64>> {
    (0..config.num_classes)
        .map(|c| {
            let angle = 2.0 * PI * c as f64 / config.num_classes as f64;
            let mut mean = vec![0.0; config.input_dim];
            mean[0] = CLUSTER_RADIUS * angle.cos();
            mean[1] = CLUSTER_RADIUS * angle.sin();
            mean
        })
        .collect()
}

fn random_means(rng: &mut impl Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    // Scaled so that cluster centres sit about CLUSTER_RADIUS apart on average.
    let scale = CLUSTER_RADIUS / (2.0 * dim as f64).sqrt() * 2.0;
    (0..classes)
        .map(|_| (0..dim).map(|_| scale * normal(rng)).collect())
        .collect()
}

pub fn generate(config: &TaskConfig) -> Result<TaskSequence> {
    config.validate()?;
    let total = config.train_samples + config.test_samples;
    let mut rng = seed::rng(seed::derive(config.seed, 0x7a5c));

    let tasks = match config.kind {
        TaskKind::RotatedGaussians => {
            let base = cluster_samples(&mut rng, &rotated_gaussian_means(config), total);
            (0..config.num_tasks)
                .map(|t| {
                    let rotated = rotate(&base, t as f64 * config.drift);
                    let (train, test) = split(rotated, config.train_samples);
                    TaskData {
                        train,
                        test,
                        classes: (0..config.num_classes).collect(),
                    }
                })
                .collect()
        }
        TaskKind::PermutedFeatures => {
            let means = random_means(&mut rng, config.num_classes, config.input_dim);
            let base = cluster_samples(&mut rng, &means, total);
            (0..config.num_tasks)
                .map(|t| {
                    let mut perm: Vec<usize> = (0..config.input_dim).collect();
                    if t > 0 {
                        perm.shuffle(&mut seed::rng(seed::derive(config.seed, 0x1000 + t as u64)));
                    }
                    let permuted = base
                        .iter()
                        .map(|s| Sample {
                            features: perm.iter().map(|&p| s.features[p]).collect(),
                            label: s.label,
                        })
                        .collect();
                    let (train, test) = split(permuted, config.train_samples);
                    TaskData {
                        train,
                        test,
                        classes: (0..config.num_classes).collect(),
                    }
                })
                .collect()
        }
        TaskKind::SplitClasses => {
            let means = random_means(&mut rng, config.num_classes, config.input_dim);
            let per_task = config.output_classes();
            (0..config.num_tasks)
                .map(|t| {
                    let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
                    let task_means: Vec<Vec<f64>> =
                        classes.iter().map(|&c| means[c].clone()).collect();
                    let samples = cluster_samples(&mut rng, &task_means, total);
                    let (train, test) = split(samples, config.train_samples);
                    TaskData {
                        train,
                        test,
                        classes,
                    }
                })
                .collect()
        }
    };

    Ok(TaskSequence {
        tasks,
        config: config.clone(),
    })
}

/// Shuffles `train` with a ChaCha8 stream seeded by `epoch_seed` and cuts it
/// into batches of `batch_size`; the last batch may be short.
pub fn batches(train: &[Sample], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<&Sample>>> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seed::rng(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &train[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small(kind: TaskKind) -> TaskConfig {
        TaskConfig {
            kind,
            num_tasks: 3,
            train_samples: 60,
            test_samples: 20,
            input_dim: 5,
            num_classes: 3,
            seed: 42,
            drift: 0.4,
        }
    }

    #[test]
    fn single_task_is_the_base_task() {
        let mut a = small(TaskKind::RotatedGaussians);
        a.num_tasks = 1;
        let mut b = a.clone();
        b.drift = 2.7;
        assert_eq!(generate(&a).unwrap().tasks, generate(&b).unwrap().tasks);
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [TaskKind::RotatedGaussians, TaskKind::PermutedFeatures] {
            let cfg = small(kind);
            assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
            let mut other = cfg.clone();
            other.seed += 1;
            assert_ne!(
                generate(&cfg).unwrap().tasks,
                generate(&other).unwrap().tasks
            );
        }
        let cfg = TaskConfig {
            num_classes: 6,
            ..small(TaskKind::SplitClasses)
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn half_turn_swaps_symmetric_class_means() {
        let cfg = TaskConfig {
            num_tasks: 2,
            num_classes: 2,
            input_dim: 2,
            drift: PI,
            ..small(TaskKind::RotatedGaussians)
        };
        let means = rotated_gaussian_means(&cfg);
        // The two means are antipodal, so a half turn maps one onto the other.
        let (s, c) = PI.sin_cos();
        let rotated = [
            c * means[0][0] - s * means[0][1],
            s * means[0][0] + c * means[0][1],
        ];
        assert!((rotated[0] - means[1][0]).abs() < 1e-12);
        assert!((rotated[1] - means[1][1]).abs() < 1e-12);

        let seq = generate(&cfg).unwrap();
        let class_mean = |task: &TaskData, label: usize| {
            let pts: Vec<_> = task.train.iter().filter(|s| s.label == label).collect();
            let n = pts.len() as f64;
            [
                pts.iter().map(|s| s.features[0]).sum::<f64>() / n,
                pts.iter().map(|s| s.features[1]).sum::<f64>() / n,
            ]
        };
        for label in 0..2 {
            let m0 = class_mean(&seq.tasks[0], label);
            let m1 = class_mean(&seq.tasks[1], label);
            assert!((m0[0] + m1[0]).abs() < 1e-9 && (m0[1] + m1[1]).abs() < 1e-9);
            // and task 1's class sits where task 0's other class sits
            let other = class_mean(&seq.tasks[0], 1 - label);
            assert!((m1[0] - other[0]).abs() < 1.0 && (m1[1] - other[1]).abs() < 1.0);
        }
    }

    #[test]
    fn permuted_tasks_share_base_samples() {
        let seq = generate(&small(TaskKind::PermutedFeatures)).unwrap();
        let base = &seq.tasks[0].train[0].features;
        let mut sorted_base = base.clone();
        sorted_base.sort_by(f64::total_cmp);
        for task in &seq.tasks[1..] {
            let mut f = task.train[0].features.clone();
            f.sort_by(f64::total_cmp);
            assert_eq!(f, sorted_base);
        }
        assert_ne!(seq.tasks[1].train[0].features, *base);
    }

    #[test]
    fn split_classes_partition_labels() {
        let cfg = TaskConfig {
            num_classes: 6,
            ..small(TaskKind::SplitClasses)
        };
        let seq = generate(&cfg).unwrap();
        let mut seen = HashSet::new();
        for task in &seq.tasks {
            assert_eq!(task.classes.len(), 2);
            for c in &task.classes {
                assert!(seen.insert(*c));
            }
            assert!(task.train.iter().all(|s| s.label < 2));
        }
        assert!(generate(&TaskConfig {
            num_classes: 4,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn invalid_configs() {
        let ok = small(TaskKind::RotatedGaussians);
        for bad in [
            TaskConfig {
                num_tasks: 0,
                ..ok.clone()
            },
            TaskConfig {
                train_samples: 0,
                ..ok.clone()
            },
            TaskConfig {
                input_dim: 1,
                ..ok.clone()
            },
            TaskConfig {
                num_classes: 0,
                ..ok.clone()
            },
            TaskConfig {
                drift: f64::NAN,
                ..ok.clone()
            },
        ] {
            assert!(generate(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn splits_have_requested_sizes() {
        let seq = generate(&small(TaskKind::RotatedGaussians)).unwrap();
        for task in &seq.tasks {
            assert_eq!(task.train.len(), 60);
            assert_eq!(task.test.len(), 20);
        }
    }

    fn key(s: &Sample) -> (Vec<u64>, usize) {
        (s.features.iter().map(|f| f.to_bits()).collect(), s.label)
    }

    #[test]
    fn batches_partition_the_train_set() {
        let seq = generate(&small(TaskKind::RotatedGaussians)).unwrap();
        let train = &seq.tasks[0].train;
        let bs = batches(train, 7, 3).unwrap();
        assert_eq!(bs.len(), 9);
        assert_eq!(bs.last().unwrap().len(), 4);
        let mut counts: HashMap<_, i32> = HashMap::new();
        for s in train {
            *counts.entry(key(s)).or_default() += 1;
        }
        for s in bs.iter().flatten() {
            *counts.entry(key(s)).or_default() -= 1;
        }
        assert!(counts.values().all(|&c| c == 0));

        let one = batches(train, 1000, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), train.len());

        let again = batches(train, 7, 3).unwrap();
        assert_eq!(bs, again);
        assert_ne!(bs, batches(train, 7, 4).unwrap());

        assert!(batches(&[], 4, 0).is_err());
        assert!(batches(train, 0, 0).is_err());
    }

    #[test]
    fn csv_export_writes_every_split() {
        let seq = generate(&small(TaskKind::RotatedGaussians)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        seq.export_csv(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("task_3_test.csv")).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,x4,label\n"));
        assert_eq!(text.lines().count(), 21);
    }
}

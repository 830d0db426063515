//! Dataset loading (svmlight text), per-instance normalization, synthetic
//! generators and the balanced split into per-worker shards.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LabeledInstance, LossKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: feature index {index} does not increase (previous {previous})")]
    NonIncreasing {
        line: usize,
        index: usize,
        previous: usize,
    },
    #[error("dataset has no instances")]
    Empty,
    #[error("feature index {index} does not fit dimension {dim}")]
    DimensionTooSmall { index: usize, dim: usize },
    #[error("cannot split {n} instances over {p} workers")]
    BadWorkerCount { n: usize, p: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<LabeledInstance>,
    pub dim: usize,
}

impl Dataset {
    pub fn new(instances: Vec<LabeledInstance>, dim: usize) -> Result<Self, DataError> {
        if instances.is_empty() {
            return Err(DataError::Empty);
        }
        for inst in &instances {
            if inst.min_dim() > dim {
                return Err(DataError::DimensionTooSmall {
                    index: inst.min_dim() - 1,
                    dim,
                });
            }
        }
        Ok(Dataset { instances, dim })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// One worker's exclusive shard. Worker ids start at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub worker_id: u32,
    pub instances: Vec<LabeledInstance>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// Seeded Fisher-Yates shuffle, then contiguous blocks.
    ShuffledUniform { seed: u64 },
    Contiguous,
    /// Stable sort with negatives first, then contiguous blocks. Produces
    /// maximally skewed shards.
    LabelSorted,
}

/// Parses svmlight / libsvm text: `label idx:val idx:val ...` with 1-based
/// indices. `#` starts a comment; blank lines are skipped. Labels `<= 0`
/// become -1, everything else +1.
pub fn parse_svmlight<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset, DataError> {
    let mut instances = Vec::new();
    let mut max_dim = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label: f64 = label_tok.parse().map_err(|_| DataError::Malformed {
            line: lineno,
            reason: format!("bad label {label_tok:?}"),
        })?;
        let mut features: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| DataError::Malformed {
                line: lineno,
                reason: format!("expected idx:val, got {tok:?}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| DataError::Malformed {
                line: lineno,
                reason: format!("bad index {idx:?}"),
            })?;
            if idx == 0 {
                return Err(DataError::Malformed {
                    line: lineno,
                    reason: "indices are 1-based".into(),
                });
            }
            let val: f64 = val.parse().map_err(|_| DataError::Malformed {
                line: lineno,
                reason: format!("bad value {val:?}"),
            })?;
            if !val.is_finite() {
                return Err(DataError::Malformed {
                    line: lineno,
                    reason: format!("non-finite value {val}"),
                });
            }
            let idx = idx - 1;
            if let Some(&(prev, _)) = features.last() {
                if idx <= prev {
                    return Err(DataError::NonIncreasing {
                        line: lineno,
                        index: idx + 1,
                        previous: prev + 1,
                    });
                }
            }
            features.push((idx, val));
        }
        let inst = LabeledInstance::new(instances.len(), features, if label > 0.0 { 1 } else { -1 });
        max_dim = max_dim.max(inst.min_dim());
        instances.push(inst);
    }
    Dataset::new(instances, dim.unwrap_or(max_dim))
}

/// Inverse of [`parse_svmlight`]; values use the shortest round-tripping
/// decimal form.
pub fn to_svmlight(dataset: &Dataset) -> String {
    let mut out = String::new();
    for inst in &dataset.instances {
        out.push_str(if inst.label > 0 { "+1" } else { "-1" });
        for &(j, v) in &inst.features {
            let _ = write!(out, " {}:{}", j + 1, v);
        }
        out.push('\n');
    }
    out
}

/// Scales every feature vector to unit L2 norm. Zero vectors are kept.
pub fn normalize(dataset: &Dataset) -> Dataset {
    let instances = dataset
        .instances
        .iter()
        .map(|inst| {
            let norm = inst.norm_sq().sqrt();
            let mut out = inst.clone();
            if norm > 0.0 {
                for f in &mut out.features {
                    f.1 /= norm;
                }
            }
            out
        })
        .collect();
    Dataset {
        instances,
        dim: dataset.dim,
    }
}

/// Block sizes for `n` items over `p` workers; the first `n mod p` blocks
/// get one extra item.
pub fn block_sizes(n: usize, p: usize) -> Vec<usize> {
    (0..p).map(|k| n / p + usize::from(k < n % p)).collect()
}

pub fn partition(
    dataset: &Dataset,
    p: usize,
    strategy: PartitionStrategy,
) -> Result<Vec<Partition>, DataError> {
    let n = dataset.len();
    if p < 1 || p > n {
        return Err(DataError::BadWorkerCount { n, p });
    }
    let mut order: Vec<usize> = (0..n).collect();
    match strategy {
        PartitionStrategy::Contiguous => {}
        PartitionStrategy::ShuffledUniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        PartitionStrategy::LabelSorted => {
            order.sort_by_key(|&i| dataset.instances[i].label);
        }
    }
    let mut parts = Vec::with_capacity(p);
    let mut start = 0;
    for (k, size) in block_sizes(n, p).into_iter().enumerate() {
        let instances = order[start..start + size]
            .iter()
            .map(|&i| dataset.instances[i].clone())
            .collect();
        parts.push(Partition {
            worker_id: k as u32 + 1,
            instances,
        });
        start += size;
    }
    Ok(parts)
}

/// Dense Gaussian features with labels from a random linear teacher plus
/// 10% label noise, normalized to unit norm.
pub fn synthetic_lr(n: usize, d: usize, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let instances = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let score: f64 = x.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            let flip = rng.random_bool(0.1);
            let positive = (score >= 0.0) != flip;
            let features = x.into_iter().enumerate().collect();
            LabeledInstance::new(i, features, if positive { 1 } else { -1 })
        })
        .collect();
    Ok(normalize(&Dataset::new(instances, d)?))
}

/// Curvature/center pairs of the two-worker scalar example where the
/// proximal term decides convergence: `(w-1)^2` and `100 (w-10)^2`.
pub const TOY_TABLE1: [(f64, f64); 2] = [(1.0, 1.0), (100.0, 10.0)];

/// The two-instance scalar dataset and its loss. Each instance is one local
/// function, so splitting over two workers gives one function per worker.
pub fn toy_table1() -> (Dataset, LossKind) {
    let instances = (0..TOY_TABLE1.len())
        .map(|i| LabeledInstance::new(i, vec![], 1))
        .collect();
    let kind = LossKind::Quadratic1D {
        coeffs: TOY_TABLE1.to_vec(),
    };
    (
        Dataset {
            instances,
            dim: 1,
        },
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Dataset, DataError> {
        parse_svmlight(s.as_bytes(), None)
    }

    #[test]
    fn parses_single_line() {
        let ds = parse("+1 1:0.5 3:2.0\n").unwrap();
        assert_eq!(ds.dim, 3);
        assert_eq!(ds.instances[0].features, vec![(0, 0.5), (2, 2.0)]);
        assert_eq!(ds.instances[0].label, 1);
    }

    #[test]
    fn coerces_labels() {
        assert_eq!(parse("0 1:1\n").unwrap().instances[0].label, -1);
        assert_eq!(parse("-1 1:1\n").unwrap().instances[0].label, -1);
        assert_eq!(parse("2 1:1\n").unwrap().instances[0].label, 1);
    }

    #[test]
    fn handles_comments_crlf_and_dim_override() {
        let ds = parse_svmlight("# header\r\n+1 2:1 # trailing\r\n\r\n-1 1:3\r\n".as_bytes(), Some(10)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim, 10);
        assert_eq!(ds.instances[1].features, vec![(0, 3.0)]);
        assert!(matches!(
            parse_svmlight("+1 5:1\n".as_bytes(), Some(2)),
            Err(DataError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn reports_errors_with_line_numbers() {
        match parse("+1 1:1\n+1 nonsense\n") {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("+1 1:1\n\n-1 3:1 2:1\n") {
            Err(DataError::NonIncreasing { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("+1 0:1\n"), Err(DataError::Malformed { .. })));
        assert!(matches!(parse("# nothing\n\n"), Err(DataError::Empty)));
    }

    #[test]
    fn normalizes_per_instance() {
        let ds = parse("+1 1:3 2:4\n-1\n").unwrap();
        let norm = normalize(&ds);
        assert_eq!(norm.instances[0].features, vec![(0, 0.6), (1, 0.8)]);
        assert!(norm.instances[1].features.is_empty());
    }

    #[test]
    fn contiguous_split_sizes() {
        let ds = synthetic_lr(10, 2, 1).unwrap();
        let parts = partition(&ds, 3, PartitionStrategy::Contiguous).unwrap();
        let ids: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| p.instances.iter().map(|i| i.id).collect())
            .collect();
        assert_eq!(ids, vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]]);
        assert_eq!(parts.iter().map(|p| p.worker_id).collect::<Vec<_>>(), vec![1, 2, 3]);

        let parts = partition(&ds, 10, PartitionStrategy::ShuffledUniform { seed: 4 }).unwrap();
        assert!(parts.iter().all(|p| p.len() == 1));
        assert!(partition(&ds, 11, PartitionStrategy::Contiguous).is_err());
        assert!(partition(&ds, 0, PartitionStrategy::Contiguous).is_err());
    }

    #[test]
    fn label_sorted_separates_classes() {
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(if i % 2 == 0 { "+1 1:1\n" } else { "-1 1:1\n" });
        }
        let ds = parse(&text).unwrap();
        let parts = partition(&ds, 2, PartitionStrategy::LabelSorted).unwrap();
        assert!(parts[0].instances.iter().all(|i| i.label == -1));
        assert!(parts[1].instances.iter().all(|i| i.label == 1));
    }

    #[test]
    fn normalized_synthetic_has_unit_norms() {
        let ds = synthetic_lr(50, 7, 3).unwrap();
        for inst in &ds.instances {
            assert!((inst.norm_sq() - 1.0).abs() < 1e-12);
        }
        let c = crate::model::smoothness_bound(&LossKind::LogisticL2, &ds.instances, 1e-4).unwrap();
        assert!((c.l - (0.25 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn toy_dataset_shape() {
        let (ds, kind) = toy_table1();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim, 1);
        assert_eq!(kind.name(), "quadratic");
    }

    proptest! {
        #[test]
        fn partitions_form_balanced_exact_cover(n in 1usize..300, p_frac in 0.0f64..1.0, seed: u64, which in 0u8..3) {
            let p = 1 + ((n - 1) as f64 * p_frac) as usize;
            let ds = synthetic_lr(n, 2, seed).unwrap();
            let strategy = match which {
                0 => PartitionStrategy::Contiguous,
                1 => PartitionStrategy::ShuffledUniform { seed },
                _ => PartitionStrategy::LabelSorted,
            };
            let parts = partition(&ds, p, strategy).unwrap();
            prop_assert_eq!(parts.len(), p);
            let sizes: Vec<usize> = parts.iter().map(Partition::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut ids: Vec<usize> = parts.iter().flat_map(|p| p.instances.iter().map(|i| i.id)).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
            for part in &parts {
                for inst in &part.instances {
                    prop_assert_eq!(inst, &ds.instances[inst.id]);
                }
            }
            prop_assert_eq!(&parts, &partition(&ds, p, strategy).unwrap());
        }

        #[test]
        fn svmlight_round_trip(rows in proptest::collection::vec(
            (any::<bool>(), proptest::collection::btree_map(0usize..50, -1e6f64..1e6, 0..8)), 1..20)) {
            let instances: Vec<_> = rows.iter().enumerate().map(|(i, (pos, feats))| {
                LabeledInstance::new(i, feats.iter().map(|(&j, &v)| (j, v)).collect(), if *pos { 1 } else { -1 })
            }).collect();
            let ds = Dataset::new(instances, 50).unwrap();
            let text = to_svmlight(&ds);
            let back = parse_svmlight(text.as_bytes(), Some(50)).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(to_svmlight(&back), text);
        }
    }
}

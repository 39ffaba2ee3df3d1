//! Channel profiling and high/low interleaved reordering.
//!
//! Outliers can only take over a neighbour that is small, so channels that
//! produce many outliers should sit next to channels that rarely do. The
//! reorder plan is computed once from profiled statistics and applied as a
//! static permutation of channels (equivalently, of weight filters).

use serde::{Deserialize, Serialize};

use crate::codec::{encode, Variant};
use crate::error::{Error, Result};
use crate::quantizer::{percentile, QuantConfig};

/// Percentile of profiled magnitudes above which a value counts as a
/// profiling outlier (top 1%).
pub const PROFILE_OUTLIER_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel: usize,
    pub outlier_count: u64,
    pub zero_count: u64,
}

/// Per-channel counts gathered from a `[samples x channels]` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub sample_count: u64,
    pub outlier_threshold: f64,
    pub channels: Vec<ChannelStats>,
}

impl ChannelProfile {
    /// Profile built from bare outlier counts; used for plans computed from
    /// externally gathered statistics.
    pub fn from_outlier_counts(counts: &[u64], sample_count: u64) -> Result<Self> {
        let p = ChannelProfile {
            sample_count,
            outlier_threshold: 0.0,
            channels: counts
                .iter()
                .enumerate()
                .map(|(channel, &outlier_count)| ChannelStats {
                    channel,
                    outlier_count,
                    zero_count: 0,
                })
                .collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn outlier_counts(&self) -> Vec<u64> {
        self.channels.iter().map(|c| c.outlier_count).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("profile has no channels".into()));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.channel != i {
                return Err(Error::InvalidConfig(format!(
                    "profile entry {i} is labelled channel {}",
                    c.channel
                )));
            }
            if c.outlier_count > self.sample_count || c.zero_count > self.sample_count {
                return Err(Error::InvalidConfig(format!(
                    "channel {i} counts exceed sample_count {}",
                    self.sample_count
                )));
            }
        }
        Ok(())
    }

    /// Combine profiles of disjoint sample partitions taken with the same
    /// outlier threshold.
    pub fn merge(&self, other: &ChannelProfile) -> Result<ChannelProfile> {
        if self.num_channels() != other.num_channels() {
            return Err(Error::LengthMismatch {
                expected: self.num_channels(),
                actual: other.num_channels(),
            });
        }
        if self.outlier_threshold != other.outlier_threshold {
            return Err(Error::InvalidConfig(
                "cannot merge profiles taken with different outlier thresholds".into(),
            ));
        }
        Ok(ChannelProfile {
            sample_count: self.sample_count + other.sample_count,
            outlier_threshold: self.outlier_threshold,
            channels: self
                .channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| ChannelStats {
                    channel: a.channel,
                    outlier_count: a.outlier_count + b.outlier_count,
                    zero_count: a.zero_count + b.zero_count,
                })
                .collect(),
        })
    }

    /// Profile after moving channels according to `perm`.
    pub fn permuted(&self, perm: &Permutation) -> Result<ChannelProfile> {
        let mut channels = perm.apply(&self.channels)?;
        for (i, c) in channels.iter_mut().enumerate() {
            c.channel = i;
        }
        Ok(ChannelProfile {
            sample_count: self.sample_count,
            outlier_threshold: self.outlier_threshold,
            channels,
        })
    }
}

fn check_layout(data: &[f64], channels: usize) -> Result<usize> {
    if channels == 0 || data.is_empty() {
        return Err(Error::InvalidConfig("empty activation tensor".into()));
    }
    if !data.len().is_multiple_of(channels) {
        return Err(Error::ShapeMismatch {
            expected: vec![data.len() / channels, channels],
            actual: vec![data.len()],
        });
    }
    Ok(data.len() / channels)
}

/// Count outliers (`|x| > threshold`) and exact zeros per channel of a
/// row-major `[samples x channels]` tensor.
pub fn profile_with_threshold(
    data: &[f64],
    channels: usize,
    threshold: f64,
) -> Result<ChannelProfile> {
    let samples = check_layout(data, channels)?;
    let mut stats: Vec<ChannelStats> = (0..channels)
        .map(|channel| ChannelStats {
            channel,
            outlier_count: 0,
            zero_count: 0,
        })
        .collect();
    for row in data.chunks_exact(channels) {
        for (s, &v) in stats.iter_mut().zip(row) {
            s.outlier_count += (v.abs() > threshold) as u64;
            s.zero_count += (v == 0.0) as u64;
        }
    }
    Ok(ChannelProfile {
        sample_count: samples as u64,
        outlier_threshold: threshold,
        channels: stats,
    })
}

/// Profile with the outlier threshold set at the global 99th percentile of
/// magnitudes.
pub fn profile(data: &[f64], channels: usize) -> Result<ChannelProfile> {
    check_layout(data, channels)?;
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: data[index],
        });
    }
    let abs: Vec<f64> = data.iter().map(|v| v.abs()).collect();
    let threshold = percentile(&abs, PROFILE_OUTLIER_PERCENTILE)?;
    profile_with_threshold(data, channels, threshold)
}

/// Channel permutation: `order[old] = new` position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            order: (0..n).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &p in &order {
            if p >= order.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidConfig(format!(
                    "{order:?} is not a permutation"
                )));
            }
        }
        Ok(Permutation { order })
    }

    /// Build from the channel sequence in new order (`sources[new] = old`).
    pub fn from_sources(sources: &[usize]) -> Result<Self> {
        let mut order = vec![usize::MAX; sources.len()];
        for (new, &old) in sources.iter().enumerate() {
            if old >= sources.len() || order[old] != usize::MAX {
                return Err(Error::InvalidConfig(format!(
                    "{sources:?} is not a permutation"
                )));
            }
            order[old] = new;
        }
        Ok(Permutation { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Old channel index at each new position.
    pub fn sources(&self) -> Vec<usize> {
        let mut src = vec![0; self.order.len()];
        for (old, &new) in self.order.iter().enumerate() {
            src[new] = old;
        }
        src
    }

    pub fn inverse(&self) -> Permutation {
        Permutation {
            order: self.sources(),
        }
    }

    pub fn apply<T: Clone>(&self, values: &[T]) -> Result<Vec<T>> {
        if values.len() != self.order.len() {
            return Err(Error::LengthMismatch {
                expected: self.order.len(),
                actual: values.len(),
            });
        }
        Ok(self
            .sources()
            .into_iter()
            .map(|old| values[old].clone())
            .collect())
    }

    /// Permute the channel axis of a row-major `[samples x channels]` tensor.
    pub fn apply_rows(&self, data: &[f64]) -> Result<Vec<f64>> {
        let channels = self.order.len();
        check_layout(data, channels)?;
        let src = self.sources();
        Ok(data
            .chunks_exact(channels)
            .flat_map(|row| src.iter().map(move |&old| row[old]))
            .collect())
    }
}

/// High/low interleaving plan. Even positions take the remaining channel
/// with the most outliers, odd positions the one with the fewest; ties go to
/// the lower original index in both directions.
pub fn reorder_plan(p: &ChannelProfile) -> Result<Permutation> {
    p.validate()?;
    let n = p.num_channels();
    let counts = p.outlier_counts();
    let mut high: Vec<usize> = (0..n).collect();
    high.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut low: Vec<usize> = (0..n).collect();
    low.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));

    let mut used = vec![false; n];
    let (mut hi, mut lo) = (high.into_iter(), low.into_iter());
    let mut sources = Vec::with_capacity(n);
    for pos in 0..n {
        let iter = if pos % 2 == 0 { &mut hi } else { &mut lo };
        let next = iter
            .find(|&c| !used[c])
            .expect("each position consumes one unused channel");
        used[next] = true;
        sources.push(next);
    }
    Permutation::from_sources(&sources)
}

/// Encoding-sense outlier coverage over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Coverage {
    pub outliers: u64,
    pub covered: u64,
}

impl Coverage {
    /// Fraction of outliers that committed an overwrite; 1.0 when there are
    /// none.
    pub fn fraction(&self) -> f64 {
        if self.outliers == 0 {
            1.0
        } else {
            self.covered as f64 / self.outliers as f64
        }
    }

    pub fn merge(self, other: Coverage) -> Coverage {
        Coverage {
            outliers: self.outliers + other.outliers,
            covered: self.covered + other.covered,
        }
    }
}

/// Encode every row of a `[samples x channels]` batch (after optional
/// permutation) and count outliers (`|x| > S`) that won an overwrite.
pub fn coverage(
    data: &[f64],
    channels: usize,
    cfg: &QuantConfig,
    variant: Variant,
    perm: Option<&Permutation>,
) -> Result<Coverage> {
    check_layout(data, channels)?;
    let permuted;
    let rows = match perm {
        Some(p) => {
            permuted = p.apply_rows(data)?;
            &permuted[..]
        }
        None => data,
    };
    let mut total = Coverage::default();
    for row in rows.chunks_exact(channels) {
        let v = encode(row, cfg, variant)?;
        total.outliers += row.iter().filter(|x| x.abs() > cfg.clip_scale).count() as u64;
        total.covered += v
            .pairs()?
            .iter()
            .filter(|(_, kind)| kind.is_outlier())
            .count() as u64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(counts: &[u64]) -> Vec<usize> {
        reorder_plan(&ChannelProfile::from_outlier_counts(counts, 100).unwrap())
            .unwrap()
            .sources()
    }

    #[test]
    fn profile_examples() {
        let p = profile(&[0.0; 12], 3).unwrap();
        assert_eq!(p.sample_count, 4);
        assert!(p
            .channels
            .iter()
            .all(|c| c.outlier_count == 0 && c.zero_count == 4));

        let single: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let p = profile(&single, 1).unwrap();
        assert_eq!(p.channels[0].outlier_count, 2);
        assert_eq!(p.channels[0].zero_count, 1);

        assert!(profile(&[], 2).is_err());
        assert!(profile(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan(&[5, 5, 5]), vec![0, 1, 2]);
        assert_eq!(plan(&[10, 0]), vec![0, 1]);
        let counts = [9, 1, 7, 3];
        let p = plan(&counts);
        assert_eq!(
            p.iter().map(|&c| counts[c]).collect::<Vec<_>>(),
            vec![9, 1, 7, 3]
        );
        assert_eq!(plan(&[0, 4, 2, 8, 6]), vec![3, 0, 4, 2, 1]);
    }

    /// Every order of four distinct counts; the plan must be the unique
    /// arrangement that alternates current-max and current-min.
    #[test]
    fn plan_matches_enumeration() {
        let counts = [9u64, 1, 7, 3];
        let mut perms = Vec::new();
        permutations(&mut (0..4).collect::<Vec<_>>(), 0, &mut perms);
        let valid: Vec<&Vec<usize>> = perms
            .iter()
            .filter(|p| {
                let seq: Vec<u64> = p.iter().map(|&c| counts[c]).collect();
                (0..4).all(|i| {
                    let rest = &seq[i..];
                    if i % 2 == 0 {
                        seq[i] == *rest.iter().max().unwrap()
                    } else {
                        seq[i] == *rest.iter().min().unwrap()
                    }
                })
            })
            .collect();
        assert_eq!(valid.len(), 1);
        assert_eq!(&plan(&counts), valid[0]);
    }

    fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permutations(items, k + 1, out);
            items.swap(k, i);
        }
    }

    #[test]
    fn coverage_examples() {
        let cfg = QuantConfig::new(4, 1.0).unwrap();
        let none = [0.5, 0.2, 0.1, 0.9];
        assert_eq!(
            coverage(&none, 2, &cfg, Variant::Shift, None)
                .unwrap()
                .fraction(),
            1.0
        );
        let good = [2.0, 0.0, 2.0, 0.0];
        assert_eq!(
            coverage(&good, 2, &cfg, Variant::Shift, None)
                .unwrap()
                .fraction(),
            1.0
        );
        let bad = [2.0, 2.0, 2.0, 2.0];
        let c = coverage(&bad, 2, &cfg, Variant::Shift, None).unwrap();
        assert_eq!((c.outliers, c.covered), (4, 0));
        assert_eq!(c.fraction(), 0.0);
        // Reordering [2, 2, 0, 0] to high/low brings the zeros next to outliers.
        let layer = [2.0, 2.0, 0.0, 0.0];
        let before = coverage(&layer, 4, &cfg, Variant::Split, None).unwrap();
        let perm = Permutation::from_sources(&[0, 2, 1, 3]).unwrap();
        let after = coverage(&layer, 4, &cfg, Variant::Split, Some(&perm)).unwrap();
        assert_eq!(before.covered, 1);
        assert_eq!(after.covered, 2);
    }

    #[test]
    fn permutation_validation_and_json() {
        assert!(Permutation::from_order(vec![0, 0]).is_err());
        assert!(Permutation::from_order(vec![2, 0]).is_err());
        let p = Permutation::from_order(vec![2, 0, 1]).unwrap();
        assert_eq!(p.sources(), vec![1, 2, 0]);
        assert_eq!(p.apply(&['a', 'b', 'c']).unwrap(), vec!['b', 'c', 'a']);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"order":[2,0,1]}"#);
        let prof = profile(&[1.0, 0.0, 5.0, 0.0, 1.0, 9.0], 3).unwrap();
        let back: ChannelProfile =
            serde_json::from_str(&serde_json::to_string(&prof).unwrap()).unwrap();
        assert_eq!(back, prof);
    }

    #[test]
    fn merge_partitions() {
        let data: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let whole = profile_with_threshold(&data, 3, 4.0).unwrap();
        let a = profile_with_threshold(&data[..30], 3, 4.0).unwrap();
        let b = profile_with_threshold(&data[30..], 3, 4.0).unwrap();
        assert_eq!(a.merge(&b).unwrap(), whole);
        assert_eq!(b.merge(&a).unwrap(), whole);
    }

    proptest! {
        #[test]
        fn plan_is_permutation_and_order_invariant(counts in proptest::collection::vec(0u64..20, 1..24), shuffle_seed in any::<u64>()) {
            let prof = ChannelProfile::from_outlier_counts(&counts, 100).unwrap();
            let perm = reorder_plan(&prof).unwrap();
            let mut sorted = perm.order().to_vec();
            sorted.sort();
            prop_assert_eq!(sorted, (0..counts.len()).collect::<Vec<_>>());

            // The resulting count sequence depends only on the multiset of counts.
            let mut keys: Vec<(u64, usize)> = (0..counts.len()).map(|i| ((i as u64).wrapping_mul(shuffle_seed | 1).rotate_left(17), i)).collect();
            keys.sort();
            let shuffle = Permutation::from_sources(&keys.iter().map(|k| k.1).collect::<Vec<_>>()).unwrap();
            let shuffled = prof.permuted(&shuffle).unwrap();
            let seq = |p: &ChannelProfile| {
                let plan = reorder_plan(p).unwrap();
                p.permuted(&plan).unwrap().outlier_counts()
            };
            prop_assert_eq!(seq(&prof), seq(&shuffled));
        }
    }
}

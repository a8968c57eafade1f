//! Non-IID client partitions of a labeled dataset.
//!
//! Three label-skew scenarios are supported: Dirichlet label shift, an extreme
//! shard split where each client sees a fixed number of classes, and a
//! long-tailed subsample followed by a Dirichlet split. Every construction is a
//! pure function of the labels and the [`PartitionSpec`].

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, stream, SimRng};

/// Redraws allowed for one class before falling back to moving samples.
const MAX_REDRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Dirichlet,
    Extreme,
    Longtail,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::Dirichlet => "dirichlet",
            Scenario::Extreme => "extreme",
            Scenario::Longtail => "longtail",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Scenario::Dirichlet),
            "extreme" => Ok(Scenario::Extreme),
            "longtail" => Ok(Scenario::Longtail),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_classes_per_client() -> usize {
    2
}
fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scenario: Scenario,
    pub num_clients: usize,
    /// Dirichlet concentration. Also used to split the retained long-tail samples.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    #[serde(default = "default_rho")]
    pub imbalance_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn dirichlet(num_clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            scenario: Scenario::Dirichlet,
            num_clients,
            alpha,
            classes_per_client: default_classes_per_client(),
            imbalance_ratio: default_rho(),
            seed,
        }
    }

    pub fn extreme(num_clients: usize, classes_per_client: usize, seed: u64) -> Self {
        Self {
            scenario: Scenario::Extreme,
            classes_per_client,
            ..Self::dirichlet(num_clients, default_alpha(), seed)
        }
    }

    pub fn longtail(num_clients: usize, imbalance_ratio: f64, alpha: f64, seed: u64) -> Self {
        Self {
            scenario: Scenario::Longtail,
            imbalance_ratio,
            ..Self::dirichlet(num_clients, alpha, seed)
        }
    }

    /// Checks the scenario-specific invariants. `num_classes` is optional because
    /// the class count is only known once labels are available.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.num_clients == 0 {
            return invalid("num_clients must be positive");
        }
        match self.scenario {
            Scenario::Dirichlet => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return invalid(format!("alpha must be positive, got {}", self.alpha));
                }
            }
            Scenario::Longtail => {
                if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
                    return invalid(format!(
                        "imbalance_ratio must be >= 1, got {}",
                        self.imbalance_ratio
                    ));
                }
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return invalid(format!("alpha must be positive, got {}", self.alpha));
                }
            }
            Scenario::Extreme => {
                if self.classes_per_client == 0 {
                    return invalid("classes_per_client must be positive");
                }
                if let Some(c) = num_classes {
                    if self.classes_per_client > c {
                        return invalid(format!(
                            "classes_per_client {} exceeds the number of classes {c}",
                            self.classes_per_client
                        ));
                    }
                    if self.classes_per_client * self.num_clients < c {
                        return invalid(format!(
                            "{} clients x {} classes cannot cover {c} classes",
                            self.num_clients, self.classes_per_client
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    pub scenario: Scenario,
    pub seed: u64,
    pub client_indices: Vec<Vec<usize>>,
    /// `label_histogram[k][c]` counts samples of class `c` held by client `k`.
    pub label_histogram: Vec<Vec<usize>>,
}

/// On-disk JSON shape of a [`PartitionMap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDocument {
    pub scenario: Scenario,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionMap {
    fn from_indices(
        scenario: Scenario,
        seed: u64,
        client_indices: Vec<Vec<usize>>,
        labels: &[usize],
    ) -> Self {
        let num_classes = num_classes(labels);
        let label_histogram = client_indices
            .iter()
            .map(|idx| {
                let mut row = vec![0usize; num_classes];
                for &i in idx {
                    row[labels[i]] += 1;
                }
                row
            })
            .collect();
        Self {
            scenario,
            seed,
            client_indices,
            label_histogram,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_histogram.first().map_or(0, Vec::len)
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    pub fn to_document(&self) -> PartitionDocument {
        PartitionDocument {
            scenario: self.scenario,
            seed: self.seed,
            clients: self.client_indices.clone(),
        }
    }

    /// Rebuilds a map from its JSON document, checking disjointness and index range.
    pub fn from_document(doc: PartitionDocument, labels: &[usize]) -> Result<Self> {
        let mut seen = vec![false; labels.len()];
        for idx in doc.clients.iter().flatten() {
            if *idx >= labels.len() {
                return invalid(format!("partition index {idx} outside dataset of {}", labels.len()));
            }
            if std::mem::replace(&mut seen[*idx], true) {
                return invalid(format!("partition index {idx} assigned twice"));
            }
        }
        Ok(Self::from_indices(doc.scenario, doc.seed, doc.clients, labels))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str, labels: &[usize]) -> Result<Self> {
        let doc: PartitionDocument = serde_json::from_str(text)?;
        Self::from_document(doc, labels)
    }
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn class_members(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    members
}

fn check_common(labels: &[usize], spec: &PartitionSpec, expected: Scenario) -> Result<()> {
    if spec.scenario != expected {
        return invalid(format!(
            "spec scenario is {}, expected {expected}",
            spec.scenario
        ));
    }
    if labels.is_empty() {
        return invalid("dataset is empty");
    }
    spec.validate(Some(num_classes(labels)))?;
    if spec.num_clients > labels.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{} clients but only {} samples",
            spec.num_clients,
            labels.len()
        )));
    }
    Ok(())
}

/// Draws from Dirichlet(alpha * 1_k). Sampling happens in log space so that very
/// small concentrations do not underflow every component to zero.
pub fn sample_dirichlet(rng: &mut SimRng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha + 1 is a valid gamma shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Splits `total` into integer parts proportional to `weights`, preserving the
/// total exactly. Remainders go to the largest fractional parts, lower index first.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| if sum > 0.0 { total as f64 * w / sum } else { 0.0 })
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    let mut cursor = 0;
    while remaining > 0 {
        counts[order[cursor % order.len()]] += 1;
        remaining -= 1;
        cursor += 1;
    }
    counts
}

/// Dirichlet split restricted to the given per-class member lists.
fn dirichlet_split(
    members: &[Vec<usize>],
    num_clients: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Vec<Vec<usize>> {
    let shuffled: Vec<Vec<usize>> = members
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.shuffle(rng);
            m
        })
        .collect();
    let mut counts: Vec<Vec<usize>> = shuffled
        .iter()
        .map(|m| {
            if m.is_empty() {
                vec![0; num_clients]
            } else {
                largest_remainder(m.len(), &sample_dirichlet(rng, alpha, num_clients))
            }
        })
        .collect();

    let totals = |counts: &[Vec<usize>]| -> Vec<usize> {
        (0..num_clients)
            .map(|k| counts.iter().map(|row| row[k]).sum())
            .collect()
    };

    // Empty-client repair, stage one: redraw the proportions of the largest class.
    if let Some(largest) = (0..shuffled.len()).max_by_key(|&c| (shuffled[c].len(), usize::MAX - c)) {
        for _ in 0..MAX_REDRAWS {
            if totals(&counts).iter().all(|&t| t > 0) {
                break;
            }
            counts[largest] = largest_remainder(
                shuffled[largest].len(),
                &sample_dirichlet(rng, alpha, num_clients),
            );
        }
    }

    let mut clients = vec![Vec::new(); num_clients];
    for (class_members, class_counts) in shuffled.iter().zip(&counts) {
        let mut start = 0;
        for (k, &n) in class_counts.iter().enumerate() {
            clients[k].extend_from_slice(&class_members[start..start + n]);
            start += n;
        }
    }

    // Stage two: move single samples from the largest client.
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by_key(|&k| (clients[k].len(), usize::MAX - k))
            .expect("at least one client");
        if clients[donor].len() <= 1 {
            break;
        }
        let moved = clients[donor].pop().expect("donor is non-empty");
        clients[empty].push(moved);
    }

    for c in &mut clients {
        c.sort_unstable();
    }
    clients
}

pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<PartitionMap> {
    check_common(labels, spec, Scenario::Dirichlet)?;
    let mut rng = rng_from(spec.seed, &[stream::PARTITION, 0]);
    let members = class_members(labels, num_classes(labels));
    let clients = dirichlet_split(&members, spec.num_clients, spec.alpha, &mut rng);
    Ok(PartitionMap::from_indices(Scenario::Dirichlet, spec.seed, clients, labels))
}

/// Class ids assigned to each client by the round-robin over a shuffled class list.
pub fn extreme_class_assignment(
    num_classes: usize,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = rng_from(seed, &[stream::PARTITION, 1]);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    (0..num_clients)
        .map(|k| {
            (0..classes_per_client)
                .map(|j| order[(k * classes_per_client + j) % num_classes])
                .collect()
        })
        .collect()
}

pub fn extreme_partition(labels: &[usize], spec: &PartitionSpec) -> Result<PartitionMap> {
    check_common(labels, spec, Scenario::Extreme)?;
    let c = num_classes(labels);
    let assignment = extreme_class_assignment(c, spec.num_clients, spec.classes_per_client, spec.seed);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (k, classes) in assignment.iter().enumerate() {
        for &class in classes {
            holders[class].push(k);
        }
    }

    let mut rng = rng_from(spec.seed, &[stream::PARTITION, 2]);
    let mut clients = vec![Vec::new(); spec.num_clients];
    for (class, mut members) in class_members(labels, c).into_iter().enumerate() {
        let owners = &holders[class];
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &vec![1.0; owners.len()]);
        let mut start = 0;
        for (&k, n) in owners.iter().zip(counts) {
            clients[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionMap::from_indices(Scenario::Extreme, spec.seed, clients, labels))
}

/// Per-class sample counts retained by the exponential long-tail profile.
pub fn longtail_counts(class_sizes: &[usize], rho: f64) -> Result<Vec<usize>> {
    if !(rho >= 1.0 && rho.is_finite()) {
        return invalid(format!("imbalance_ratio must be >= 1, got {rho}"));
    }
    let c = class_sizes.len();
    let n_max = class_sizes.iter().copied().max().unwrap_or(0);
    Ok(class_sizes
        .iter()
        .enumerate()
        .map(|(class, &available)| {
            let target = if c <= 1 {
                n_max as f64
            } else {
                n_max as f64 * rho.powf(-(class as f64) / (c as f64 - 1.0))
            };
            (target.round() as usize).clamp(1, available.max(1)).min(available)
        })
        .collect())
}

pub fn longtail_partition(labels: &[usize], spec: &PartitionSpec) -> Result<PartitionMap> {
    check_common(labels, spec, Scenario::Longtail)?;
    let c = num_classes(labels);
    let mut members = class_members(labels, c);
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let keep = longtail_counts(&sizes, spec.imbalance_ratio)?;

    let mut rng = rng_from(spec.seed, &[stream::PARTITION, 3]);
    for (m, &n) in members.iter_mut().zip(&keep) {
        m.shuffle(&mut rng);
        m.truncate(n);
        m.sort_unstable();
    }
    let retained: usize = keep.iter().sum();
    if spec.num_clients > retained {
        return Err(Error::InfeasiblePartition(format!(
            "{} clients but only {retained} retained samples",
            spec.num_clients
        )));
    }
    let mut split_rng = rng_from(spec.seed, &[stream::PARTITION, 4]);
    let clients = dirichlet_split(&members, spec.num_clients, spec.alpha, &mut split_rng);
    Ok(PartitionMap::from_indices(Scenario::Longtail, spec.seed, clients, labels))
}

/// Dispatches on the spec's scenario.
pub fn partition(labels: &[usize], spec: &PartitionSpec) -> Result<PartitionMap> {
    match spec.scenario {
        Scenario::Dirichlet => dirichlet_partition(labels, spec),
        Scenario::Extreme => extreme_partition(labels, spec),
        Scenario::Longtail => longtail_partition(labels, spec),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionStats {
    pub sample_counts: Vec<usize>,
    /// Shannon entropy (nats) of each client's label distribution.
    pub label_entropy: Vec<f64>,
    /// Number of classes with at least one sample, per client.
    pub label_support: Vec<usize>,
    /// Total-variation distance between client label distributions.
    pub pairwise_tv: Vec<Vec<f64>>,
    /// Total-variation distance of each client from the pooled label distribution.
    pub tv_to_global: Vec<f64>,
}

fn distribution(row: &[usize]) -> Vec<f64> {
    let n: usize = row.iter().sum();
    row.iter()
        .map(|&x| if n == 0 { 0.0 } else { x as f64 / n as f64 })
        .collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn partition_stats(map: &PartitionMap) -> PartitionStats {
    let dists: Vec<Vec<f64>> = map.label_histogram.iter().map(|r| distribution(r)).collect();
    let pooled: Vec<usize> = (0..map.num_classes())
        .map(|c| map.label_histogram.iter().map(|r| r[c]).sum())
        .collect();
    let global = distribution(&pooled);
    PartitionStats {
        sample_counts: map.client_sizes(),
        label_entropy: dists.iter().map(|d| entropy(d)).collect(),
        label_support: map
            .label_histogram
            .iter()
            .map(|r| r.iter().filter(|&&x| x > 0).count())
            .collect(),
        pairwise_tv: dists
            .iter()
            .map(|a| dists.iter().map(|b| total_variation(a, b)).collect())
            .collect(),
        tv_to_global: dists.iter().map(|d| total_variation(d, &global)).collect(),
    }
}

/// Union of all client index sets, sorted.
pub fn covered_indices(map: &PartitionMap) -> BTreeSet<usize> {
    map.client_indices.iter().flatten().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn assert_valid(map: &PartitionMap, n: usize) {
        let mut seen = vec![false; n];
        for idx in map.client_indices.iter().flatten() {
            assert!(!seen[*idx], "index {idx} duplicated");
            seen[*idx] = true;
        }
        for (k, row) in map.label_histogram.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), map.client_indices[k].len());
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(10, 20);
        for alpha in [0.05, 1.0, 100.0] {
            let map = dirichlet_partition(&labels, &PartitionSpec::dirichlet(1, alpha, 3)).unwrap();
            assert_eq!(map.client_indices[0], (0..200).collect::<Vec<_>>());
        }
    }

    #[test]
    fn standard_alphas_give_nonempty_clients() {
        let labels = balanced_labels(10, 100);
        for alpha in [0.05, 0.2, 0.5] {
            for seed in 0..10 {
                let map = dirichlet_partition(&labels, &PartitionSpec::dirichlet(10, alpha, seed)).unwrap();
                assert_valid(&map, labels.len());
                assert_eq!(map.total_samples(), labels.len());
                assert!(map.client_sizes().iter().all(|&n| n > 0));
            }
        }
    }

    #[test]
    fn tiny_dataset_with_tiny_alpha_repairs_empty_clients() {
        let labels = vec![0, 0, 1, 1, 2];
        for seed in 0..30 {
            let map = dirichlet_partition(&labels, &PartitionSpec::dirichlet(5, 0.01, seed)).unwrap();
            assert!(map.client_sizes().iter().all(|&n| n == 1), "seed {seed}");
        }
    }

    #[test]
    fn errors_on_empty_and_overfull() {
        let spec = PartitionSpec::dirichlet(3, 0.5, 0);
        assert!(matches!(dirichlet_partition(&[], &spec), Err(Error::InvalidInput(_))));
        assert!(matches!(
            dirichlet_partition(&[0, 1], &spec),
            Err(Error::InfeasiblePartition(_))
        ));
        let bad = PartitionSpec::dirichlet(2, 0.0, 0);
        assert!(matches!(dirichlet_partition(&[0, 1], &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn extreme_two_classes_per_client_counting() {
        let labels = balanced_labels(10, 50);
        let map = extreme_partition(&labels, &PartitionSpec::extreme(10, 2, 11)).unwrap();
        assert_valid(&map, labels.len());
        assert_eq!(map.total_samples(), labels.len());
        let stats = partition_stats(&map);
        assert!(stats.label_support.iter().all(|&s| s == 2));
        let mut holders = vec![0usize; 10];
        for row in &map.label_histogram {
            for (c, &n) in row.iter().enumerate() {
                if n > 0 {
                    holders[c] += 1;
                    assert_eq!(n, 25);
                }
            }
        }
        assert!(holders.iter().all(|&h| h == 2));
    }

    #[test]
    fn extreme_full_support_and_single_client() {
        let labels = balanced_labels(4, 10);
        let map = extreme_partition(&labels, &PartitionSpec::extreme(3, 4, 0)).unwrap();
        assert!(partition_stats(&map).label_support.iter().all(|&s| s == 4));
        let one = extreme_partition(&labels, &PartitionSpec::extreme(1, 4, 0)).unwrap();
        assert_eq!(one.client_sizes(), vec![40]);
    }

    #[test]
    fn extreme_rejects_too_many_classes() {
        let labels = balanced_labels(4, 10);
        assert!(matches!(
            extreme_partition(&labels, &PartitionSpec::extreme(3, 5, 0)),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            extreme_partition(&labels, &PartitionSpec::extreme(1, 2, 0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn longtail_smallest_class_arithmetic() {
        let counts = longtail_counts(&[5000; 10], 100.0).unwrap();
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 50);
        assert_eq!(longtail_counts(&[30; 5], 1.0).unwrap(), vec![30; 5]);
        assert!(matches!(longtail_counts(&[3, 3], 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn longtail_partition_retains_profile() {
        let labels = balanced_labels(10, 500);
        let map = longtail_partition(&labels, &PartitionSpec::longtail(5, 10.0, 0.5, 4)).unwrap();
        assert_valid(&map, labels.len());
        let pooled: Vec<usize> = (0..10)
            .map(|c| map.label_histogram.iter().map(|r| r[c]).sum())
            .collect();
        assert_eq!(pooled, longtail_counts(&[500; 10], 10.0).unwrap());
        assert!(map.client_sizes().iter().all(|&n| n > 0));
    }

    #[test]
    fn stats_entropy_of_balanced_two_class_split() {
        let map = PartitionMap::from_indices(
            Scenario::Dirichlet,
            0,
            vec![vec![0, 1], vec![2, 3]],
            &[0, 1, 0, 1],
        );
        let stats = partition_stats(&map);
        for h in stats.label_entropy {
            assert!((h - 2f64.ln()).abs() < 1e-12);
        }
        assert_eq!(stats.pairwise_tv[0][1], 0.0);
    }

    #[test]
    fn json_round_trip_and_rejects_duplicates() {
        let labels = balanced_labels(3, 10);
        let map = dirichlet_partition(&labels, &PartitionSpec::dirichlet(3, 0.5, 2)).unwrap();
        let back = PartitionMap::from_json(&map.to_json().unwrap(), &labels).unwrap();
        assert_eq!(back, map);
        let text = r#"{"scenario":"dirichlet","seed":0,"clients":[[0,1],[1]]}"#;
        assert!(PartitionMap::from_json(text, &labels).is_err());
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.5, 0.5]).iter().sum::<usize>(), 7);
        assert_eq!(largest_remainder(0, &[0.2, 0.8]), vec![0, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partitions_are_disjoint_covering_and_deterministic(
            classes in 1usize..6,
            per_class in 1usize..30,
            clients in 1usize..6,
            alpha in 0.02f64..20.0,
            seed in any::<u64>(),
            scenario in 0u8..3,
        ) {
            let labels = balanced_labels(classes, per_class);
            prop_assume!(clients <= labels.len());
            let spec = match scenario {
                0 => PartitionSpec::dirichlet(clients, alpha, seed),
                1 => {
                    let s = classes.div_ceil(clients).max(1);
                    PartitionSpec::extreme(clients, s, seed)
                }
                _ => PartitionSpec::longtail(clients, 1.0 + alpha, alpha, seed),
            };
            let first = partition(&labels, &spec);
            let second = partition(&labels, &spec);
            match (first, second) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    assert_valid(&a, labels.len());
                    if spec.scenario != Scenario::Longtail {
                        prop_assert_eq!(a.total_samples(), labels.len());
                    }
                }
                (Err(Error::InfeasiblePartition(_)), Err(Error::InfeasiblePartition(_))) => {}
                (a, b) => prop_assert!(false, "unexpected outcome {:?} / {:?}", a, b),
            }
        }
    }
}

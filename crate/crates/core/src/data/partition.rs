//! Non-IID client populations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::seeding::{self, tag};

const MAX_REDRAWS: usize = 100_000;

/// Disjoint, non-empty index lists, one per client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    client_indices: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness, non-emptiness and range against a dataset of
    /// `n` examples.
    pub fn new(client_indices: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if client_indices.is_empty() {
            return Err(invalid("partition", "no clients"));
        }
        let mut seen = vec![false; n];
        for (c, list) in client_indices.iter().enumerate() {
            if list.is_empty() {
                return Err(invalid("partition", format!("client {c} has no examples")));
            }
            for &i in list {
                if i >= n {
                    return Err(invalid("partition", format!("index {i} out of range {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(invalid("partition", format!("index {i} assigned twice")));
                }
            }
        }
        Ok(Self { client_indices })
    }

    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.client_indices[i]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.client_indices
    }

    pub fn total_assigned(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// Per-client class histogram.
    pub fn class_histograms<T: Scalar>(&self, ds: &Dataset<T>) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|list| {
                let mut h = vec![0; ds.num_classes()];
                for &i in list {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Sorted distinct labels held by each client.
    pub fn label_sets<T: Scalar>(&self, ds: &Dataset<T>) -> Vec<Vec<usize>> {
        self.class_histograms(ds)
            .into_iter()
            .map(|h| (0..h.len()).filter(|&k| h[k] > 0).collect())
            .collect()
    }
}

/// Indices sorted by label, then cut into `2 * clients` equal contiguous
/// shards. Each shard is tagged with its majority label.
fn label_sorted_shards<T: Scalar>(
    ds: &Dataset<T>,
    clients: usize,
    order: Vec<usize>,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if clients == 0 {
        return Err(invalid("clients", "must be >= 1"));
    }
    let shards = 2 * clients;
    if ds.len() % shards != 0 {
        return Err(invalid(
            "clients",
            format!("{} examples do not split into {shards} equal shards", ds.len()),
        ));
    }
    let mut sorted = order;
    sorted.sort_by_key(|&i| ds.labels()[i]);
    let size = ds.len() / shards;
    let pieces: Vec<Vec<usize>> = sorted.chunks(size).map(<[usize]>::to_vec).collect();
    let majority = pieces
        .iter()
        .map(|s| {
            let mut h = vec![0usize; ds.num_classes()];
            for &i in s {
                h[ds.labels()[i]] += 1;
            }
            // Lowest label wins ties.
            (0..h.len()).rev().max_by_key(|&k| h[k]).unwrap_or(0)
        })
        .collect();
    Ok((pieces, majority))
}

/// Sort-and-partition: every client gets two label-sorted shards with
/// different labels. The shard assignment is redrawn until that holds.
pub fn sort_and_partition<T: Scalar>(ds: &Dataset<T>, clients: usize, seed: u64) -> Result<Partition> {
    let (shards, majority) = label_sorted_shards(ds, clients, (0..ds.len()).collect())?;
    let mut rng = seeding::stream(seed, &[tag::PARTITION, 0]);
    let mut perm: Vec<usize> = (0..shards.len()).collect();
    for _ in 0..MAX_REDRAWS {
        perm.shuffle(&mut rng);
        if perm.chunks(2).all(|p| majority[p[0]] != majority[p[1]]) {
            let lists = perm
                .chunks(2)
                .map(|p| {
                    let mut l = shards[p[0]].clone();
                    l.extend_from_slice(&shards[p[1]]);
                    l
                })
                .collect();
            return Partition::new(lists, ds.len());
        }
    }
    Err(invalid(
        "partition",
        "could not give every client two shards with different labels",
    ))
}

/// Paired population: clients `2k` and `2k + 1` hold the same two labels.
///
/// Requires every label to fill exactly two shards, which is the case for a
/// balanced dataset with as many classes as clients. The seed only shuffles
/// examples within each label before sharding.
pub fn paired_partition<T: Scalar>(ds: &Dataset<T>, clients: usize, seed: u64) -> Result<Partition> {
    if clients % 2 != 0 {
        return Err(invalid("clients", "paired populations need an even client count"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seeding::stream(seed, &[tag::PARTITION, 1]));
    let (shards, majority) = label_sorted_shards(ds, clients, order)?;
    // Shards must arrive as [a, a, b, b, ...]: exactly two per label.
    let two_per_label = majority.chunks(2).all(|p| p[0] == p[1])
        && majority.chunks(2).zip(majority.chunks(2).skip(1)).all(|(a, b)| a[0] != b[0]);
    if !two_per_label {
        return Err(invalid("partition", "paired populations need exactly two shards per label"));
    }
    let mut lists = Vec::with_capacity(clients);
    for g in 0..clients / 2 {
        let base = 4 * g;
        for off in 0..2 {
            let mut l = shards[base + off].clone();
            l.extend_from_slice(&shards[base + 2 + off]);
            lists.push(l);
        }
    }
    Partition::new(lists, ds.len())
}

/// One draw from a symmetric Dirichlet with per-class concentration
/// `alpha`, via normalized `Gamma(alpha, 1)` variates. When every variate
/// underflows to zero the draw collapses onto a uniformly chosen vertex,
/// which is the small-concentration limit.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid("rho", e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        let hot = rng.random_range(0..k);
        Ok((0..k).map(|j| if j == hot { 1.0 } else { 0.0 }).collect())
    }
}

/// Largest-remainder rounding of `m * p` to integers summing to `m`.
fn allocate(p: &[f64], m: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * m as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let short = m - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Dirichlet population: client class proportions `c ~ Dir(rho * q)` with
/// uniform prior `q`; every client receives `n / clients` examples drawn
/// class by class without replacement. When a class pool runs dry the
/// shortfall is taken from the most-populated remaining class.
pub fn dirichlet_partition<T: Scalar>(
    ds: &Dataset<T>,
    clients: usize,
    rho: f64,
    seed: u64,
) -> Result<Partition> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid("rho", "must be finite and > 0"));
    }
    if clients == 0 || clients > ds.len() {
        return Err(invalid(
            "clients",
            format!("need 1 <= clients <= {} examples", ds.len()),
        ));
    }
    let k = ds.num_classes();
    let mut rng = seeding::stream(seed, &[tag::PARTITION, 2]);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let per_client = ds.len() / clients;
    let alpha = rho / k as f64;
    let mut lists = Vec::with_capacity(clients);
    for _ in 0..clients {
        let p = sample_dirichlet(&mut rng, alpha, k)?;
        let mut list = Vec::with_capacity(per_client);
        let mut shortfall = 0;
        for (class, want) in allocate(&p, per_client).into_iter().enumerate() {
            let take = want.min(pools[class].len());
            let at = pools[class].len() - take;
            list.extend(pools[class].drain(at..));
            shortfall += want - take;
        }
        while shortfall > 0 {
            let fullest = (0..k)
                .max_by_key(|&c| (pools[c].len(), std::cmp::Reverse(c)))
                .expect("at least one class");
            let take = shortfall.min(pools[fullest].len());
            let at = pools[fullest].len() - take;
            list.extend(pools[fullest].drain(at..));
            shortfall -= take;
        }
        lists.push(list);
    }
    Partition::new(lists, ds.len())
}

//! Synthetic task families with cluster-structured relatedness.
//!
//! Inputs are standard normal. Each cluster `c` owns a smooth latent map
//! `φ_c(x) = sin(A_c x + β_c)`. A task of cluster `c` reads out
//! `z = (1 − leak) φ_c(x) + leak · mean_{c' ≠ c} φ_{c'}(x)` through a vector
//! close to the cluster prototype, then adds noise, a random scale and a
//! random offset. Pre-training domains, one per cluster, read the cluster's
//! latents out through unrelated random vectors.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, SplitDataset, DEFAULT_SPLIT_RATIOS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, tag, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilyConfig {
    pub n_clusters: usize,
    pub tasks_per_cluster: usize,
    pub downstream_tasks: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub samples_upstream: usize,
    pub samples_downstream: usize,
    pub noise_sigma: f64,
    pub cross_cluster_leak: f64,
    /// Standard deviation of a task readout around its cluster prototype.
    pub readout_spread: f64,
    /// Gain of the latent maps; larger means more curvature.
    pub latent_gain: f64,
    /// Pre-training domains per cluster, each a random readout of the
    /// cluster's latents. Matching `latent_dim` lets pre-training cover each
    /// cluster's full latent space.
    pub pretrain_readouts: usize,
    pub seed: u64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        TaskFamilyConfig {
            n_clusters: 4,
            tasks_per_cluster: 3,
            downstream_tasks: 8,
            input_dim: 16,
            latent_dim: 4,
            samples_upstream: 2000,
            samples_downstream: 300,
            noise_sigma: 0.1,
            cross_cluster_leak: 0.05,
            readout_spread: 0.3,
            latent_gain: 1.0,
            pretrain_readouts: 4,
            seed: 42,
        }
    }
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_clusters", self.n_clusters),
            ("tasks_per_cluster", self.tasks_per_cluster),
            ("downstream_tasks", self.downstream_tasks),
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("pretrain_readouts", self.pretrain_readouts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.samples_upstream < 3 || self.samples_downstream < 3 {
            return Err(Error::InvalidInput("every task needs at least 3 samples".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.readout_spread >= 0.0) || !(self.latent_gain > 0.0) {
            return Err(Error::InvalidInput(
                "noise_sigma and readout_spread must be non-negative, latent_gain positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.cross_cluster_leak) {
            return Err(Error::InvalidInput("cross_cluster_leak must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One cluster's latent map `x ↦ sin(A x + β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub a: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

impl LatentMap {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.beta)
            .map(|(row, b)| (crate::numerics::dot(row, x) + b).sin())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub cluster: usize,
    pub readout: Vec<f64>,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub config: TaskFamilyConfig,
    pub latent_maps: Vec<LatentMap>,
    pub upstream_specs: Vec<TaskSpec>,
    pub downstream_specs: Vec<TaskSpec>,
    /// Upstream tasks, split once.
    pub upstream: Vec<SplitDataset>,
    /// Downstream tasks before splitting; see [`TaskFamily::downstream_split`].
    pub downstream: Vec<LabeledDataset>,
    /// Auxiliary tasks for backbone pre-training, one per cluster.
    pub pretrain_domains: Vec<SplitDataset>,
    /// Task name to cluster index, for upstream and downstream tasks.
    pub ground_truth_cluster: BTreeMap<String, usize>,
}

impl TaskFamily {
    /// Features of cluster `c` before any readout or leakage.
    pub fn oracle_latents(&self, cluster: usize, x: &[f64]) -> Vec<f64> {
        self.latent_maps[cluster].eval(x)
    }

    /// Noise-free mixed latent vector `z` seen by tasks of `cluster`.
    pub fn mixed_latents(&self, cluster: usize, x: &[f64]) -> Vec<f64> {
        mixed(&self.latent_maps, cluster, x, self.config.cross_cluster_leak)
    }

    /// Split of downstream task `task` under split seed `split`.
    pub fn downstream_split(&self, task: usize, split: usize) -> Result<SplitDataset> {
        self.downstream[task].split(
            DEFAULT_SPLIT_RATIOS,
            derive_seed(self.config.seed, &[tag("downstream-split"), task as u64, split as u64]),
        )
    }
}

fn mixed(maps: &[LatentMap], cluster: usize, x: &[f64], leak: f64) -> Vec<f64> {
    let own = maps[cluster].eval(x);
    if maps.len() == 1 || leak == 0.0 {
        return own;
    }
    let mut others = vec![0.0; own.len()];
    for map in maps.iter().enumerate().filter(|(c, _)| *c != cluster).map(|(_, m)| m) {
        for (o, v) in others.iter_mut().zip(map.eval(x)) {
            *o += v;
        }
    }
    let n_others = (maps.len() - 1) as f64;
    own.iter()
        .zip(&others)
        .map(|(a, b)| (1.0 - leak) * a + leak * b / n_others)
        .collect()
}

fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn sample_inputs(rng: &mut Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn make_task(
    maps: &[LatentMap],
    spec: &TaskSpec,
    cfg: &TaskFamilyConfig,
    m: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = rng_from(seed);
    let features = sample_inputs(&mut rng, m, cfg.input_dim);
    let targets = features
        .iter()
        .map(|x| {
            let z = mixed(maps, spec.cluster, x, cfg.cross_cluster_leak);
            let noise: f64 = StandardNormal.sample(&mut rng);
            spec.scale * (crate::numerics::dot(&spec.readout, &z) + cfg.noise_sigma * noise) + spec.offset
        })
        .collect();
    LabeledDataset::new(spec.name.clone(), features, targets)
}

/// Deterministic family for `cfg`. Downstream task `t` belongs to cluster
/// `t mod n_clusters`, so every downstream task has related upstream tasks.
pub fn generate_task_family(cfg: &TaskFamilyConfig) -> Result<TaskFamily> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(cfg.seed, &[tag("family")]));
    let gain = cfg.latent_gain / (cfg.input_dim as f64).sqrt();
    let latent_maps: Vec<LatentMap> = (0..cfg.n_clusters)
        .map(|_| LatentMap {
            a: (0..cfg.latent_dim)
                .map(|_| normal_vec(&mut rng, cfg.input_dim, gain))
                .collect(),
            beta: (0..cfg.latent_dim)
                .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                .collect(),
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| normal_vec(&mut rng, cfg.latent_dim, 1.0))
        .collect();

    let spec = |name: String, cluster: usize, rng: &mut Rng| TaskSpec {
        name,
        cluster,
        readout: prototypes[cluster]
            .iter()
            .zip(normal_vec(rng, cfg.latent_dim, 1.0))
            .map(|(p, n)| p + cfg.readout_spread * n)
            .collect(),
        scale: rng.random_range(0.5..3.0),
        offset: rng.random_range(-2.0..2.0),
    };
    let mut upstream_specs = vec![];
    for c in 0..cfg.n_clusters {
        for k in 0..cfg.tasks_per_cluster {
            upstream_specs.push(spec(format!("up-c{c}-t{k}"), c, &mut rng));
        }
    }
    let downstream_specs: Vec<TaskSpec> = (0..cfg.downstream_tasks)
        .map(|t| spec(format!("down-{t}-c{}", t % cfg.n_clusters), t % cfg.n_clusters, &mut rng))
        .collect();
    let pool_readouts: Vec<(usize, Vec<f64>)> = (0..cfg.n_clusters)
        .flat_map(|c| (0..cfg.pretrain_readouts).map(move |_| c))
        .map(|c| (c, normal_vec(&mut rng, cfg.latent_dim, 1.0)))
        .collect();

    let upstream = upstream_specs
        .iter()
        .enumerate()
        .map(|(t, s)| {
            make_task(&latent_maps, s, cfg, cfg.samples_upstream, derive_seed(cfg.seed, &[tag("upstream"), t as u64]))?
                .split(DEFAULT_SPLIT_RATIOS, derive_seed(cfg.seed, &[tag("upstream-split"), t as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let downstream = downstream_specs
        .iter()
        .enumerate()
        .map(|(t, s)| {
            make_task(&latent_maps, s, cfg, cfg.samples_downstream, derive_seed(cfg.seed, &[tag("downstream"), t as u64]))
        })
        .collect::<Result<Vec<_>>>()?;

    let pretrain_domains = pool_readouts
        .into_iter()
        .enumerate()
        .map(|(d, (c, readout))| {
            let spec = TaskSpec {
                name: format!("pretrain-c{c}-r{}", d % cfg.pretrain_readouts),
                cluster: c,
                readout,
                scale: 1.0,
                offset: 0.0,
            };
            let pure = TaskFamilyConfig { cross_cluster_leak: 0.0, ..cfg.clone() };
            make_task(&latent_maps, &spec, &pure, cfg.samples_upstream, derive_seed(cfg.seed, &[tag("pretrain"), d as u64]))?
                .split(DEFAULT_SPLIT_RATIOS, derive_seed(cfg.seed, &[tag("pretrain-split"), d as u64]))
        })
        .collect::<Result<Vec<_>>>()?;

    let ground_truth_cluster = upstream_specs
        .iter()
        .chain(&downstream_specs)
        .map(|s| (s.name.clone(), s.cluster))
        .collect();
    Ok(TaskFamily {
        config: cfg.clone(),
        latent_maps,
        upstream_specs,
        downstream_specs,
        upstream,
        downstream,
        pretrain_domains,
        ground_truth_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::fit_head;

    fn small(seed: u64) -> TaskFamilyConfig {
        TaskFamilyConfig {
            samples_upstream: 200,
            samples_downstream: 120,
            seed,
            ..TaskFamilyConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_task_family(&small(3)).unwrap();
        let b = generate_task_family(&small(3)).unwrap();
        let c = generate_task_family(&small(4)).unwrap();
        assert_eq!(a.upstream, b.upstream);
        assert_eq!(a.downstream, b.downstream);
        assert_eq!(a.pretrain_domains, b.pretrain_domains);
        assert_ne!(a.downstream, c.downstream);
        assert_eq!(a.downstream_split(2, 1).unwrap(), b.downstream_split(2, 1).unwrap());
        assert_ne!(a.downstream_split(2, 1).unwrap(), a.downstream_split(2, 2).unwrap());
    }

    #[test]
    fn shapes_and_cluster_assignment() {
        let f = generate_task_family(&small(1)).unwrap();
        assert_eq!(f.upstream.len(), 12);
        assert_eq!(f.downstream.len(), 8);
        assert_eq!(f.upstream[0].train.len() + f.upstream[0].val.len() + f.upstream[0].test.len(), 200);
        for (t, s) in f.downstream_specs.iter().enumerate() {
            assert_eq!(s.cluster, t % 4);
            assert!(f.upstream_specs.iter().any(|u| u.cluster == s.cluster));
            assert_eq!(f.ground_truth_cluster[&s.name], s.cluster);
        }
    }

    #[test]
    fn noiseless_targets_are_exact_functions_of_cluster_latents() {
        let cfg = TaskFamilyConfig {
            noise_sigma: 0.0,
            cross_cluster_leak: 0.0,
            ..small(5)
        };
        let f = generate_task_family(&cfg).unwrap();
        for (t, spec) in f.downstream_specs.iter().enumerate() {
            for (x, y) in f.downstream[t].iter() {
                let z = f.oracle_latents(spec.cluster, x);
                let expected = spec.scale * crate::numerics::dot(&spec.readout, &z) + spec.offset;
                assert_eq!(y, expected);
            }
        }
    }

    fn probe_mse(features: &[Vec<f64>], targets: &[f64]) -> f64 {
        let head = fit_head(features, targets).unwrap();
        features
            .iter()
            .zip(targets)
            .map(|(f, y)| (head.predict(f) - y).powi(2))
            .sum::<f64>()
            / targets.len() as f64
    }

    /// A linear probe on task A's oracle latents predicts task B's targets
    /// better when A and B share a cluster.
    #[test]
    fn within_cluster_probes_beat_cross_cluster_probes() {
        let (mut wins, mut total) = (0, 0);
        for seed in 0..10 {
            let f = generate_task_family(&small(100 + seed)).unwrap();
            for (b, spec_b) in f.downstream_specs.iter().enumerate() {
                let data = &f.downstream[b];
                let y: Vec<f64> = data.targets().iter().map(|t| (t - spec_b.offset) / spec_b.scale).collect();
                let own: Vec<Vec<f64>> = data.features().iter().map(|x| f.oracle_latents(spec_b.cluster, x)).collect();
                let within = probe_mse(&own, &y);
                for c in (0..f.config.n_clusters).filter(|&c| c != spec_b.cluster) {
                    let other: Vec<Vec<f64>> = data.features().iter().map(|x| f.oracle_latents(c, x)).collect();
                    total += 1;
                    if within < probe_mse(&other, &y) {
                        wins += 1;
                    }
                }
            }
        }
        assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
    }

    #[test]
    fn config_validation() {
        assert!(TaskFamilyConfig { n_clusters: 0, ..small(1) }.validate().is_err());
        assert!(TaskFamilyConfig { cross_cluster_leak: 1.0, ..small(1) }.validate().is_err());
        assert!(TaskFamilyConfig { noise_sigma: -0.1, ..small(1) }.validate().is_err());
        let parsed: TaskFamilyConfig = toml::from_str("n_clusters = 2\nseed = 9").unwrap();
        assert_eq!(parsed.n_clusters, 2);
        assert_eq!(parsed.samples_downstream, 300);
        assert!(toml::from_str::<TaskFamilyConfig>("bogus = 1").is_err());
    }
}

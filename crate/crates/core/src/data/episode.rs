//! n-way k-shot episodes with optional support/query domain shift.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridDataset;
use super::split::{SplitPart, SplitSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Support and query come from different domains.
    pub shifted: bool,
}

impl Default for EpisodeConfig {
    /// 5-way 1-shot, 8 queries per class, shifted.
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_per_class: 8,
            shifted: true,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_per_class < 1 {
            return Err(Error::Config(format!(
                "episode needs n_way >= 2, k_shot >= 1, q_per_class >= 1; got {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.q_per_class
            )));
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_size(&self) -> usize {
        self.n_way * self.q_per_class
    }
}

/// Raw features of one episode. Labels index into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_features: Array2<f64>,
    pub support_labels: Vec<usize>,
    pub query_features: Array2<f64>,
    pub query_labels: Vec<usize>,
    /// Dataset class ids, in label order.
    pub classes: Vec<usize>,
    pub source_domain: usize,
    pub target_domain: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Support rows followed by query rows.
    pub fn joint_features(&self) -> Array2<f64> {
        ndarray::concatenate(
            Axis(0),
            &[self.support_features.view(), self.query_features.view()],
        )
        .expect("support and query share the feature dimension")
    }
}

/// Episodes of one split part. Episode `i` under seed `s` depends only on
/// `(dataset, split, part, config, s, i)`.
#[derive(Clone, Debug)]
pub struct EpisodeSampler<'a> {
    dataset: &'a GridDataset,
    part: SplitPart,
    classes: Vec<usize>,
    domains: Vec<usize>,
    config: EpisodeConfig,
}

impl<'a> EpisodeSampler<'a> {
    /// Checks that the part can serve the configuration at all; cell sizes
    /// are checked per episode.
    pub fn new(dataset: &'a GridDataset, split: &SplitSpec, part: SplitPart, config: EpisodeConfig) -> Result<Self> {
        config.validate()?;
        split.validate(dataset.class_count(), dataset.domain_count())?;
        let classes = split.classes.part(part).to_vec();
        let domains = split.domains.part(part).to_vec();
        if classes.len() < config.n_way {
            return Err(Error::InsufficientPart {
                part: part.name(),
                axis: "classes",
                available: classes.len(),
                needed: config.n_way,
            });
        }
        let needed_domains = if config.shifted { 2 } else { 1 };
        if domains.len() < needed_domains {
            return Err(Error::InsufficientPart {
                part: part.name(),
                axis: "domains",
                available: domains.len(),
                needed: needed_domains,
            });
        }
        Ok(Self {
            dataset,
            part,
            classes,
            domains,
            config,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn part(&self) -> SplitPart {
        self.part
    }

    pub fn sample(&self, seed: u64, episode_index: u64) -> Result<Episode> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(episode_index);

        let classes: Vec<usize> = index::sample(&mut rng, self.classes.len(), cfg.n_way)
            .into_iter()
            .map(|i| self.classes[i])
            .collect();
        let nd = self.domains.len();
        let source = rng.random_range(0..nd);
        let target = if cfg.shifted {
            // uniform over ordered pairs with distinct members
            let t = rng.random_range(0..nd - 1);
            if t >= source {
                t + 1
            } else {
                t
            }
        } else {
            source
        };
        let (source_domain, target_domain) = (self.domains[source], self.domains[target]);

        let d = self.dataset.d_in();
        let mut support = Array2::zeros((cfg.support_size(), d));
        let mut query = Array2::zeros((cfg.query_size(), d));
        let mut support_labels = Vec::with_capacity(cfg.support_size());
        let mut query_labels = Vec::with_capacity(cfg.query_size());
        for (label, &class) in classes.iter().enumerate() {
            let picks = |rng: &mut ChaCha8Rng, domain: usize, needed: usize| -> Result<Vec<usize>> {
                let available = self.dataset.cell_len(domain, class)?;
                if available < needed {
                    return Err(Error::InsufficientCell {
                        domain,
                        class,
                        available,
                        needed,
                    });
                }
                Ok(index::sample(rng, available, needed).into_vec())
            };
            let (s_idx, q_idx) = if source_domain == target_domain {
                let all = picks(&mut rng, source_domain, cfg.k_shot + cfg.q_per_class)?;
                let (s, q) = all.split_at(cfg.k_shot);
                (s.to_vec(), q.to_vec())
            } else {
                let s = picks(&mut rng, source_domain, cfg.k_shot)?;
                let q = picks(&mut rng, target_domain, cfg.q_per_class)?;
                (s, q)
            };
            let s_cell = self.dataset.cell(source_domain, class)?;
            for (r, &i) in s_idx.iter().enumerate() {
                let row = label * cfg.k_shot + r;
                support.row_mut(row).assign(&s_cell.row(i).mapv(f64::from));
                support_labels.push(label);
            }
            let q_cell = self.dataset.cell(target_domain, class)?;
            for (r, &i) in q_idx.iter().enumerate() {
                let row = label * cfg.q_per_class + r;
                query.row_mut(row).assign(&q_cell.row(i).mapv(f64::from));
                query_labels.push(label);
            }
        }
        Ok(Episode {
            support_features: support,
            support_labels,
            query_features: query,
            query_labels,
            classes,
            source_domain,
            target_domain,
        })
    }
}

/// One-off convenience over [`EpisodeSampler`].
pub fn sample_episode(
    dataset: &GridDataset,
    split: &SplitSpec,
    part: SplitPart,
    config: EpisodeConfig,
    seed: u64,
    episode_index: u64,
) -> Result<Episode> {
    EpisodeSampler::new(dataset, split, part, config)?.sample(seed, episode_index)
}

//! Planted multi-behavior data with a known answer.
//!
//! Every user belongs to one archetype. Each (archetype, behavior) pair owns
//! a disjoint cluster of items, and every interaction draws its behavior from
//! a fixed frequency vector and its item uniformly from the matching cluster.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{header_path, write_header, write_interactions, DatasetHeader, Interaction, UserHistory};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    pub archetypes: usize,
    /// Inclusive range of interactions per user.
    pub seq_len_range: (usize, usize),
    pub behavior_frequencies: Vec<f64>,
    pub cluster_size: usize,
    pub seed: u64,
    pub behavior_names: Vec<String>,
}

impl SyntheticSpec {
    /// The planted setup used throughout the tests and examples.
    pub fn planted(seed: u64) -> Self {
        Self {
            num_users: 500,
            num_items: 200,
            num_behaviors: 4,
            archetypes: 5,
            seq_len_range: (10, 30),
            behavior_frequencies: vec![0.4, 0.2, 0.2, 0.2],
            cluster_size: 10,
            seed,
            behavior_names: default_behavior_names(4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_users == 0 || self.num_items == 0 || self.num_behaviors == 0 {
            return fail("synthetic sizes must be positive".into());
        }
        if self.archetypes == 0 || self.cluster_size == 0 {
            return fail("archetypes and cluster_size must be positive".into());
        }
        if self.archetypes * self.num_behaviors * self.cluster_size > self.num_items {
            return fail(format!(
                "{} archetypes x {} behaviors x {} items per cluster exceeds {} items",
                self.archetypes, self.num_behaviors, self.cluster_size, self.num_items
            ));
        }
        let (lo, hi) = self.seq_len_range;
        if lo == 0 || lo > hi {
            return fail(format!("invalid sequence length range ({lo}, {hi})"));
        }
        if self.behavior_frequencies.len() != self.num_behaviors {
            return fail("behavior_frequencies must have one entry per behavior".into());
        }
        let sum: f64 = self.behavior_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.behavior_frequencies.iter().any(|&p| !(p >= 0.0)) {
            return fail(format!("behavior_frequencies must be a probability vector (sum {sum})"));
        }
        Ok(())
    }
}

pub fn default_behavior_names(n: usize) -> Vec<String> {
    if n == 4 {
        ["click", "fav", "cart", "buy"].map(String::from).to_vec()
    } else {
        (0..n).map(|b| format!("b{b}")).collect()
    }
}

/// Ground truth of a planted dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub cluster_size: usize,
    /// Archetype of user `u`, indexed by user id.
    pub user_archetypes: Vec<usize>,
    /// `clusters[a][b]` lists the items of `C(a, b)`, ascending.
    pub clusters: Vec<Vec<Vec<u32>>>,
}

impl Manifest {
    pub fn archetype(&self, user: u32) -> usize {
        self.user_archetypes[user as usize]
    }

    pub fn cluster(&self, archetype: usize, behavior: usize) -> &[u32] {
        &self.clusters[archetype][behavior]
    }

    /// `(archetype, behavior)` owning `item`, if any.
    pub fn cluster_of(&self, item: u32) -> Option<(usize, usize)> {
        self.clusters.iter().enumerate().find_map(|(a, row)| {
            row.iter()
                .position(|c| c.binary_search(&item).is_ok())
                .map(|b| (a, b))
        })
    }

    /// Fraction of interactions whose item lies in the planted cluster of
    /// their user's archetype and their behavior.
    pub fn purity<'a>(&self, interactions: impl IntoIterator<Item = &'a Interaction>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for it in interactions {
            n += 1;
            let c = self.cluster(self.archetype(it.user_id), it.behavior_id as usize);
            hit += usize::from(c.binary_search(&it.item_id).is_ok());
        }
        hit as f64 / n.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "archetypes={}", self.clusters.len());
        let _ = writeln!(s, "num_behaviors={}", self.clusters.first().map_or(0, Vec::len));
        let _ = writeln!(s, "cluster_size={}", self.cluster_size);
        let arche: Vec<String> = self.user_archetypes.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "user_archetypes={}", arche.join(","));
        for (a, row) in self.clusters.iter().enumerate() {
            for (b, items) in row.iter().enumerate() {
                let items: Vec<String> = items.iter().map(ToString::to_string).collect();
                let _ = writeln!(s, "cluster {a} {b} {}", items.join(" "));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        let mut cluster_lines = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("cluster ") {
                let nums: std::result::Result<Vec<u64>, _> =
                    rest.split_whitespace().map(str::parse).collect();
                let nums = nums.map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: "malformed cluster line".into(),
                })?;
                if nums.len() < 2 {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: "cluster line needs archetype and behavior".into(),
                    });
                }
                cluster_lines.push(nums);
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("unexpected manifest line {line:?}"),
                });
            }
        }
        let num = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest: missing or bad {k}")))
        };
        let archetypes = num("archetypes")? as usize;
        let behaviors = num("num_behaviors")? as usize;
        let mut clusters = vec![vec![Vec::new(); behaviors]; archetypes];
        for nums in cluster_lines {
            let (a, b) = (nums[0] as usize, nums[1] as usize);
            if a >= archetypes || b >= behaviors {
                return Err(Error::Config(format!("manifest: cluster ({a}, {b}) out of range")));
            }
            clusters[a][b] = nums[2..].iter().map(|&x| x as u32).collect();
        }
        let user_archetypes = kv
            .get("user_archetypes")
            .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::parse).collect())
            .transpose()
            .map_err(|_| Error::Config("manifest: bad user_archetypes".into()))?
            .unwrap_or_default();
        Ok(Self {
            seed: num("seed")?,
            cluster_size: num("cluster_size")? as usize,
            user_archetypes,
            clusters,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// `data.tsv` → `data.tsv.manifest`.
pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub header: DatasetHeader,
    pub users: Vec<UserHistory>,
    pub manifest: Manifest,
}

impl SyntheticData {
    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.users.iter().flat_map(|u| u.interactions.iter())
    }

    /// Writes the interaction file plus its header and manifest siblings.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_interactions(path, &self.users)?;
        write_header(&header_path(path), &self.header)?;
        let m = manifest_path(path);
        fs::write(&m, self.manifest.to_text()).map_err(|e| Error::io(&m, e))
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut layout = stream(spec.seed, "synthetic-layout", 0);
    let mut items: Vec<u32> = (0..spec.num_items as u32).collect();
    items.shuffle(&mut layout);
    let mut chunks = items.chunks(spec.cluster_size);
    let clusters: Vec<Vec<Vec<u32>>> = (0..spec.archetypes)
        .map(|_| {
            (0..spec.num_behaviors)
                .map(|_| {
                    let mut c = chunks.next().expect("feasibility checked").to_vec();
                    c.sort_unstable();
                    c
                })
                .collect()
        })
        .collect();

    let behavior_dist = WeightedIndex::new(&spec.behavior_frequencies)
        .map_err(|e| Error::Config(format!("behavior_frequencies: {e}")))?;
    let (lo, hi) = spec.seq_len_range;
    let mut user_archetypes = Vec::with_capacity(spec.num_users);
    let mut users = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let mut rng = stream(spec.seed, "synthetic-user", u as u64);
        let a = rng.random_range(0..spec.archetypes);
        let n = rng.random_range(lo..=hi);
        let interactions = (0..n)
            .map(|k| {
                let b = behavior_dist.sample(&mut rng);
                let c = &clusters[a][b];
                Interaction {
                    user_id: u as u32,
                    item_id: c[rng.random_range(0..c.len())],
                    behavior_id: b as u32,
                    timestamp: k as u64,
                }
            })
            .collect();
        user_archetypes.push(a);
        users.push(UserHistory {
            user_id: u as u32,
            interactions,
        });
    }
    let mut names = spec.behavior_names.clone();
    if names.len() != spec.num_behaviors {
        names = default_behavior_names(spec.num_behaviors);
    }
    Ok(SyntheticData {
        header: DatasetHeader {
            num_users: spec.num_users,
            num_items: spec.num_items,
            num_behaviors: spec.num_behaviors,
            behavior_names: names,
        },
        users,
        manifest: Manifest {
            seed: spec.seed,
            cluster_size: spec.cluster_size,
            user_archetypes,
            clusters,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_users: 500,
            num_items: 200,
            num_behaviors: 4,
            archetypes: 5,
            seq_len_range: (5, 15),
            behavior_frequencies: vec![0.4, 0.2, 0.2, 0.2],
            cluster_size: 10,
            seed: 7,
            behavior_names: default_behavior_names(4),
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
        gen_synthetic(&small()).unwrap().write(&p1).unwrap();
        gen_synthetic(&small()).unwrap().write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read(manifest_path(&p1)).unwrap(),
            fs::read(manifest_path(&p2)).unwrap()
        );
    }

    #[test]
    fn every_interaction_lies_in_its_planted_cluster() {
        let data = gen_synthetic(&small()).unwrap();
        assert_eq!(data.manifest.purity(data.interactions()), 1.0);
    }

    #[test]
    fn clusters_are_disjoint_and_sized() {
        let m = gen_synthetic(&small()).unwrap().manifest;
        let mut all: Vec<u32> = m.clusters.iter().flatten().flatten().copied().collect();
        assert_eq!(all.len(), 5 * 4 * 10);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 200);
    }

    #[test]
    fn infeasible_allocation_is_a_config_error() {
        let mut s = small();
        s.cluster_size = 11;
        assert!(matches!(gen_synthetic(&s), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_round_trips() {
        let m = gen_synthetic(&small()).unwrap().manifest;
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn behavior_frequencies_match_over_many_interactions() {
        let mut s = small();
        s.num_users = 5000;
        s.seq_len_range = (20, 20);
        s.behavior_frequencies = vec![0.7, 0.1, 0.1, 0.1];
        let data = gen_synthetic(&s).unwrap();
        let mut counts = [0usize; 4];
        for it in data.interactions() {
            counts[it.behavior_id as usize] += 1;
        }
        let n: usize = counts.iter().sum();
        assert_eq!(n, 100_000);
        for (c, p) in counts.iter().zip(&s.behavior_frequencies) {
            assert!((*c as f64 / n as f64 - p).abs() <= 0.01);
        }
    }
}

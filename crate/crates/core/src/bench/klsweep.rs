//! Search efficiency as a function of prior mismatch.
//!
//! Scenarios are drawn with a random perturbation level, their KL divergence
//! measured, and each is kept only if its bucket still has room. Every
//! planner then runs every kept scenario and the per-bucket distribution of
//! search efficiency is summarized as box-plot statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{derive_seed, run_paired, ExperimentConfig, MatrixOutput};
use crate::envgen::{MagnitudeRange, Scenario};
use crate::error::{Error, Result};
use crate::planners::PLANNER_NAMES;

const LEVEL_STREAM: u64 = 2;
const SEED_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlSweepConfig {
    /// Ascending bucket edges in nats; bucket `i` is `[edges[i], edges[i+1])`
    /// except that the last bucket also holds its upper edge.
    pub edges: Vec<f64>,
    pub per_bucket: usize,
    pub max_attempts: usize,
    /// Perturbation magnitudes at level 1; each scenario uses a uniform
    /// random level in `[0, 1)` times these.
    pub shift_max: f64,
    pub mix_weight_max: f64,
    pub cell_sigma_max: f64,
    pub planners: Vec<String>,
}

impl Default for KlSweepConfig {
    fn default() -> Self {
        Self {
            edges: (0..=8).map(|i| 0.005 * i as f64).collect(),
            per_bucket: 5,
            max_attempts: 2000,
            shift_max: 4.0,
            mix_weight_max: 0.3,
            cell_sigma_max: 0.3,
            planners: ["greedy", "dp", "coverage", "pcoverage"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl KlSweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.edges.len() < 2 || self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return bad(format!("kl.edges must be strictly ascending, got {:?}", self.edges));
        }
        if self.edges[0] < 0.0 {
            return bad("kl.edges must start at a non-negative value".into());
        }
        if self.per_bucket == 0 {
            return bad("kl.per_bucket must be at least 1".into());
        }
        if [self.shift_max, self.mix_weight_max, self.cell_sigma_max]
            .iter()
            .any(|m| !(m.is_finite() && *m >= 0.0))
            || self.mix_weight_max > 1.0
        {
            return bad("kl perturbation maxima must be finite, non-negative, mix weight at most 1".into());
        }
        if self.planners.is_empty() {
            return bad("kl.planners must name at least one planner".into());
        }
        if let Some(p) = self.planners.iter().find(|p| !PLANNER_NAMES.contains(&p.as_str())) {
            return Err(Error::UnknownPlanner(p.clone()));
        }
        Ok(())
    }

    pub fn bucket_count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn bucket_of(&self, kl: f64) -> Option<usize> {
        let n = self.bucket_count();
        if kl < self.edges[0] || kl > self.edges[n] {
            return None;
        }
        Some((0..n).find(|&i| kl < self.edges[i + 1]).unwrap_or(n - 1))
    }
}

/// Minimum, quartiles, maximum and mean of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Box statistics with linearly interpolated quantiles (position `q*(n-1)`
/// in the sorted sample). `None` for an empty sample.
pub fn quartiles(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < v.len() {
            v[i] + frac * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlBucket {
    pub lo: f64,
    pub hi: f64,
    pub scenarios: Vec<Scenario>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlRow {
    pub bucket: usize,
    pub lo: f64,
    pub hi: f64,
    pub planner: String,
    pub episodes: usize,
    /// `None` when the bucket could not be populated.
    pub stats: Option<BoxStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlSweepOutput {
    pub buckets: Vec<KlBucket>,
    pub attempts: usize,
    pub rows: Vec<KlRow>,
    pub matrix: MatrixOutput,
}

impl KlSweepOutput {
    pub fn populated_buckets(&self) -> usize {
        self.buckets.iter().filter(|b| !b.scenarios.is_empty()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,kl_lo,kl_hi,planner,episodes,min,q1,median,q3,max,mean\n");
        for r in &self.rows {
            write!(s, "{},{},{},{},{}", r.bucket, r.lo, r.hi, r.planner, r.episodes).unwrap();
            match r.stats {
                Some(b) => writeln!(
                    s,
                    ",{},{},{},{},{},{}",
                    b.min, b.q1, b.median, b.q3, b.max, b.mean
                )
                .unwrap(),
                None => s.push_str(",,,,,,\n"),
            }
        }
        s
    }

    pub fn scenarios_csv(&self) -> String {
        let mut s = String::from("bucket,seed,kl\n");
        for (i, b) in self.buckets.iter().enumerate() {
            for sc in &b.scenarios {
                writeln!(s, "{i},{},{}", sc.seed, sc.kl).unwrap();
            }
        }
        s
    }
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Fills the KL buckets by rejection and runs `config.kl.planners` on every
/// kept scenario.
pub fn kl_sweep(config: &ExperimentConfig, jobs: usize) -> Result<KlSweepOutput> {
    config.validate()?;
    let kc = &config.kl;
    let n = kc.bucket_count();
    let mut buckets: Vec<KlBucket> = (0..n)
        .map(|i| KlBucket {
            lo: kc.edges[i],
            hi: kc.edges[i + 1],
            scenarios: Vec::new(),
        })
        .collect();
    let full = |b: &[KlBucket]| b.iter().all(|b| b.scenarios.len() >= kc.per_bucket);
    let mut attempts = 0;
    while attempts < kc.max_attempts && !full(&buckets) {
        let level = unit(derive_seed(config.seed, LEVEL_STREAM, attempts as u64));
        let seed = derive_seed(config.seed, SEED_STREAM, attempts as u64);
        attempts += 1;
        let mag = |m: f64| {
            if m > 0.0 {
                MagnitudeRange::fixed(level * m)
            } else {
                MagnitudeRange::OFF
            }
        };
        let mut grid = config.scenario_config()?;
        grid.shift = mag(kc.shift_max);
        grid.mix_weight = mag(kc.mix_weight_max);
        grid.cell_sigma = mag(kc.cell_sigma_max);
        let sc = Scenario::from_seed(seed, &grid)?;
        if let Some(b) = kc.bucket_of(sc.kl) {
            if buckets[b].scenarios.len() < kc.per_bucket {
                buckets[b].scenarios.push(sc);
            }
        }
    }

    let policy = if kc.planners.iter().any(|p| p == "rl") {
        config.load_policy()?
    } else {
        None
    };
    let episode = config.episode_config()?;
    let all: Vec<Scenario> = buckets.iter().flat_map(|b| b.scenarios.clone()).collect();
    let matrix = if all.is_empty() {
        MatrixOutput {
            rows: Vec::new(),
            episodes: Vec::new(),
        }
    } else {
        run_paired(
            &episode,
            &all,
            &kc.planners,
            &config.planner,
            policy,
            jobs,
        )?
    };

    let mut rows = Vec::new();
    for (pi, planner) in kc.planners.iter().enumerate() {
        let mut offset = 0;
        for (bi, b) in buckets.iter().enumerate() {
            let k = b.scenarios.len();
            let eff: Vec<f64> = (offset..offset + k)
                .map(|s| matrix.episodes[pi * all.len() + s].metrics.search_efficiency)
                .collect();
            offset += k;
            rows.push(KlRow {
                bucket: bi,
                lo: b.lo,
                hi: b.hi,
                planner: planner.clone(),
                episodes: k,
                stats: quartiles(&eff),
            });
        }
    }
    Ok(KlSweepOutput {
        buckets,
        attempts,
        rows,
        matrix,
    })
}

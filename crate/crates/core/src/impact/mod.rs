//! Two-candidate election impact of adversarial bubbles.
//!
//! A fraction `deploy` of ballots carries an adversarial bubble for the
//! losing candidate that the scanner reads as a mark with probability
//! `success`. Blank ballots then count for `Lose`; ballots already marked
//! for `Win` become overvotes, which the voter either submits anyway
//! (`recast`, the ballot counts for nobody) or replaces with a fresh ballot.

mod races;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub use races::{race_table_report, RaceRecord, RaceReport, RaceSummary, BUCKETS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaceParams {
    pub win_share: f64,
    pub lose_share: f64,
    pub blank_rate: f64,
    pub deploy: f64,
    pub success: f64,
    pub recast: f64,
    /// Lead `Lose` needs over `Win` for the attack to count as a flip.
    pub target_margin: f64,
}

impl Default for RaceParams {
    /// A 2% race with 12% blanks, fully deployed, 10% trigger rate.
    fn default() -> Self {
        Self {
            win_share: 0.415,
            lose_share: 0.395,
            blank_rate: 0.12,
            deploy: 1.0,
            success: 0.1,
            recast: 0.3,
            target_margin: 0.005,
        }
    }
}

impl RaceParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("win_share", self.win_share),
            ("lose_share", self.lose_share),
            ("blank_rate", self.blank_rate),
            ("deploy", self.deploy),
            ("success", self.success),
            ("recast", self.recast),
            ("target_margin", self.target_margin),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let total = self.win_share + self.lose_share + self.blank_rate;
        if total > 1.0 + 1e-12 {
            return Err(Error::Validation(format!(
                "win_share + lose_share + blank_rate = {total} exceeds 1"
            )));
        }
        Ok(())
    }

    /// Probability that one ballot carries a bubble that is read as a mark.
    pub fn trigger(&self) -> f64 {
        self.deploy * self.success
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub lose_final: f64,
    pub win_final: f64,
}

impl Outcome {
    pub fn lose_margin(&self) -> f64 {
        self.lose_final - self.win_final
    }
}

/// First-order vote shares: each overvoted `Win` ballot is voided with
/// probability `recast` and otherwise counted for `Win`.
pub fn closed_form_outcome(params: &RaceParams) -> Result<Outcome> {
    params.validate()?;
    let t = params.trigger();
    Ok(Outcome {
        lose_final: params.lose_share + params.blank_rate * t,
        win_final: params.win_share * (1.0 - t * params.recast),
    })
}

/// Vote shares when replacement ballots can trigger again, summed over the
/// geometric chain: a `Win` voter ends up voided with probability
/// `t r / (1 - t (1 - r))`.
pub fn chained_outcome(params: &RaceParams) -> Result<Outcome> {
    params.validate()?;
    let t = params.trigger();
    let r = params.recast;
    let escape = 1.0 - t * (1.0 - r);
    if escape <= 0.0 {
        return Err(endless_chain());
    }
    let void = t * r / escape;
    Ok(Outcome {
        lose_final: params.lose_share + params.blank_rate * t,
        win_final: params.win_share * (1.0 - void),
    })
}

fn endless_chain() -> Error {
    Error::Validation("every ballot triggers and no voter recasts: the replacement chain never ends".into())
}

/// Point estimate of a proportion with its standard error and a 95% Wilson
/// interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub count: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Proportion {
    pub fn new(count: u64, n: u64) -> Self {
        let nf = n as f64;
        let p = count as f64 / nf;
        let z = 1.959_963_984_540_054;
        let denom = 1.0 + z * z / nf;
        let centre = (p + z * z / (2.0 * nf)) / denom;
        let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
        Self {
            count,
            estimate: p,
            std_error: (p * (1.0 - p) / nf).sqrt(),
            ci_low: (centre - half).max(0.0),
            ci_high: (centre + half).min(1.0),
        }
    }

    /// Whether `value` lies within `k` binomial standard deviations of the
    /// estimate, using the deviation implied by `value` itself.
    pub fn within_sigma(&self, value: f64, n: u64, k: f64) -> bool {
        let sigma = (value * (1.0 - value) / n as f64).sqrt();
        (self.estimate - value).abs() <= k * sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOutcome {
    pub ballots: u64,
    pub seed: u64,
    pub lose_final: Proportion,
    pub win_final: Proportion,
    /// Ballots whose voter asked for at least one replacement.
    pub fresh_request_fraction: Proportion,
    /// Ballots whose replacement also triggered, i.e. the voter saw the
    /// overvote warning at least twice.
    pub repeat_request_fraction: Proportion,
    /// Longest replacement chain seen.
    pub max_chain: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    lose: u64,
    win: u64,
    fresh: u64,
    repeat: u64,
    max_chain: u64,
}

impl Tally {
    fn merge(self, o: Tally) -> Tally {
        Tally {
            lose: self.lose + o.lose,
            win: self.win + o.win,
            fresh: self.fresh + o.fresh,
            repeat: self.repeat + o.repeat,
            max_chain: self.max_chain.max(o.max_chain),
        }
    }
}

const SHARD: u64 = 1 << 16;

fn triggered(p: &RaceParams, rng: &mut ChaCha8Rng) -> bool {
    rng.random::<f64>() < p.deploy && rng.random::<f64>() < p.success
}

/// Runs the overvote chain of `ballots` `Win` voters.
fn simulate_win(p: &RaceParams, ballots: u64, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    for _ in 0..ballots {
        let mut requests = 0u64;
        let counted = loop {
            if !triggered(p, &mut rng) {
                break true;
            }
            if requests == 1 {
                t.repeat += 1;
            }
            if rng.random::<f64>() < p.recast {
                break false;
            }
            requests += 1;
        };
        t.win += u64::from(counted);
        t.fresh += u64::from(requests > 0);
        t.max_chain = t.max_chain.max(requests);
    }
    t
}

fn simulate_blank(p: &RaceParams, ballots: u64, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lose = (0..ballots).filter(|_| triggered(p, &mut rng)).count() as u64;
    Tally {
        lose,
        ..Tally::default()
    }
}

fn sharded(ballots: u64, seed: u64, run: impl Fn(u64, u64) -> Tally + Sync) -> Tally {
    let shards = ballots.div_ceil(SHARD);
    let tallies: Vec<Tally> = (0..shards)
        .into_par_iter()
        .map(|s| run(SHARD.min(ballots - s * SHARD), derive_seed(seed, &[s])))
        .collect();
    tallies.into_iter().fold(Tally::default(), Tally::merge)
}

/// Simulates `ballots` voters. The ballot mix is fixed by the shares
/// (rounded counts); only the attack outcomes are random. Shards of 65536
/// ballots draw from their own seeded streams and are summed in order, so
/// the result does not depend on the thread count.
pub fn monte_carlo_outcome(params: &RaceParams, ballots: u64, seed: u64) -> Result<MonteCarloOutcome> {
    params.validate()?;
    if ballots == 0 {
        return Err(Error::Validation("need at least one ballot".into()));
    }
    if params.trigger() >= 1.0 && params.recast == 0.0 {
        return Err(endless_chain());
    }
    let count = |share: f64| ((share * ballots as f64).round() as u64).min(ballots);
    let n_win = count(params.win_share);
    let n_lose = count(params.lose_share).min(ballots - n_win);
    let n_blank = count(params.blank_rate).min(ballots - n_win - n_lose);

    let win = sharded(n_win, derive_seed(seed, &[0]), |n, s| simulate_win(params, n, s));
    let blank = sharded(n_blank, derive_seed(seed, &[1]), |n, s| simulate_blank(params, n, s));
    let t = win.merge(blank);
    Ok(MonteCarloOutcome {
        ballots,
        seed,
        lose_final: Proportion::new(n_lose + t.lose, ballots),
        win_final: Proportion::new(t.win, ballots),
        fresh_request_fraction: Proportion::new(t.fresh, ballots),
        repeat_request_fraction: Proportion::new(t.repeat, ballots),
        max_chain: t.max_chain,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "success", rename_all = "kebab-case")]
pub enum FlipThreshold {
    Feasible(f64),
    Infeasible,
}

impl FlipThreshold {
    pub fn value(self) -> Option<f64> {
        match self {
            FlipThreshold::Feasible(s) => Some(s),
            FlipThreshold::Infeasible => None,
        }
    }
}

/// Lead of `Lose` over `Win` beyond the goal, under the closed form.
fn surplus(p: &RaceParams, success: f64) -> f64 {
    let t = p.deploy * success;
    let lose = p.lose_share + p.blank_rate * t;
    let win = p.win_share * (1.0 - t * p.recast);
    lose - win - p.target_margin
}

/// Smallest `success` for which `Lose` leads by at least `target_margin`,
/// found by bisection to 1e-9. `params.success` is ignored.
pub fn min_success_to_flip(params: &RaceParams) -> Result<FlipThreshold> {
    params.validate()?;
    if !(params.deploy > 0.0) {
        return Err(Error::Validation("deploy must be positive".into()));
    }
    if surplus(params, 0.0) >= 0.0 {
        return Ok(FlipThreshold::Feasible(0.0));
    }
    if surplus(params, 1.0) < 0.0 {
        return Ok(FlipThreshold::Infeasible);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if surplus(params, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(FlipThreshold::Feasible(hi))
}

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{min_success_to_flip, FlipThreshold, RaceParams};
use crate::error::{Error, Result};

/// Margin buckets; a race counts in every bucket whose bound is at least
/// its margin (inclusive).
pub const BUCKETS: [f64; 3] = [0.05, 0.02, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaceRecord {
    pub race_id: String,
    pub total_votes: u64,
    /// Winner's lead as a fraction of ballots cast.
    pub margin_fraction: f64,
    pub blank_fraction: f64,
}

impl RaceRecord {
    /// Two-candidate shares: the non-blank ballots split so that the
    /// winner leads by the margin.
    pub fn params(&self, template: &RaceParams) -> RaceParams {
        let voted = 1.0 - self.blank_fraction;
        RaceParams {
            win_share: (voted + self.margin_fraction) / 2.0,
            lose_share: (voted - self.margin_fraction) / 2.0,
            blank_rate: self.blank_fraction,
            ..*template
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub race_id: String,
    pub total_votes: u64,
    pub margin_fraction: f64,
    pub blank_fraction: f64,
    pub min_success: FlipThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub label: String,
    pub races: usize,
    /// Races within each of [`BUCKETS`], in the same order.
    pub within: [usize; 3],
    /// Unweighted mean of the per-race blank fractions (0 for no races).
    pub mean_blank: f64,
    pub deploy: f64,
    pub recast: f64,
    pub target_margin: f64,
    pub per_race: Vec<RaceSummary>,
}

impl RaceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out += "Margins are inclusive: a race at exactly 5% counts as within 5%.\n\n";
        out += "| State | Races | <=5% | <=2% | <=1% | Blank |\n";
        out += "|---|---:|---:|---:|---:|---:|\n";
        out += &format!(
            "| {} | {} | {} | {} | {} | {:.1}% |\n\n",
            self.label,
            self.races,
            self.within[0],
            self.within[1],
            self.within[2],
            100.0 * self.mean_blank
        );
        out += &format!(
            "Minimum trigger rate to flip (deploy {}, recast {}, goal {}):\n\n",
            self.deploy, self.recast, self.target_margin
        );
        out += "| Race | Votes | Margin | Blank | Success* |\n";
        out += "|---|---:|---:|---:|---:|\n";
        for r in &self.per_race {
            let s = match r.min_success {
                FlipThreshold::Feasible(s) => format!("{s:.4}"),
                FlipThreshold::Infeasible => "infeasible".into(),
            };
            out += &format!(
                "| {} | {} | {:.2}% | {:.1}% | {} |\n",
                r.race_id,
                r.total_votes,
                100.0 * r.margin_fraction,
                100.0 * r.blank_fraction,
                s
            );
        }
        out
    }
}

fn parse_records<R: Read>(input: R) -> Result<Vec<RaceRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize::<RaceRecord>() {
        let rec = row.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads `race_id,total_votes,margin_fraction,blank_fraction` rows and
/// counts close races; `template` supplies deploy, recast and the margin
/// goal for the per-race threshold.
pub fn race_table_report<R: Read>(input: R, label: &str, template: &RaceParams) -> Result<RaceReport> {
    let records = parse_records(input)?;
    let mut per_race = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        // header is line 1
        let line = i as u64 + 2;
        let bad = |detail: String| Error::Csv { line, detail };
        for (name, v) in [("margin_fraction", r.margin_fraction), ("blank_fraction", r.blank_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if r.margin_fraction + r.blank_fraction > 1.0 {
            return Err(bad("margin_fraction + blank_fraction exceeds 1".into()));
        }
        let min_success = min_success_to_flip(&r.params(template)).map_err(|e| bad(e.to_string()))?;
        per_race.push(RaceSummary {
            race_id: r.race_id.clone(),
            total_votes: r.total_votes,
            margin_fraction: r.margin_fraction,
            blank_fraction: r.blank_fraction,
            min_success,
        });
    }
    let mut within = [0usize; 3];
    for r in &records {
        for (slot, &bound) in within.iter_mut().zip(&BUCKETS) {
            if r.margin_fraction <= bound {
                *slot += 1;
            }
        }
    }
    let mean_blank = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.blank_fraction).sum::<f64>() / records.len() as f64
    };
    Ok(RaceReport {
        label: label.to_string(),
        races: records.len(),
        within,
        mean_blank,
        deploy: template.deploy,
        recast: template.recast,
        target_margin: template.target_margin,
        per_race,
    })
}

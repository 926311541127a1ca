use serde::{Deserialize, Serialize};

use crate::attacks::{Direction, RobustTable};
use crate::error::{Error, Result};

/// Masking verdict for one series of a robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingFinding {
    pub model: String,
    pub loss: String,
    pub direction: Direction,
    /// Robust accuracy above zero at the unbounded budget.
    pub unbounded_nonzero: bool,
    /// Robust accuracy rises somewhere along increasing budgets.
    pub non_monotone: bool,
}

impl MaskingFinding {
    pub fn masked(&self) -> bool {
        self.unbounded_nonzero || self.non_monotone
    }

    pub fn verdict(&self) -> &'static str {
        if self.masked() {
            "gradient masking suspected"
        } else {
            "no masking evidence"
        }
    }
}

/// `(unbounded_nonzero, non_monotone)` for one series. Needs at least three
/// budgets, including the unbounded budget 1.0.
pub fn masking_flags(epsilons: &[f64], robust_acc: &[f64]) -> Result<(bool, bool)> {
    if epsilons.len() != robust_acc.len() {
        return Err(Error::Validation(format!(
            "{} budgets but {} accuracies",
            epsilons.len(),
            robust_acc.len()
        )));
    }
    if epsilons.len() < 3 {
        return Err(Error::Validation("need at least three budgets".into()));
    }
    let mut pts: Vec<(f64, f64)> = epsilons.iter().copied().zip(robust_acc.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Validation("duplicate budget".into()));
    }
    let Some(&(_, unbounded)) = pts.iter().find(|p| p.0 == 1.0) else {
        return Err(Error::Validation("table lacks the unbounded budget 1.0".into()));
    };
    let rising = pts.windows(2).any(|w| w[1].1 > w[0].1);
    Ok((unbounded > 0.0, rising))
}

/// One finding per direction present in the table.
pub fn masking_report(table: &RobustTable) -> Result<Vec<MaskingFinding>> {
    let mut out = Vec::new();
    for direction in [Direction::Over, Direction::Under] {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.direction == direction).collect();
        if rows.is_empty() {
            continue;
        }
        let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.robust_acc).collect();
        let (unbounded_nonzero, non_monotone) = masking_flags(&eps, &acc)?;
        out.push(MaskingFinding {
            model: table.model.clone(),
            loss: table.loss.clone(),
            direction,
            unbounded_nonzero,
            non_monotone,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation("empty robustness table".into()));
    }
    Ok(out)
}

use crate::config::check_fraction;
use crate::error::CliResult;
use iwavb_core::estimators::{substream, Stream};
use rand::seq::SliceRandom;

/// Sorted respondent indices on each side of a holdout split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Withholds `round(fraction·n)` respondents chosen by a shuffle on the
/// holdout stream of `seed`. Both sides are kept non-empty.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> CliResult<Split> {
    check_fraction(fraction)?;
    if n < 2 {
        return Err(crate::CliError::input(format!("cannot split {n} respondent(s)")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Holdout));
    let mut holdout = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, holdout })
}

/// The complement of `ids` in `0..n`, after checking the ids are in range and distinct.
pub fn complement(n: usize, ids: &[usize]) -> CliResult<Vec<usize>> {
    let mut seen = vec![false; n];
    for &i in ids {
        if i >= n {
            return Err(crate::CliError::input(format!("respondent id {i} is out of range for {n} rows")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(crate::CliError::input(format!("respondent id {i} is listed twice")));
        }
    }
    Ok((0..n).filter(|&i| !seen[i]).collect())
}

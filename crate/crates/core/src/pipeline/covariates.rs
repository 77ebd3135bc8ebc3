use chrono::{Datelike, NaiveDateTime, Timelike};

use super::dataset::Frequency;
use crate::error::{Error, Result};

/// Canonical seasonal lags for a frequency.
pub fn default_lags(freq: Frequency) -> Vec<usize> {
    match freq {
        Frequency::Day => vec![1, 7],
        Frequency::Hour => vec![1, 24],
        Frequency::HalfHour => vec![1, 48],
    }
}

pub fn validate_lags(lags: &[usize]) -> Result<()> {
    if lags.is_empty() || lags.contains(&0) {
        return Err(Error::Config("lag indices must be positive and non-empty".into()));
    }
    if !lags.contains(&1) {
        return Err(Error::Config(
            "lag set must contain 1: it carries the previous observation into the encoder".into(),
        ));
    }
    Ok(())
}

fn encode(bin: u32, bins: u32) -> f64 {
    bin as f64 / (bins - 1) as f64 - 0.5
}

/// Number of calendar features emitted for `freq`.
pub fn calendar_dim(freq: Frequency) -> usize {
    match freq {
        Frequency::Day => 3,
        Frequency::Hour => 4,
        Frequency::HalfHour => 5,
    }
}

/// Calendar features in `[-0.5, 0.5]`, finest resolution first.
pub fn calendar_features(ts: NaiveDateTime, freq: Frequency) -> Vec<f64> {
    let mut out = Vec::with_capacity(calendar_dim(freq));
    if freq == Frequency::HalfHour {
        out.push(encode(ts.minute() / 30, 2));
    }
    if matches!(freq, Frequency::Hour | Frequency::HalfHour) {
        out.push(encode(ts.hour(), 24));
    }
    out.push(encode(ts.weekday().num_days_from_monday(), 7));
    out.push(encode(ts.day0(), 31));
    out.push(encode(ts.ordinal0(), 366));
    out
}

/// Scaled lag values at absolute row `t` of `history`, lag-major
/// (`lags.len() * D` values); rows before 0 read as zero.
pub fn lag_features(history: &[Vec<f64>], t: usize, lags: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(lags.len() * dim);
    for &lag in lags {
        match t.checked_sub(lag) {
            Some(s) => out.extend_from_slice(&history[s][..dim]),
            None => out.extend(std::iter::repeat_n(0.0, dim)),
        }
    }
    out
}

/// Per-timestamp covariate rows: calendar features then lag features.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    pub freq: Frequency,
    pub lags: Vec<usize>,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl CovariateSet {
    pub fn width(&self) -> usize {
        covariate_width(self.freq, &self.lags, self.dim)
    }
}

pub fn covariate_width(freq: Frequency, lags: &[usize], dim: usize) -> usize {
    calendar_dim(freq) + lags.len() * dim
}

/// Covariates for `timestamps`. `scaled_history` may be longer than
/// `timestamps`: its last `timestamps.len()` rows align with them and
/// earlier rows act as pre-history for the lags. Row `i` only reads
/// history rows strictly before its own.
pub fn build_covariates(
    timestamps: &[NaiveDateTime],
    freq: Frequency,
    lags: &[usize],
    scaled_history: &[Vec<f64>],
) -> Result<CovariateSet> {
    validate_lags(lags)?;
    if scaled_history.len() < timestamps.len() {
        return Err(Error::dimension(
            "build_covariates (history vs timestamps)",
            &[timestamps.len()],
            &[scaled_history.len()],
        ));
    }
    let dim = scaled_history.first().map_or(0, Vec::len);
    let pre = scaled_history.len() - timestamps.len();
    let rows = timestamps
        .iter()
        .enumerate()
        .map(|(i, ts)| {
            let mut row = calendar_features(*ts, freq);
            row.extend(lag_features(scaled_history, pre + i, lags, dim));
            row
        })
        .collect();
    Ok(CovariateSet {
        freq,
        lags: lags.to_vec(),
        dim,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d)
            .unwrap()
            .and_hms_opt(h, min, 0)
            .unwrap()
    }

    #[test]
    fn monday_is_first_weekday_bin() {
        let f = calendar_features(at(2021, 1, 4, 0, 0), Frequency::Day);
        assert_eq!(f[0], -0.5);
        let sunday = calendar_features(at(2021, 1, 10, 0, 0), Frequency::Day);
        assert_eq!(sunday[0], 0.5);
    }

    #[test]
    fn hour_feature_is_linear_in_bin() {
        let f = calendar_features(at(2021, 1, 4, 12, 0), Frequency::Hour);
        assert_eq!(f[0], 12.0 / 23.0 - 0.5);
        assert_eq!(calendar_features(at(2021, 1, 4, 23, 0), Frequency::Hour)[0], 0.5);
    }

    #[test]
    fn features_within_bounds() {
        let mut ts = at(2020, 1, 1, 0, 0);
        for _ in 0..(366 * 48) {
            for f in calendar_features(ts, Frequency::HalfHour) {
                assert!((-0.5..=0.5).contains(&f));
            }
            ts += chrono::Duration::minutes(30);
        }
    }

    #[test]
    fn lag_one_reads_previous_row_with_zero_padding() {
        let ts: Vec<_> = (0..3).map(|d| at(2021, 1, 1 + d, 0, 0)).collect();
        let hist = vec![vec![1.0], vec![2.0], vec![3.0]];
        let cov = build_covariates(&ts, Frequency::Day, &[1], &hist).unwrap();
        let lag: Vec<f64> = cov.rows.iter().map(|r| r[3]).collect();
        assert_eq!(lag, vec![0.0, 1.0, 2.0]);
        assert_eq!(cov.width(), 4);
    }

    #[test]
    fn lag_set_must_contain_one() {
        assert!(matches!(validate_lags(&[7]), Err(Error::Config(_))));
        assert!(matches!(validate_lags(&[0, 1]), Err(Error::Config(_))));
    }
}

//! Dataset ingestion, splitting, windowing, scaling and covariates.

mod covariates;
mod dataset;
mod scaler;

use std::ops::Range;

pub use covariates::{
    build_covariates, calendar_dim, calendar_features, covariate_width, default_lags, lag_features, validate_lags,
    CovariateSet,
};
pub use dataset::{format_timestamp, load_dataset, parse_timestamp, Dataset, DatasetFormat, Frequency};
pub use scaler::Scaler;

use crate::error::{Error, Result};
use crate::numcore::RngStream;

/// Row ranges of the train, validation and test spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Test span = final `prediction_steps` rows, validation = the
/// `prediction_steps` rows before it, train = the rest.
pub fn split(ds: &Dataset, prediction_steps: usize) -> Result<Split> {
    split_rolling(ds.len(), prediction_steps, 1)
}

/// Like [`split`] with a test span of `test_windows` consecutive
/// prediction windows.
pub fn split_rolling(total: usize, prediction_steps: usize, test_windows: usize) -> Result<Split> {
    if prediction_steps == 0 || test_windows == 0 {
        return Err(Error::Config(
            "prediction steps and test windows must be positive".into(),
        ));
    }
    let test_len = prediction_steps * test_windows;
    let minimum = 2 * prediction_steps + test_len + 1;
    if total < minimum {
        return Err(Error::Config(format!(
            "dataset has {total} rows; at least {minimum} are needed for prediction length {prediction_steps} with {test_windows} test window(s)"
        )));
    }
    let test_start = total - test_len;
    let val_start = test_start - prediction_steps;
    Ok(Split {
        train: 0..val_start,
        validation: val_start..test_start,
        test: test_start..total,
    })
}

/// A context window plus the adjoining prediction window, scaled by the
/// context mean, with covariates for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Row index of the first context row in the source dataset.
    pub offset: usize,
    pub context: Vec<Vec<f64>>,
    pub prediction: Vec<Vec<f64>>,
    pub scaler: Scaler,
    /// Scaled context followed by scaled prediction rows.
    pub scaled: Vec<Vec<f64>>,
    pub covariates: CovariateSet,
}

impl WindowSample {
    pub fn prediction_steps(&self) -> usize {
        self.prediction.len()
    }
}

/// Window whose context starts at `offset`; lags may read rows before
/// `offset` and are zero-padded before the start of `ds`.
pub fn window_at(
    ds: &Dataset,
    offset: usize,
    prediction_steps: usize,
    lags: &[usize],
    scaling: bool,
) -> Result<WindowSample> {
    let end = offset + 2 * prediction_steps;
    if prediction_steps == 0 || end > ds.len() {
        return Err(Error::Config(format!(
            "window [{offset}, {end}) does not fit in {} rows",
            ds.len()
        )));
    }
    let values = ds.values();
    let context = values[offset..offset + prediction_steps].to_vec();
    let prediction = values[offset + prediction_steps..end].to_vec();
    let scaler = if scaling {
        Scaler::fit(&context)?
    } else {
        Scaler::identity(ds.dim())
    };
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let pre_start = offset.saturating_sub(max_lag);
    let history = scaler.scale(&values[pre_start..end]);
    let covariates = build_covariates(&ds.timestamps(offset..end), ds.freq(), lags, &history)?;
    let scaled = history[offset - pre_start..].to_vec();
    Ok(WindowSample {
        offset,
        context,
        prediction,
        scaler,
        scaled,
        covariates,
    })
}

/// Uniformly random window lying entirely inside `train`.
pub fn sample_window(
    train: &Dataset,
    prediction_steps: usize,
    lags: &[usize],
    scaling: bool,
    rng: &mut RngStream,
) -> Result<WindowSample> {
    let offset = sample_offset(train.len(), prediction_steps, rng)?;
    window_at(train, offset, prediction_steps, lags, scaling)
}

/// Uniform offset in `0..=train_len - 2 * prediction_steps`.
pub fn sample_offset(train_len: usize, prediction_steps: usize, rng: &mut RngStream) -> Result<usize> {
    if prediction_steps == 0 || train_len < 2 * prediction_steps {
        return Err(Error::Config(format!(
            "training span of {train_len} rows is shorter than two prediction windows ({})",
            2 * prediction_steps
        )));
    }
    Ok(rng.int_inclusive(0, train_len - 2 * prediction_steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, d: usize) -> Dataset {
        let values = (0..t)
            .map(|i| (0..d).map(|j| (i * d + j) as f64 + 1.0).collect())
            .collect();
        Dataset::from_values(Frequency::Day, values).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let s = split(&ramp(100, 1), 10).unwrap();
        assert_eq!(s.train, 0..80);
        assert_eq!(s.validation, 80..90);
        assert_eq!(s.test, 90..100);
    }

    #[test]
    fn split_boundary() {
        assert!(split(&ramp(31, 1), 10).is_ok());
        let err = split(&ramp(30, 1), 10).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("31"), "{err}");
    }

    #[test]
    fn exact_fit_has_single_offset() {
        let mut rng = RngStream::new(3);
        for _ in 0..20 {
            assert_eq!(sample_offset(20, 10, &mut rng).unwrap(), 0);
        }
        assert!(sample_offset(19, 10, &mut rng).is_err());
    }

    #[test]
    fn window_layout() {
        let ds = ramp(40, 2);
        let w = window_at(&ds, 5, 4, &[1, 3], true).unwrap();
        assert_eq!(w.context[0], ds.values()[5]);
        assert_eq!(w.prediction[3], ds.values()[12]);
        assert_eq!(w.scaled.len(), 8);
        assert_eq!(w.covariates.rows.len(), 8);
        // lag 3 at the first context row reads row 2 of the source
        let scaled_row2 = w.scaler.scale_row(&ds.values()[2]);
        assert_eq!(&w.covariates.rows[0][3 + 2..3 + 4], scaled_row2.as_slice());
    }

    #[test]
    fn windows_reproduce_under_same_seed() {
        let ds = ramp(200, 1);
        let a = sample_window(&ds, 10, &[1], true, &mut RngStream::new(9)).unwrap();
        let b = sample_window(&ds, 10, &[1], true, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = RngStream::new(9);
        let offsets: Vec<usize> = (0..5).map(|_| sample_offset(200, 10, &mut rng).unwrap()).collect();
        assert!(offsets.windows(2).any(|w| w[0] != w[1]));
    }
}

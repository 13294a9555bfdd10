//! Channel-independent series, instance normalization, patching, sliding
//! windows and chronological splits.
//!
//! A multivariate dataset enters the system as one [`Series`] per channel;
//! nothing downstream ever sees more than one channel at a time.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Lower bound on the standard deviation used for normalization.
pub const EPS_STD: f64 = 1e-8;

/// One univariate channel of a dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Series {
    pub values: Vec<f64>,
    pub channel_id: String,
    pub dataset_id: String,
    pub domain: String,
    pub frequency: String,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WindowSource {
    pub dataset_id: String,
    pub channel_id: String,
    pub start: usize,
}

/// A lookback window `x` and the horizon `y` that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub stats: NormStats,
    pub source: WindowSource,
}

impl WindowPair {
    /// The horizon expressed in the lookback window's normalized units.
    pub fn normalized_target(&self) -> Vec<f64> {
        self.y
            .iter()
            .map(|v| (v - self.stats.mean) / self.stats.std)
            .collect()
    }
}

/// Zero-mean, unit-(population)-std scaling of one window.
pub fn instance_normalize(x: &[f64]) -> (Vec<f64>, NormStats) {
    let stats = norm_stats(x);
    let xn = x.iter().map(|v| (v - stats.mean) / stats.std).collect();
    (xn, stats)
}

pub fn norm_stats(x: &[f64]) -> NormStats {
    if x.is_empty() {
        return NormStats { mean: 0.0, std: EPS_STD };
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    NormStats {
        mean,
        std: libm::sqrt(var).max(EPS_STD),
    }
}

pub fn denormalize(yn: &[f64], stats: NormStats) -> Vec<f64> {
    yn.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// Number of patches produced by [`patchify`], or a configuration error.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Config("patch length and stride must be positive".into()));
    }
    if len < patch_len {
        return Err(Error::Config(alloc::format!(
            "window length {len} is shorter than patch length {patch_len}"
        )));
    }
    if !(len - patch_len).is_multiple_of(stride) {
        return Err(Error::Config(alloc::format!(
            "window length {len} cannot be tiled by patches of {patch_len} with stride {stride}"
        )));
    }
    Ok((len - patch_len) / stride + 1)
}

/// Splits a window into `n` rows of `patch_len` values, row `i` starting at
/// `i * stride`. No padding is ever added.
pub fn patchify(xn: &[f64], patch_len: usize, stride: usize) -> Result<Matrix> {
    let n = patch_count(xn.len(), patch_len, stride)?;
    let mut m = Matrix::zeros(n, patch_len);
    for i in 0..n {
        m.row_mut(i).copy_from_slice(&xn[i * stride..i * stride + patch_len]);
    }
    Ok(m)
}

/// Number of `(sl, fl)` windows in a series of `len` points at `stride`.
pub fn window_count(len: usize, sl: usize, fl: usize, stride: usize) -> usize {
    if stride == 0 || len < sl + fl {
        0
    } else {
        (len - sl - fl) / stride + 1
    }
}

/// Extracts windows and counts series too short to yield any.
#[derive(Debug, Clone)]
pub struct WindowExtractor {
    pub sl: usize,
    pub fl: usize,
    pub stride: usize,
    pub short_series: usize,
}

impl WindowExtractor {
    pub fn new(sl: usize, fl: usize, stride: usize) -> Self {
        Self {
            sl,
            fl,
            stride,
            short_series: 0,
        }
    }

    pub fn extract(&mut self, series: &Series) -> Vec<WindowPair> {
        self.extract_range(series, 0..series.len(), 0..series.len())
    }

    /// Windows whose horizon lies in `target` and whose lookback lies in
    /// `context` (which must contain `target`'s start for any window to fit).
    pub fn extract_range(
        &mut self,
        series: &Series,
        context: Range<usize>,
        target: Range<usize>,
    ) -> Vec<WindowPair> {
        let (sl, fl) = (self.sl, self.fl);
        let first_start = context.start.max(target.start.saturating_sub(sl));
        let end = target.end.min(series.len());
        if self.stride == 0 || end < first_start + sl + fl {
            self.short_series += 1;
            return Vec::new();
        }
        let count = window_count(end - first_start, sl, fl, self.stride);
        (0..count)
            .map(|w| {
                let start = first_start + w * self.stride;
                let x = series.values[start..start + sl].to_vec();
                let y = series.values[start + sl..start + sl + fl].to_vec();
                WindowPair {
                    stats: norm_stats(&x),
                    x,
                    y,
                    source: WindowSource {
                        dataset_id: series.dataset_id.clone(),
                        channel_id: series.channel_id.clone(),
                        start,
                    },
                }
            })
            .collect()
    }
}

/// All `(sl, fl)` windows of a series, ordered by start index.
pub fn sliding_windows(series: &Series, sl: usize, fl: usize, stride: usize) -> Vec<WindowPair> {
    WindowExtractor::new(sl, fl, stride).extract(series)
}

/// Chronological train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const STANDARD: Self = Self {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous, ordered, disjoint index ranges for a series of `len` points.
pub fn split(len: usize, spec: SplitSpec) -> Result<SplitRanges> {
    let parts = [spec.train, spec.val, spec.test];
    if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    if parts.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config("split fractions sum to more than 1".into()));
    }
    if len == 0 || parts.iter().all(|f| *f == 0.0) {
        return Err(Error::Config("split covers no data".into()));
    }
    let cut = |f: f64| libm::floor(f * len as f64 + 1e-9) as usize;
    let train_end = cut(spec.train).min(len);
    let val_end = (train_end + cut(spec.val)).min(len);
    let test_end = (val_end + cut(spec.test)).min(len);
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..test_end,
    };
    for (f, r) in parts.iter().zip([&ranges.train, &ranges.val, &ranges.test]) {
        if *f > 0.0 && r.is_empty() {
            return Err(Error::Config(alloc::format!(
                "split fraction {f} of {len} points is empty"
            )));
        }
    }
    Ok(ranges)
}

/// Training windows stay strictly inside the train range. Test windows keep
/// their horizon inside the test range; with `border_overlap` their lookback
/// may reach back into the preceding ranges, as in the usual benchmark
/// convention.
pub fn split_windows(
    series: &Series,
    ranges: &SplitRanges,
    sl: usize,
    fl: usize,
    stride: usize,
    border_overlap: bool,
) -> (Vec<WindowPair>, Vec<WindowPair>, Vec<WindowPair>) {
    let mut ex = WindowExtractor::new(sl, fl, stride);
    let train = ex.extract_range(series, ranges.train.clone(), ranges.train.clone());
    let (val_ctx, test_ctx) = if border_overlap {
        (0..ranges.val.end, 0..ranges.test.end)
    } else {
        (ranges.val.clone(), ranges.test.clone())
    };
    let val = ex.extract_range(series, val_ctx, ranges.val.clone());
    let test = ex.extract_range(series, test_ctx, ranges.test.clone());
    (train, val, test)
}

/// Fills NaN gaps by linear interpolation between the nearest valid
/// neighbours; leading and trailing gaps take the nearest valid value.
pub fn fill_missing(values: &mut [f64]) -> Result<()> {
    let valid: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
        return Err(Error::Empty("series with at least one valid value"));
    };
    for i in 0..first {
        values[i] = values[first];
    }
    for i in last + 1..values.len() {
        values[i] = values[last];
    }
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (values[a], values[b]);
        let span = (b - a) as f64;
        for (j, v) in values[a + 1..b].iter_mut().enumerate() {
            *v = va + (vb - va) * ((j + 1) as f64 / span);
        }
    }
    Ok(())
}

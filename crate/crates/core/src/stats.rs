//! Small descriptive-statistics helpers shared across the crate.
//!
//! Standard deviations are population (divide by `n`) throughout.

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Population standard deviation.
pub fn std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.iter().all(|x| *x == xs[0]) {
        return Some(0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    Some(var.sqrt())
}

/// Pearson correlation; `None` when either side has zero variance or the
/// lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = mean(a)?;
    let mb = mean(b)?;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Sample skewness (population moments).
pub fn skewness(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    let s = std(xs)?;
    if s <= 0.0 {
        return None;
    }
    let n = xs.len() as f64;
    Some(xs.iter().map(|x| ((x - m) / s).powi(3)).sum::<f64>() / n)
}

/// Sample kurtosis, non-excess (a Gaussian has 3).
pub fn kurtosis(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    let s = std(xs)?;
    if s <= 0.0 {
        return None;
    }
    let n = xs.len() as f64;
    Some(xs.iter().map(|x| ((x - m) / s).powi(4)).sum::<f64>() / n)
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Exponentially-weighted mean and variance, updated one observation at a
/// time with `alpha = 2 / (span + 1)`.
///
/// The first observation seeds the mean with zero variance; the variance is
/// not bias-corrected.
#[derive(Debug, Clone, Copy)]
pub struct EwStats {
    alpha: f64,
    mean: f64,
    var: f64,
    count: usize,
}

impl EwStats {
    pub fn new(span: usize) -> Self {
        Self::with_alpha(2.0 / (span as f64 + 1.0))
    }

    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            mean: 0.0,
            var: 0.0,
            count: 0,
        }
    }

    pub fn update(&mut self, x: f64) {
        if self.count == 0 {
            self.mean = x;
            self.var = 0.0;
        } else {
            let d = x - self.mean;
            self.mean += self.alpha * d;
            self.var = (1.0 - self.alpha) * (self.var + self.alpha * d * d);
        }
        self.count += 1;
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Causal exponentially-weighted mean and standard deviation of a series.
/// `None` entries are skipped (state carried forward) and produce `None`.
pub fn ew_mean_std(xs: &[Option<f64>], span: usize) -> Vec<Option<(f64, f64)>> {
    let mut ew = EwStats::new(span);
    xs.iter()
        .map(|x| match x {
            Some(v) => {
                ew.update(*v);
                Some((ew.mean(), ew.std()))
            }
            None => None,
        })
        .collect()
}

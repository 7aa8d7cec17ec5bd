//! Small numeric helpers shared by the signal and feature code.

/// Median of a slice; `None` when empty. Even lengths average the two middle values.
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

/// Median that falls back to `default` on empty input.
pub fn median_or(xs: &[f64], default: f64) -> f64 {
    median(xs).unwrap_or(default)
}

/// Median absolute deviation around the median (unscaled).
pub fn mad(xs: &[f64]) -> Option<f64> {
    let m = median(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Population skewness; 0 for constant input.
pub fn skewness(xs: &[f64]) -> f64 {
    let Some(m) = mean(xs) else { return 0.0 };
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if m2 <= f64::EPSILON * m.abs().max(1.0) * 1e-6 || m2 == 0.0 {
        return 0.0;
    }
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Pearson correlation; 0 when either side has no variance.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (Some(ma), Some(mb)) = (mean(a), mean(b)) else {
        return 0.0;
    };
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
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Linear-interpolated percentile, `q` in [0, 100].
pub fn percentile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Centered moving average with a window truncated at the edges.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let n = xs.len();
    if n == 0 || window <= 1 {
        return xs.to_vec();
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for x in xs {
        prefix.push(prefix.last().unwrap() + x);
    }
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Centered running median with odd `window`, truncated at the edges.
pub fn median_filter(xs: &[f64], window: usize) -> Vec<f64> {
    let n = xs.len();
    if n == 0 || window <= 1 {
        return xs.to_vec();
    }
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    // Maintain a sorted window: remove the outgoing sample, insert the incoming one.
    let mut lo = 0usize;
    let mut hi = 0usize;
    for i in 0..n {
        let want_lo = i.saturating_sub(half);
        let want_hi = (i + half + 1).min(n);
        while hi < want_hi {
            let x = xs[hi];
            let pos = buf.partition_point(|v| v.total_cmp(&x).is_lt());
            buf.insert(pos, x);
            hi += 1;
        }
        while lo < want_lo {
            let x = xs[lo];
            let pos = buf.partition_point(|v| v.total_cmp(&x).is_lt());
            buf.remove(pos);
            lo += 1;
        }
        let m = buf.len();
        out.push(if m % 2 == 1 {
            buf[m / 2]
        } else {
            0.5 * (buf[m / 2 - 1] + buf[m / 2])
        });
    }
    out
}

/// Sum of absolute first differences.
pub fn abs_diff_sum(xs: &[f64]) -> f64 {
    xs.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

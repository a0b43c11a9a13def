//! Window statistics over metric streams.

/// Window for Bob's relative episode length.
pub const RELATIVE_LENGTH_WINDOW: usize = 500;
/// Window for beat percentages.
pub const BEATS_WINDOW: usize = 1000;
/// Window for key-pickup fractions.
pub const KEY_WINDOW: usize = 100;

/// Trailing moving average: entry `i` averages `xs[i + 1 - window ..= i]`.
/// Only full windows are emitted.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() + 1 - window);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Mean of the last `window` values (all of them if fewer).
pub fn final_window_mean(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Ratio of window sums of `num` and `den` over the last `window` entries.
pub fn final_window_ratio(num: &[f64], den: &[f64], window: usize) -> f64 {
    final_window_mean(num, window) / final_window_mean(den, window)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

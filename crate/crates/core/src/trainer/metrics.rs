use std::collections::VecDeque;

use super::Variant;

/// Per-episode telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub episode: usize,
    pub variant: Variant,
    pub seed: u64,
    pub episode_return: f64,
    pub mean100: f64,
    pub std100: f64,
    pub q1_mean: f64,
    pub q2_mean: f64,
    pub qdiff: f64,
    pub eps: f64,
    pub s_scale: f64,
    pub buffer_fill: usize,
    pub ms: f64,
}

/// Mean and population standard deviation over the last `window` returns.
#[derive(Debug, Clone)]
pub struct RollingStats {
    window: usize,
    values: VecDeque<f64>,
}

impl RollingStats {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            values: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, v: f64) -> (f64, f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(v);
        window_stats(self.values.iter().copied())
    }
}

/// Mean and population standard deviation of a finite sequence.
pub fn window_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

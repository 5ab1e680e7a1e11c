use super::{frame_count, reflect_pad, Waveform, HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH};

pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 500.0;
/// Cumulative-mean-normalized difference below which a frame counts as voiced.
pub const VOICING_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    /// Hz per frame, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().zip(&self.voiced).filter(|(_, &v)| v).map(|(&f, _)| f)
    }

    pub fn mean_voiced(&self) -> Option<f64> {
        let (sum, n) = self.voiced_values().fold((0.0, 0usize), |(s, n), f| (s + f, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced_values().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrack {
    pub rms: Vec<f64>,
}

impl EnergyTrack {
    pub fn mean(&self) -> f64 {
        self.rms.iter().sum::<f64>() / self.rms.len().max(1) as f64
    }
}

fn frames_of(w: &Waveform) -> (Vec<f64>, usize) {
    let padded = reflect_pad(w.samples(), WIN_LENGTH / 2);
    (padded, frame_count(w.len(), HOP_LENGTH))
}

/// YIN-style pitch tracking over 1280-sample frames with a 320-sample hop.
pub fn estimate_f0(w: &Waveform) -> F0Track {
    let sr = SAMPLE_RATE as f64;
    let lag_min = (sr / F0_MAX).floor() as usize;
    let lag_max = (sr / F0_MIN).ceil() as usize;
    let width = WIN_LENGTH - lag_max;
    let (padded, frames) = frames_of(w);
    let mut diff = vec![0.0; lag_max + 2];
    let mut cmnd = vec![1.0; lag_max + 2];
    let mut f0 = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = &padded[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
        let energy: f64 = frame[..width].iter().map(|x| x * x).sum();
        if energy < 1e-10 * width as f64 {
            f0.push(0.0);
            voiced.push(false);
            continue;
        }
        for (lag, d) in diff.iter_mut().enumerate().take(lag_max + 2).skip(1) {
            if lag + width > WIN_LENGTH {
                *d = f64::INFINITY;
                continue;
            }
            *d = frame[..width]
                .iter()
                .zip(&frame[lag..lag + width])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
        let mut running = 0.0;
        for lag in 1..=lag_max {
            running += diff[lag];
            cmnd[lag] = if running > 0.0 {
                diff[lag] * lag as f64 / running
            } else {
                1.0
            };
        }
        let mut found = None;
        let mut lag = lag_min.max(2);
        while lag < lag_max {
            if cmnd[lag] < VOICING_THRESHOLD {
                while lag + 1 < lag_max && cmnd[lag + 1] < cmnd[lag] {
                    lag += 1;
                }
                found = Some(lag);
                break;
            }
            lag += 1;
        }
        match found {
            Some(lag) => {
                let (a, b, c) = (cmnd[lag - 1], cmnd[lag], cmnd[lag + 1]);
                let denom = a - 2.0 * b + c;
                let shift = if denom.abs() > 1e-12 {
                    (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                let hz = sr / (lag as f64 + shift);
                if (F0_MIN..=F0_MAX).contains(&hz) {
                    f0.push(hz);
                    voiced.push(true);
                } else {
                    f0.push(0.0);
                    voiced.push(false);
                }
            }
            None => {
                f0.push(0.0);
                voiced.push(false);
            }
        }
    }
    F0Track { f0, voiced }
}

/// Per-frame RMS over 1280-sample frames with a 320-sample hop.
pub fn rms_energy(w: &Waveform) -> EnergyTrack {
    let (padded, frames) = frames_of(w);
    let rms = (0..frames)
        .map(|t| {
            let frame = &padded[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
            (frame.iter().map(|x| x * x).sum::<f64>() / WIN_LENGTH as f64).sqrt()
        })
        .collect();
    EnergyTrack { rms }
}

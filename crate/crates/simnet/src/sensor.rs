use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use treesync_core::agent::SensorSource;
use treesync_core::filter::SensorFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    Constant { value: f64 },
    Sinusoid { mean: f64, amplitude: f64, period_ms: u64 },
    RandomWalk { start: f64, step: f64, min: f64, max: f64 },
}

impl Signal {
    fn initial(&self) -> f64 {
        match *self {
            Signal::Constant { value } => value,
            Signal::Sinusoid { mean, .. } => mean,
            Signal::RandomWalk { start, .. } => start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub signal: Signal,
    /// Uniform additive noise in `[-noise, +noise]`.
    #[serde(default)]
    pub noise: f64,
}

impl ChannelModel {
    pub fn constant(value: f64) -> Self {
        Self {
            signal: Signal::Constant { value },
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub temperature: ChannelModel,
    pub humidity: ChannelModel,
    pub distance: ChannelModel,
    /// Probability that a distance reading is replaced by an outlier.
    pub outlier_prob: f64,
    pub outlier_range: [f64; 2],
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            temperature: ChannelModel::constant(23.2),
            humidity: ChannelModel::constant(72.2),
            distance: ChannelModel::constant(17.68),
            outlier_prob: 0.0,
            outlier_range: [380.0, 400.0],
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(format!("outlier_prob {} outside [0, 1]", self.outlier_prob));
        }
        if self.outlier_range[0] > self.outlier_range[1] {
            return Err("outlier_range is reversed".into());
        }
        Ok(())
    }
}

/// Seeded sensor simulator; holds the random-walk positions between samples.
#[derive(Debug, Clone)]
pub struct SensorGenerator {
    model: SensorModel,
    rng: ChaCha8Rng,
    walk: [f64; 3],
}

impl SensorGenerator {
    pub fn new(model: SensorModel, seed: u64) -> Self {
        let walk = [
            model.temperature.signal.initial(),
            model.humidity.signal.initial(),
            model.distance.signal.initial(),
        ];
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            walk,
        }
    }

    pub fn model(&self) -> &SensorModel {
        &self.model
    }
}

fn channel_value(ch: &ChannelModel, walk: &mut f64, t_ms: u64, rng: &mut ChaCha8Rng) -> f64 {
    let base = match ch.signal {
        Signal::Constant { value } => value,
        Signal::Sinusoid {
            mean,
            amplitude,
            period_ms,
        } => {
            let phase = (t_ms % period_ms.max(1)) as f64 / period_ms.max(1) as f64;
            mean + amplitude * (std::f64::consts::TAU * phase).sin()
        }
        Signal::RandomWalk { step, min, max, .. } => {
            *walk = (*walk + rng.gen_range(-step..=step)).clamp(min, max);
            *walk
        }
    };
    if ch.noise > 0.0 {
        base + rng.gen_range(-ch.noise..=ch.noise)
    } else {
        base
    }
}

/// One raw reading at `t_ms`: signal plus noise, with the distance channel
/// occasionally replaced by an outlier.
pub fn sample_sensor(generator: &mut SensorGenerator, t_ms: u64) -> SensorFrame {
    let SensorGenerator { model, rng, walk } = generator;
    let t_raw = channel_value(&model.temperature, &mut walk[0], t_ms, rng);
    let h_raw = channel_value(&model.humidity, &mut walk[1], t_ms, rng);
    let mut d_raw = channel_value(&model.distance, &mut walk[2], t_ms, rng);
    if model.outlier_prob > 0.0 && rng.gen::<f64>() < model.outlier_prob {
        let [lo, hi] = model.outlier_range;
        d_raw = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    }
    SensorFrame {
        t_raw,
        h_raw,
        d_raw,
        sample_time_ms: t_ms,
    }
}

impl SensorSource for SensorGenerator {
    fn read(&mut self, t_ms: u64) -> SensorFrame {
        sample_sensor(self, t_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_model_reproduces_example_readings() {
        let mut g = SensorGenerator::new(SensorModel::default(), 1);
        let f = sample_sensor(&mut g, 1_000);
        assert_eq!((f.t_raw, f.h_raw, f.d_raw), (23.2, 72.2, 17.68));
        assert_eq!(f.sample_time_ms, 1_000);
    }

    #[test]
    fn certain_outliers_always_land_in_range() {
        let model = SensorModel {
            outlier_prob: 1.0,
            ..SensorModel::default()
        };
        let mut g = SensorGenerator::new(model, 2);
        for t in 0..1_000 {
            let d = sample_sensor(&mut g, t).d_raw;
            assert!((380.0..=400.0).contains(&d), "{d}");
        }
    }

    #[test]
    fn seeded_sequences_repeat() {
        let model = SensorModel {
            temperature: ChannelModel {
                signal: Signal::RandomWalk {
                    start: 20.0,
                    step: 0.5,
                    min: 0.0,
                    max: 50.0,
                },
                noise: 0.2,
            },
            outlier_prob: 0.05,
            ..SensorModel::default()
        };
        let run = |seed| {
            let mut g = SensorGenerator::new(model.clone(), seed);
            (0..1_000).map(|t| sample_sensor(&mut g, t * 1_000)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn sinusoid_hits_its_peak() {
        let model = SensorModel {
            humidity: ChannelModel {
                signal: Signal::Sinusoid {
                    mean: 50.0,
                    amplitude: 10.0,
                    period_ms: 4_000,
                },
                noise: 0.0,
            },
            ..SensorModel::default()
        };
        let mut g = SensorGenerator::new(model, 0);
        assert!((sample_sensor(&mut g, 1_000).h_raw - 60.0).abs() < 1e-9);
    }
}

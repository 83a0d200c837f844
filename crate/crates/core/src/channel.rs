//! UWB propagation: time of flight, multipath taps and the received pulse.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn time_of_flight(a: Point, b: Point) -> f64 {
    a.distance(b) / SPEED_OF_LIGHT
}

/// Direct-path amplitude, 1/d normalised to 1.0 at one metre.
pub fn path_amplitude(distance: f64) -> Result<f64> {
    if !(distance >= 0.1) {
        return Err(Error::TooClose(distance));
    }
    Ok(1.0 / distance)
}

/// Received pulse: a raised-cosine with the given symbol time and roll-off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseShape {
    pub tp_ns: f64,
    pub rolloff: f64,
}

impl PulseShape {
    /// Pulse occupying `bandwidth_mhz` of two-sided spectrum.
    pub fn for_bandwidth(bandwidth_mhz: f64, rolloff: f64) -> Self {
        PulseShape {
            tp_ns: (1.0 + rolloff) / (bandwidth_mhz * 1e-3),
            rolloff,
        }
    }

    pub fn bandwidth_mhz(&self) -> f64 {
        (1.0 + self.rolloff) / self.tp_ns * 1e3
    }

    /// Pulse value at `t_ns` from its peak; 1.0 at the peak.
    pub fn eval(&self, t_ns: f64) -> f64 {
        let x = t_ns / self.tp_ns;
        let b = self.rolloff;
        let den = 1.0 - (2.0 * b * x).powi(2);
        if den.abs() < 1e-10 {
            PI / 4.0 * sinc(1.0 / (2.0 * b))
        } else {
            sinc(x) * (PI * b * x).cos() / den
        }
    }

    /// Time from the leading half-power point to the peak.
    pub fn half_power_lead_ns(&self) -> f64 {
        let target = std::f64::consts::FRAC_1_SQRT_2;
        let (mut lo, mut hi) = (0.0, self.tp_ns);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Half-power width of the main lobe.
    pub fn duration_ns(&self) -> f64 {
        2.0 * self.half_power_lead_ns()
    }
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape::for_bandwidth(900.0, 1.0)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Amplitude template for matched filtering at the upsampled rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTemplate {
    pub waveform: Vec<f64>,
    pub resolution_ns: f64,
    pub duration_ns: f64,
    pub bandwidth_mhz: f64,
    /// Index of the peak inside `waveform`.
    pub peak_index: usize,
    /// Samples from the leading half-power point to the peak.
    pub lead: f64,
}

impl PulseTemplate {
    /// Main lobe of `shape` sampled at `resolution_ns`.
    pub fn from_shape(shape: &PulseShape, resolution_ns: f64) -> Self {
        let half = (shape.tp_ns / resolution_ns).floor() as i64;
        let waveform: Vec<f64> = (-half..=half)
            .map(|k| shape.eval(k as f64 * resolution_ns).abs())
            .collect();
        PulseTemplate {
            waveform,
            resolution_ns,
            duration_ns: shape.duration_ns(),
            bandwidth_mhz: shape.bandwidth_mhz(),
            peak_index: half as usize,
            lead: shape.half_power_lead_ns() / resolution_ns,
        }
    }

    /// Template from raw amplitude samples (e.g. a measured pulse). The
    /// waveform is normalised to a unit peak.
    pub fn from_samples(samples: &[f64], resolution_ns: f64) -> Result<Self> {
        let (peak_index, peak) = samples
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .filter(|&(_, p)| p > 0.0 && p.is_finite())
            .ok_or_else(|| Error::Validation("template has no positive peak".into()))?;
        let waveform: Vec<f64> = samples.iter().map(|v| v / peak).collect();
        let level = std::f64::consts::FRAC_1_SQRT_2;
        let rise = (0..=peak_index).rev().find(|&i| waveform[i] < level);
        let lead = match rise {
            Some(i) => {
                let (a0, a1) = (waveform[i], waveform[i + 1]);
                (peak_index - i) as f64 - (level - a0) / (a1 - a0)
            }
            None => peak_index as f64,
        };
        let fall = (peak_index..waveform.len()).find(|&i| waveform[i] < level).unwrap_or(waveform.len());
        let duration_ns = (fall - peak_index) as f64 * resolution_ns + lead * resolution_ns;
        if duration_ns > 2.0 {
            return Err(Error::Validation(format!(
                "template half-power duration {duration_ns:.3} ns exceeds 2 ns"
            )));
        }
        Ok(PulseTemplate {
            waveform,
            resolution_ns,
            duration_ns,
            bandwidth_mhz: f64::NAN,
            peak_index,
            lead,
        })
    }

    pub fn energy(&self) -> f64 {
        self.waveform.iter().map(|w| w * w).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    #[default]
    None,
    Residential,
    Office,
    Industrial,
}

/// Statistical knobs of the tap generator. Defaults are synthetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub mean_taps: f64,
    pub mean_excess_delay_ns: f64,
    pub max_excess_delay_ns: f64,
    pub decay_ns: f64,
    /// Expected power of a tap at zero excess delay, relative to the direct path.
    pub first_tap_power: f64,
}

impl ChannelParams {
    pub fn for_environment(env: Environment) -> Self {
        let (mean_taps, decay_ns) = match env {
            Environment::None => (0.0, 20.0),
            Environment::Residential => (5.0, 15.0),
            Environment::Office => (8.0, 20.0),
            Environment::Industrial => (12.0, 30.0),
        };
        ChannelParams {
            mean_taps,
            mean_excess_delay_ns: 15.0,
            max_excess_delay_ns: 120.0,
            decay_ns,
            first_tap_power: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub excess_delay_ns: f64,
    pub relative_amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultipathProfile {
    pub taps: Vec<Tap>,
    pub environment: Environment,
}

impl MultipathProfile {
    pub fn direct_only(phase: f64) -> Self {
        MultipathProfile {
            taps: vec![Tap {
                excess_delay_ns: 0.0,
                relative_amplitude: 1.0,
                phase,
            }],
            environment: Environment::None,
        }
    }
}

pub fn gen_multipath<R: Rng + ?Sized>(env: Environment, rng: &mut R) -> MultipathProfile {
    gen_multipath_with(env, &ChannelParams::for_environment(env), rng)
}

pub fn gen_multipath_with<R: Rng + ?Sized>(
    env: Environment,
    params: &ChannelParams,
    rng: &mut R,
) -> MultipathProfile {
    let mut taps = vec![Tap {
        excess_delay_ns: 0.0,
        relative_amplitude: 1.0,
        phase: rng.random_range(0.0..2.0 * PI),
    }];
    let count = if params.mean_taps > 0.0 {
        Poisson::new(params.mean_taps).map(|p| p.sample(rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let delay = Exp::new(1.0 / params.mean_excess_delay_ns).expect("positive mean delay");
    for _ in 0..count {
        let tau = loop {
            let t: f64 = delay.sample(rng);
            if t <= params.max_excess_delay_ns {
                break t;
            }
        };
        let mean_power = params.first_tap_power * (-tau / params.decay_ns).exp();
        // Rayleigh fading with unit mean power
        let fade: f64 = (-(1.0 - rng.random::<f64>()).ln()).sqrt();
        let amp = (mean_power.sqrt() * fade).clamp(f64::MIN_POSITIVE, 1.0);
        taps.push(Tap {
            excess_delay_ns: tau,
            relative_amplitude: amp,
            phase: rng.random_range(0.0..2.0 * PI),
        });
    }
    taps[1..].sort_by(|a, b| a.excess_delay_ns.total_cmp(&b.excess_delay_ns));
    MultipathProfile {
        taps,
        environment: env,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tof_examples() {
        let a = Point::new(1.0, 2.0);
        assert_eq!(time_of_flight(a, a), 0.0);
        let tof = time_of_flight(Point::new(0.0, 0.0), Point::new(4.0, 0.0));
        assert!((tof * 1e9 - 13.343).abs() < 1e-3);
        let gap = 2.0 * 5.6 / SPEED_OF_LIGHT;
        assert!((gap * 1e9 - 37.36).abs() < 0.01);
    }

    #[test]
    fn amplitude_law() {
        assert_eq!(path_amplitude(1.0).unwrap(), 1.0);
        assert_eq!(path_amplitude(2.0).unwrap(), 0.5);
        assert!((path_amplitude(10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(path_amplitude(0.05), Err(Error::TooClose(_))));
    }

    #[test]
    fn pulse_is_short_and_normalised() {
        let p = PulseShape::default();
        assert!((p.eval(0.0) - 1.0).abs() < 1e-12);
        assert!(p.duration_ns() <= 2.0, "{}", p.duration_ns());
        assert!((p.bandwidth_mhz() - 900.0).abs() < 1e-9);
        // continuity through the removable singularity
        let s = p.tp_ns / (2.0 * p.rolloff);
        assert!((p.eval(s) - p.eval(s + 1e-7)).abs() < 1e-6);
        let t = PulseTemplate::from_shape(&p, 1.0016 / 30.0);
        assert_eq!(t.waveform[t.peak_index], 1.0);
        assert!(t.waveform.iter().all(|&w| w <= 1.0));
    }

    #[test]
    fn template_from_samples_matches_shape() {
        let p = PulseShape::default();
        let res = 1.0016 / 30.0;
        let t = PulseTemplate::from_shape(&p, res);
        let loaded = PulseTemplate::from_samples(&t.waveform, res).unwrap();
        assert_eq!(loaded.peak_index, t.peak_index);
        assert!((loaded.lead - t.lead).abs() < 0.05, "{} vs {}", loaded.lead, t.lead);
    }

    #[test]
    fn no_environment_is_direct_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = gen_multipath(Environment::None, &mut rng);
        assert_eq!(p.taps.len(), 1);
        assert_eq!(p.taps[0].excess_delay_ns, 0.0);
        assert_eq!(p.taps[0].relative_amplitude, 1.0);
    }

    #[test]
    fn office_power_decay() {
        // Monte-Carlo: mean tap power near 60 ns excess delay
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut sum, mut n) = (0.0, 0usize);
        for _ in 0..10_000 {
            let p = gen_multipath(Environment::Office, &mut rng);
            for t in &p.taps[1..] {
                if (55.0..65.0).contains(&t.excess_delay_ns) {
                    sum += t.relative_amplitude.powi(2);
                    n += 1;
                }
            }
        }
        let db = 10.0 * (sum / n as f64).log10();
        assert!(n > 100);
        assert!(db <= -10.0, "{db} dB");
    }

    proptest! {
        #[test]
        fn office_delays_truncated(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = gen_multipath(Environment::Office, &mut rng);
            prop_assert_eq!(p.taps[0].excess_delay_ns, 0.0);
            prop_assert_eq!(p.taps[0].relative_amplitude, 1.0);
            for t in &p.taps {
                prop_assert!(t.excess_delay_ns >= 0.0 && t.excess_delay_ns <= 120.0);
                prop_assert!(t.relative_amplitude > 0.0 && t.relative_amplitude <= 1.0);
            }
        }

        #[test]
        fn multipath_deterministic(seed in any::<u64>()) {
            let a = gen_multipath(Environment::Industrial, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = gen_multipath(Environment::Industrial, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tof_symmetric_triangle(ax in -50.0..50.0f64, ay in -50.0..50.0f64,
                                  bx in -50.0..50.0f64, by in -50.0..50.0f64,
                                  cx in -50.0..50.0f64, cy in -50.0..50.0f64) {
            let (a, b, c) = (Point::new(ax, ay), Point::new(bx, by), Point::new(cx, cy));
            prop_assert_eq!(time_of_flight(a, b), time_of_flight(b, a));
            prop_assert!(time_of_flight(a, c) <= time_of_flight(a, b) + time_of_flight(b, c) + 1e-15);
        }
    }
}

//! Timing model of a DW1000-class transceiver.
//!
//! Device time is a 40-bit counter ticking at 128 × 499.2 MHz. Internally all
//! clock arithmetic runs on unwrapped `f64` tick counts; values are masked to
//! 40 bits only when they leave a device as a [`RadioTimestamp`].

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;

use crate::channel::{MultipathProfile, PulseShape};
use crate::error::{Error, Result};

/// Device clock frequency in ticks per second (128 × 499.2 MHz).
pub const TICKS_PER_SECOND: f64 = 63_897_600_000.0;
/// One device tick in seconds (≈15.65 ps).
pub const TICK_S: f64 = 1.0 / TICKS_PER_SECOND;
pub const TIMESTAMP_BITS: u32 = 40;
pub const TIMESTAMP_MODULUS: u64 = 1 << TIMESTAMP_BITS;
pub const TIMESTAMP_MASK: u64 = TIMESTAMP_MODULUS - 1;
/// Low bits ignored by the delayed-TX logic.
pub const TX_QUANTUM_BITS: u32 = 9;
pub const TX_QUANTUM_TICKS: u64 = 1 << TX_QUANTUM_BITS;

/// CIR accumulator length at 64 MHz PRF.
pub const CIR_LEN: usize = 1016;
/// One accumulator sample spans 64 device ticks (1.0016 ns).
pub const SAMPLE_TICKS: f64 = 64.0;
pub const SAMPLE_PERIOD_NS: f64 = SAMPLE_TICKS * TICK_S * 1e9;
/// Index at which the radio places the first path of the response it locks on.
pub const FP_PLACEMENT_INDEX: usize = 750;

/// Neutral crystal trim setting.
pub const TRIM_NEUTRAL: i32 = 15;
pub const TRIM_MAX: i32 = 31;
pub const DEFAULT_TRIM_SLOPE_PPM: f64 = -1.48;

/// LDE noise multiplier.
pub const LDE_NOISE_FACTOR: f64 = 12.0;
/// LDE peak-relative threshold (half power of the strongest sample in the window).
pub const LDE_PEAK_FRACTION: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Target peak magnitude of the quantized accumulator.
const CIR_FULL_SCALE: f64 = 1.0e4;
/// Rayleigh median / σ.
const RAYLEIGH_MEDIAN_FACTOR: f64 = 1.177_410_022_515_474_7;

pub fn seconds_to_ticks(s: f64) -> f64 {
    s * TICKS_PER_SECOND
}

pub fn ticks_to_seconds(t: f64) -> f64 {
    t * TICK_S
}

/// Nominal duration rounded to whole device ticks.
pub fn duration_ticks(s: f64) -> i64 {
    seconds_to_ticks(s).round() as i64
}

/// A 40-bit wrap-around device timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RadioTimestamp(u64);

impl RadioTimestamp {
    /// Builds a timestamp, discarding bits above 40.
    pub fn from_ticks(ticks: u64) -> Self {
        RadioTimestamp(ticks & TIMESTAMP_MASK)
    }

    /// Truncates an unwrapped (possibly huge or negative) tick count.
    pub fn from_unwrapped(ticks: f64) -> Self {
        let t = ticks.floor().rem_euclid(TIMESTAMP_MODULUS as f64);
        RadioTimestamp::from_ticks(t as u64)
    }

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn wrapping_add(self, delta: i64) -> Self {
        RadioTimestamp::from_ticks(self.0.wrapping_add(delta as u64))
    }

    /// Forward interval from `earlier` to `self`, modulo 2^40.
    pub fn since(self, earlier: RadioTimestamp) -> u64 {
        self.0.wrapping_sub(earlier.0) & TIMESTAMP_MASK
    }

    /// Signed interval `self - other`, interpreting the wrapped difference as
    /// the shorter of the two directions.
    pub fn signed_since(self, other: RadioTimestamp) -> i64 {
        let fwd = self.since(other);
        if fwd >= TIMESTAMP_MODULUS / 2 {
            fwd as i64 - TIMESTAMP_MODULUS as i64
        } else {
            fwd as i64
        }
    }
}

/// Clears the low 9 bits, like the delayed-TX scheduler does.
pub fn quantize_tx(desired: RadioTimestamp) -> RadioTimestamp {
    RadioTimestamp(desired.0 & !(TX_QUANTUM_TICKS - 1))
}

/// Crystal model of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    pub base_offset_ppm: f64,
    trim_index: i32,
    pub trim_slope_ppm: f64,
}

impl ClockModel {
    pub fn new(base_offset_ppm: f64) -> Self {
        ClockModel {
            base_offset_ppm,
            trim_index: TRIM_NEUTRAL,
            trim_slope_ppm: DEFAULT_TRIM_SLOPE_PPM,
        }
    }

    pub fn ideal() -> Self {
        ClockModel::new(0.0)
    }

    pub fn trim_index(&self) -> i32 {
        self.trim_index
    }

    pub fn with_trim_slope(mut self, slope_ppm: f64) -> Self {
        self.trim_slope_ppm = slope_ppm;
        self
    }

    /// Returns a copy with the given trim index; out-of-range indices are an
    /// error, never clamped silently.
    pub fn with_trim(self, index: i32) -> Result<Self> {
        if !(0..=TRIM_MAX).contains(&index) {
            return Err(Error::TrimRangeExceeded { requested: index });
        }
        Ok(ClockModel {
            trim_index: index,
            ..self
        })
    }

    /// Offset from nominal in ppm, trim included.
    pub fn offset_ppm(&self) -> f64 {
        self.base_offset_ppm + self.trim_slope_ppm * f64::from(self.trim_index - TRIM_NEUTRAL)
    }

    /// Ticks of this clock per nominal tick.
    pub fn rate(&self) -> f64 {
        1.0 + self.offset_ppm() * 1e-6
    }
}

/// Non-ideal receiver knobs shared by RX timestamping and CFO reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    pub rx_antenna_delay_s: f64,
    pub timestamp_jitter_s: f64,
    pub cfo_noise_ppm: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            rx_antenna_delay_s: 0.0,
            timestamp_jitter_s: 0.0,
            cfo_noise_ppm: 0.05,
        }
    }
}

impl RadioConfig {
    pub fn ideal() -> Self {
        RadioConfig {
            cfo_noise_ppm: 0.0,
            ..RadioConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Detune {
    start: f64,
    end: f64,
    rate: f64,
}

/// A running node clock: crystal model plus the mapping from global time to
/// unwrapped local ticks. Rate changes are continuous in local time.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeClock {
    model: ClockModel,
    ref_global: f64,
    ref_local: f64,
    detune: Option<Detune>,
}

impl NodeClock {
    /// `origin_ticks` is the local reading at global time 0.
    pub fn new(model: ClockModel, origin_ticks: f64) -> Self {
        NodeClock {
            model,
            ref_global: 0.0,
            ref_local: origin_ticks,
            detune: None,
        }
    }

    pub fn model(&self) -> &ClockModel {
        &self.model
    }

    /// Unwrapped local tick reading at global time `g` (seconds).
    pub fn local_at(&self, g: f64) -> f64 {
        let rate = self.model.rate() * TICKS_PER_SECOND;
        match self.detune {
            Some(d) if g > d.start => {
                let at_start = self.ref_local + rate * (d.start - self.ref_global);
                let det_rate = d.rate * TICKS_PER_SECOND;
                if g <= d.end {
                    at_start + det_rate * (g - d.start)
                } else {
                    at_start + det_rate * (d.end - d.start) + rate * (g - d.end)
                }
            }
            _ => self.ref_local + rate * (g - self.ref_global),
        }
    }

    /// Inverse of [`local_at`](Self::local_at).
    pub fn global_at(&self, local: f64) -> f64 {
        let rate = self.model.rate() * TICKS_PER_SECOND;
        if let Some(d) = self.detune {
            let at_start = self.ref_local + rate * (d.start - self.ref_global);
            if local > at_start {
                let det_rate = d.rate * TICKS_PER_SECOND;
                let at_end = at_start + det_rate * (d.end - d.start);
                return if local <= at_end {
                    d.start + (local - at_start) / det_rate
                } else {
                    d.end + (local - at_end) / rate
                };
            }
        }
        self.ref_global + (local - self.ref_local) / rate
    }

    /// Switches to a new crystal model at global time `g`, keeping local time
    /// continuous. Any finished detuning window is folded in first.
    pub fn retune(&mut self, g: f64, model: ClockModel) {
        self.settle(g);
        self.ref_local = self.local_at(g);
        self.ref_global = g;
        self.model = model;
    }

    /// Temporarily moves the trim index by `step` for `duration` seconds
    /// starting at `start`; the current index is restored afterwards.
    pub fn detune(&mut self, start: f64, duration: f64, step: i32) -> Result<()> {
        let detuned = self.model.with_trim(self.model.trim_index + step)?;
        self.settle(start);
        self.ref_local = self.local_at(start);
        self.ref_global = start;
        self.detune = Some(Detune {
            start,
            end: start + duration.max(0.0),
            rate: detuned.rate(),
        });
        Ok(())
    }

    /// Drops a detuning window that ended at or before `g`.
    pub fn settle(&mut self, g: f64) {
        if let Some(d) = self.detune {
            if g >= d.end {
                self.ref_local = self.local_at(d.end);
                self.ref_global = d.end;
                self.detune = None;
            }
        }
    }
}

/// Global instant at which the RMARKER of a delayed TX leaves the antenna.
///
/// `desired` is in the node's local frame and must lie in the future with
/// respect to `global_now`. The low bits are discarded exactly as the radio
/// does, so the TX fires up to 511 ticks early.
pub fn schedule_tx(clock: &NodeClock, desired: RadioTimestamp, global_now: f64) -> Result<f64> {
    let local_now = clock.local_at(global_now);
    let now_floor = local_now.floor();
    let now_wrapped = RadioTimestamp::from_unwrapped(now_floor);
    let q = quantize_tx(desired);
    let ahead = q.since(now_wrapped);
    if ahead >= TIMESTAMP_MODULUS / 2 {
        return Err(Error::PastDeadline);
    }
    let target = now_floor + ahead as f64;
    if target < local_now {
        return Err(Error::PastDeadline);
    }
    Ok(clock.global_at(target))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Unwrapped RX tick reading (antenna delay and jitter included, truncated).
pub fn rx_ticks<R: Rng + ?Sized>(clock: &NodeClock, arrival_global: f64, cfg: &RadioConfig, rng: &mut R) -> f64 {
    let jitter = gaussian(rng, cfg.timestamp_jitter_s);
    (clock.local_at(arrival_global) + seconds_to_ticks(cfg.rx_antenna_delay_s + jitter)).floor()
}

pub fn timestamp_rx<R: Rng + ?Sized>(
    clock: &NodeClock,
    arrival_global: f64,
    cfg: &RadioConfig,
    rng: &mut R,
) -> RadioTimestamp {
    RadioTimestamp::from_unwrapped(rx_ticks(clock, arrival_global, cfg, rng))
}

/// Noise-free carrier frequency offset in ppm; positive when the receiver is
/// slower than the transmitter.
pub fn cfo_ppm(receiver: &ClockModel, transmitter: &ClockModel) -> f64 {
    (transmitter.rate() - receiver.rate()) / receiver.rate() * 1e6
}

pub fn measure_cfo<R: Rng + ?Sized>(
    receiver: &ClockModel,
    transmitter: &ClockModel,
    noise_ppm: f64,
    rng: &mut R,
) -> f64 {
    cfo_ppm(receiver, transmitter) + gaussian(rng, noise_ppm)
}

/// The accumulator dump of one reception.
#[derive(Debug, Clone, PartialEq)]
pub struct Cir {
    pub samples: Vec<Complex<i16>>,
    pub fp_index: f64,
    pub fp_timestamp: RadioTimestamp,
    /// Factor applied to the float rendering before rounding to int16.
    pub scale: f64,
}

impl Cir {
    pub fn amplitudes(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| f64::from(s.re).hypot(f64::from(s.im)))
            .collect()
    }

    pub fn sampling_period_ns(&self) -> f64 {
        SAMPLE_PERIOD_NS
    }
}

/// One response as it reaches the capturing antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    /// Global arrival time of the direct path, seconds.
    pub global_time: f64,
    /// Direct-path amplitude (1.0 at 1 m).
    pub amplitude: f64,
    pub profile: MultipathProfile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureConfig {
    /// Per-component std of the complex noise, in direct-path amplitude units.
    pub noise_sigma: f64,
    pub pulse: PulseShape,
    pub radio: RadioConfig,
}

const RENDER_HALF_WIDTH_NS: f64 = 9.0;

/// Renders the composite CIR the capturing radio would report.
pub fn capture_cir<R: Rng + ?Sized>(
    arrivals: &[Arrival],
    clock: &NodeClock,
    cfg: &CaptureConfig,
    rng: &mut R,
) -> Result<Cir> {
    let threshold = LDE_NOISE_FACTOR * cfg.noise_sigma;
    // strongest first path wins, earliest on ties
    let anchor = arrivals
        .iter()
        .filter(|a| a.amplitude > 0.0 && a.amplitude >= threshold)
        .min_by(|a, b| {
            b.amplitude
                .total_cmp(&a.amplitude)
                .then(a.global_time.total_cmp(&b.global_time))
        })
        .ok_or(Error::NoDetectablePath)?;

    let anchor_local = clock.local_at(anchor.global_time);
    let grid_origin = (anchor_local / SAMPLE_TICKS).floor() - FP_PLACEMENT_INDEX as f64;
    let grid_origin_ticks = grid_origin * SAMPLE_TICKS;

    let mut buf = vec![Complex::<f64>::new(0.0, 0.0); CIR_LEN];
    render_into(&mut buf, arrivals, clock, grid_origin_ticks, &cfg.pulse);

    if cfg.noise_sigma > 0.0 {
        for s in buf.iter_mut() {
            s.re += gaussian(rng, cfg.noise_sigma);
            s.im += gaussian(rng, cfg.noise_sigma);
        }
    }

    let peak = buf.iter().map(|s| s.norm()).fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::NoDetectablePath);
    }
    let scale = CIR_FULL_SCALE / peak;
    let samples = buf
        .iter()
        .map(|s| Complex::new(to_i16(s.re * scale), to_i16(s.im * scale)))
        .collect();

    let mut cir = Cir {
        samples,
        fp_index: 0.0,
        fp_timestamp: RadioTimestamp::default(),
        scale,
    };
    let fp_index = lde_first_path(&cir, FP_PLACEMENT_INDEX - 24..FP_PLACEMENT_INDEX + 8)?;
    let jitter = gaussian(rng, cfg.radio.timestamp_jitter_s);
    let fp_local = grid_origin_ticks
        + fp_index * SAMPLE_TICKS
        + seconds_to_ticks(cfg.radio.rx_antenna_delay_s + jitter);
    cir.fp_index = fp_index;
    cir.fp_timestamp = RadioTimestamp::from_unwrapped(fp_local);
    Ok(cir)
}

fn to_i16(v: f64) -> i16 {
    v.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

/// Adds every path of every arrival onto the circular sample grid whose
/// sample 0 sits at local tick `grid_origin_ticks`.
fn render_into(
    buf: &mut [Complex<f64>],
    arrivals: &[Arrival],
    clock: &NodeClock,
    grid_origin_ticks: f64,
    pulse: &PulseShape,
) {
    let n = buf.len() as i64;
    let span_ns = buf.len() as f64 * SAMPLE_PERIOD_NS;
    for arrival in arrivals {
        for tap in &arrival.profile.taps {
            let local = clock.local_at(arrival.global_time + tap.excess_delay_ns * 1e-9);
            let center = (local - grid_origin_ticks) / SAMPLE_TICKS;
            let gain = Complex::from_polar(arrival.amplitude * tap.relative_amplitude, tap.phase);
            let half = RENDER_HALF_WIDTH_NS / SAMPLE_PERIOD_NS;
            let lo = (center - half).ceil() as i64;
            let hi = (center + half).floor() as i64;
            for k in lo..=hi {
                let dt_ns = (k as f64 - center) * SAMPLE_PERIOD_NS;
                // wrap onto the accumulator period
                let dt_ns = dt_ns - span_ns * (dt_ns / span_ns).round();
                buf[k.rem_euclid(n) as usize] += gain * pulse.eval(dt_ns);
            }
        }
    }
}

/// Leading-edge detection on `window`: first sample at or above
/// `max(12·σ̂, peak/√2)`, refined by linear interpolation of the crossing.
/// σ̂ is a median-based noise estimate over the whole buffer.
pub fn lde_first_path(cir: &Cir, window: Range<usize>) -> Result<f64> {
    lde_on_amplitudes(&cir.amplitudes(), window)
}

pub(crate) fn lde_on_amplitudes(amps: &[f64], window: Range<usize>) -> Result<f64> {
    let window = window.start.min(amps.len())..window.end.min(amps.len());
    let mut sorted = amps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sigma = sorted[sorted.len() / 2] / RAYLEIGH_MEDIAN_FACTOR;
    let local_peak = amps[window.clone()].iter().copied().fold(0.0, f64::max);
    let threshold = (LDE_NOISE_FACTOR * sigma).max(LDE_PEAK_FRACTION * local_peak);
    if threshold <= 0.0 {
        return Err(Error::NoDetectablePath);
    }
    let hit = window
        .clone()
        .find(|&i| amps[i] >= threshold)
        .ok_or(Error::NoDetectablePath)?;
    if hit == window.start || amps[hit] == threshold {
        return Ok(hit as f64);
    }
    let (a0, a1) = (amps[hit - 1], amps[hit]);
    Ok((hit - 1) as f64 + (threshold - a0) / (a1 - a0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::MultipathProfile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_tx(RadioTimestamp::from_ticks(0)).ticks(), 0);
        assert_eq!(quantize_tx(RadioTimestamp::from_ticks(512)).ticks(), 512);
        let q = quantize_tx(RadioTimestamp::from_ticks(1023));
        assert_eq!(q.ticks(), 512);
        let eps_ns = (q.ticks() as f64 - 1023.0) * TICK_S * 1e9;
        assert!((eps_ns + 7.997).abs() < 1e-3, "{eps_ns}");
    }

    #[test]
    fn timestamp_wraps() {
        let t = RadioTimestamp::from_ticks(TIMESTAMP_MODULUS - 10);
        let u = t.wrapping_add(25);
        assert_eq!(u.ticks(), 15);
        assert_eq!(u.since(t), 25);
        assert_eq!(t.signed_since(u), -25);
        assert_eq!(RadioTimestamp::from_unwrapped(-1.0).ticks(), TIMESTAMP_MASK);
    }

    #[test]
    fn schedule_tx_ideal_and_misaligned() {
        let clock = NodeClock::new(ClockModel::ideal(), 0.0);
        let g = schedule_tx(&clock, RadioTimestamp::from_ticks(1 << 20), 0.0).unwrap();
        assert!((g - (1u64 << 20) as f64 * TICK_S).abs() < 1e-15);

        let desired = (1u64 << 20) + 320;
        let g2 = schedule_tx(&clock, RadioTimestamp::from_ticks(desired), 0.0).unwrap();
        let early_ns = (desired as f64 * TICK_S - g2) * 1e9;
        assert!((early_ns - 5.008).abs() < 1e-3, "{early_ns}");
    }

    #[test]
    fn schedule_tx_drift() {
        let horizon = duration_ticks(800e-6) as u64;
        let aligned = horizon & !(TX_QUANTUM_TICKS - 1);
        let ideal = NodeClock::new(ClockModel::ideal(), 0.0);
        let fast = NodeClock::new(ClockModel::new(5.0), 0.0);
        let g0 = schedule_tx(&ideal, RadioTimestamp::from_ticks(aligned), 0.0).unwrap();
        let g1 = schedule_tx(&fast, RadioTimestamp::from_ticks(aligned), 0.0).unwrap();
        // a fast clock reaches the deadline early
        assert!(((g0 - g1) * 1e9 - 4.0).abs() < 0.01, "{}", (g0 - g1) * 1e9);
    }

    #[test]
    fn schedule_tx_past_deadline() {
        let clock = NodeClock::new(ClockModel::ideal(), 1.0e6);
        let err = schedule_tx(&clock, RadioTimestamp::from_ticks(1000), 0.0).unwrap_err();
        assert!(matches!(err, Error::PastDeadline));
    }

    #[test]
    fn timestamp_rx_examples() {
        let clock = NodeClock::new(ClockModel::ideal(), 0.0);
        let cfg = RadioConfig::ideal();
        assert_eq!(timestamp_rx(&clock, 0.0, &cfg, &mut rng()).ticks(), 0);
        // 1 µs = 63897.6 ticks, truncated
        assert_eq!(timestamp_rx(&clock, 1e-6, &cfg, &mut rng()).ticks(), 63897);

        let slow = NodeClock::new(ClockModel::new(-2.0), 0.0);
        let short = 1.0 * TICKS_PER_SECOND - slow.local_at(1.0);
        assert!((ticks_to_seconds(short) - 2e-6).abs() < 1e-12);
    }

    #[test]
    fn cfo_examples() {
        let a = ClockModel::ideal();
        assert_eq!(cfo_ppm(&a, &a), 0.0);
        let tx = ClockModel::new(3.0);
        assert!((cfo_ppm(&a, &tx) - 3.0).abs() < 1e-5);
        let rx = ClockModel::ideal().with_trim(TRIM_NEUTRAL - 2).unwrap();
        assert!((cfo_ppm(&rx, &a) + 2.96).abs() < 1e-5, "{}", cfo_ppm(&rx, &a));
    }

    #[test]
    fn trim_out_of_range_is_reported() {
        let err = ClockModel::ideal().with_trim(32).unwrap_err();
        assert!(matches!(err, Error::TrimRangeExceeded { requested: 32 }));
        assert!(ClockModel::ideal().with_trim(-1).is_err());
    }

    #[test]
    fn detune_accumulates_lag_and_restores_rate() {
        let base = ClockModel::ideal();
        let mut clock = NodeClock::new(base, 0.0);
        let reference = clock.clone();
        clock.detune(1e-3, 400e-6, 8).unwrap();
        let lag = reference.local_at(2e-3) - clock.local_at(2e-3);
        let expected = 1.48e-6 * 8.0 * 400e-6 * TICKS_PER_SECOND;
        assert!((lag - expected).abs() < 1e-3, "{lag} vs {expected}");
        let g = 1.7e-3;
        assert!((clock.global_at(clock.local_at(g)) - g).abs() < 1e-15);
        clock.settle(2e-3);
        let lag_later = reference.local_at(5e-3) - clock.local_at(5e-3);
        assert!((lag_later - expected).abs() < 1e-3);
    }

    fn single_arrival_cir(noise: f64, seed: u64) -> (Cir, NodeClock, f64) {
        let clock = NodeClock::new(ClockModel::new(3.0), 123_456_789.0);
        let arrival = Arrival {
            global_time: 1.234_567e-3,
            amplitude: 0.5,
            profile: MultipathProfile::direct_only(0.3),
        };
        let cfg = CaptureConfig {
            noise_sigma: noise,
            pulse: PulseShape::default(),
            radio: RadioConfig::ideal(),
        };
        let cir = capture_cir(std::slice::from_ref(&arrival), &clock, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let true_local = clock.local_at(arrival.global_time);
        (cir, clock, true_local)
    }

    #[test]
    fn capture_single_arrival_places_anchor_near_750() {
        let (cir, _, true_local) = single_arrival_cir(0.0, 1);
        assert_eq!(cir.samples.len(), CIR_LEN);
        let amps = cir.amplitudes();
        let peak = (0..CIR_LEN).max_by(|&a, &b| amps[a].total_cmp(&amps[b])).unwrap();
        assert!((750..=751).contains(&peak), "peak at {peak}");
        // fp_index/fp_timestamp pair points within one sample of the true arrival
        let offset_ticks = true_local - RadioTimestamp::from_unwrapped(true_local).ticks() as f64;
        let fp_ts = cir.fp_timestamp.ticks() as f64 + offset_ticks;
        let arrival_index = cir.fp_index + (true_local - fp_ts) / SAMPLE_TICKS;
        assert!((arrival_index - cir.fp_index).abs() < 1.0);
        assert!(arrival_index > cir.fp_index);
    }

    #[test]
    fn capture_rejects_undetectable() {
        let clock = NodeClock::new(ClockModel::ideal(), 0.0);
        let arrival = Arrival {
            global_time: 1e-3,
            amplitude: 0.01,
            profile: MultipathProfile::direct_only(0.0),
        };
        let cfg = CaptureConfig {
            noise_sigma: 0.01,
            pulse: PulseShape::default(),
            radio: RadioConfig::ideal(),
        };
        assert!(matches!(
            capture_cir(&[arrival], &clock, &cfg, &mut rng()),
            Err(Error::NoDetectablePath)
        ));
    }

    #[test]
    fn capture_two_responses_gap() {
        // Δd = 5.6 m between two responders at the same δ
        let clock = NodeClock::new(ClockModel::ideal(), 0.0);
        let c = crate::channel::SPEED_OF_LIGHT;
        let t0 = 2e-3;
        let gap = 2.0 * 5.6 / c;
        assert!((gap * 1e9 - 37.36).abs() < 0.01);
        let mk = |t: f64, a: f64| Arrival {
            global_time: t,
            amplitude: a,
            profile: MultipathProfile::direct_only(0.0),
        };
        let cfg = CaptureConfig {
            noise_sigma: 0.0,
            pulse: PulseShape::default(),
            radio: RadioConfig::ideal(),
        };
        let cir = capture_cir(&[mk(t0, 0.5), mk(t0 + gap, 0.4)], &clock, &cfg, &mut rng()).unwrap();
        let amps = cir.amplitudes();
        let peak_near = |c: usize| (c - 5..c + 5).max_by(|&a, &b| amps[a].total_cmp(&amps[b])).unwrap();
        let p0 = peak_near(750);
        let p1 = peak_near(750 + 37);
        assert!((p1 as f64 - p0 as f64 - gap * 1e9 / SAMPLE_PERIOD_NS).abs() <= 1.0);
    }

    fn cir_from_amps(amps: &[f64]) -> Cir {
        Cir {
            samples: amps.iter().map(|&a| Complex::new(a.round() as i16, 0)).collect(),
            fp_index: 0.0,
            fp_timestamp: RadioTimestamp::default(),
            scale: 1.0,
        }
    }

    #[test]
    fn lde_pure_noise_is_undetectable() {
        let mut r = rng();
        let samples: Vec<Complex<i16>> = (0..CIR_LEN)
            .map(|_| Complex::new(gaussian(&mut r, 100.0) as i16, gaussian(&mut r, 100.0) as i16))
            .collect();
        let cir = Cir {
            samples,
            fp_index: 0.0,
            fp_timestamp: RadioTimestamp::default(),
            scale: 1.0,
        };
        assert!(matches!(lde_first_path(&cir, 700..800), Err(Error::NoDetectablePath)));
    }

    #[test]
    fn lde_clean_pulse_edge() {
        // half-power crossing of a rendered pulse placed at 750.0
        let pulse = PulseShape::default();
        let lead = pulse.half_power_lead_ns() / SAMPLE_PERIOD_NS;
        let peak_at = 750.0 + lead;
        let amps: Vec<f64> = (0..CIR_LEN)
            .map(|k| 10_000.0 * pulse.eval((k as f64 - peak_at) * SAMPLE_PERIOD_NS).abs())
            .collect();
        let fp = lde_first_path(&cir_from_amps(&amps), 700..800).unwrap();
        assert!((fp - 750.0).abs() <= 0.5, "{fp}");
    }

    #[test]
    fn lde_threshold_is_inclusive() {
        let mut amps = vec![100.0; CIR_LEN];
        let threshold = LDE_NOISE_FACTOR * (100.0 / RAYLEIGH_MEDIAN_FACTOR);
        amps[760] = threshold;
        assert_eq!(lde_on_amplitudes(&amps, 700..800).unwrap(), 760.0);
        amps[760] = threshold * (1.0 - 1e-12);
        assert!(lde_on_amplitudes(&amps, 700..800).is_err());
    }
}

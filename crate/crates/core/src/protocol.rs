//! Ranging exchanges: SS-TWR (plain and drift-compensated) and concurrent
//! ranging with response-position modulation and local TX compensation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{path_amplitude, time_of_flight, MultipathProfile, PulseShape, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::radio::{
    capture_cir, duration_ticks, measure_cfo, quantize_tx, rx_ticks, schedule_tx, seconds_to_ticks, Arrival,
    CaptureConfig, Cir, ClockModel, NodeClock, RadioConfig, RadioTimestamp, CIR_LEN, SAMPLE_PERIOD_NS, TICK_S,
    TIMESTAMP_MODULUS, TX_QUANTUM_TICKS,
};

pub const MAX_RESPONDERS: usize = 7;

/// Timing parameters of a concurrent-ranging exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrngParams {
    pub t_resp_s: f64,
    pub t_id_s: f64,
    pub t_det_default_s: f64,
    pub antenna_tx_delay_s: f64,
    pub n_responders: usize,
    /// Std of the firmware's detuning-window error.
    pub t_det_jitter_s: f64,
}

impl Default for CrngParams {
    fn default() -> Self {
        CrngParams {
            t_resp_s: 800e-6,
            t_id_s: 128e-9,
            t_det_default_s: 560e-6,
            antenna_tx_delay_s: 0.0,
            n_responders: 6,
            t_det_jitter_s: 0.0,
        }
    }
}

impl CrngParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_responders == 0 || self.n_responders > MAX_RESPONDERS {
            return Err(Error::Validation(format!(
                "n_responders = {} but the CIR accommodates 1 to {MAX_RESPONDERS} responders",
                self.n_responders
            )));
        }
        let span_s = CIR_LEN as f64 * SAMPLE_PERIOD_NS * 1e-9;
        if self.t_id_s * self.n_responders as f64 >= span_s {
            return Err(Error::Validation(format!(
                "t_id × n_responders = {:.1} ns does not fit the {:.1} ns CIR",
                self.t_id_s * self.n_responders as f64 * 1e9,
                span_s * 1e9
            )));
        }
        if !(self.t_det_default_s > 0.0 && self.t_det_default_s < self.t_resp_s) {
            return Err(Error::Validation("t_det_default must be positive and below t_resp".into()));
        }
        Ok(())
    }

    /// Total delay between POLL RX and RESPONSE TX of responder `index`
    /// (0-based), in whole ticks. Both sides of the exchange use this value.
    pub fn response_delay_ticks(&self, index: usize) -> i64 {
        duration_ticks(self.t_resp_s) + index as i64 * duration_ticks(self.t_id_s) + duration_ticks(self.antenna_tx_delay_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Compensation {
    None,
    #[default]
    Full,
}

/// Trim step and detuning window that cancel a TX scheduling error `epsilon_s`.
///
/// A negative error (early TX) maps to a positive index shift, which slows the
/// clock. The window is recomputed after rounding the step so that the
/// accumulated lag matches the error exactly.
pub fn compensate_tx(epsilon_s: f64, t_det_default_s: f64, trim_slope_ppm: f64) -> (i32, f64) {
    let per_step = trim_slope_ppm * 1e-6;
    let step = (epsilon_s / (per_step * t_det_default_s)).round() as i32;
    if step == 0 {
        return (0, 0.0);
    }
    (step, epsilon_s / (per_step * f64::from(step)))
}

/// Trim index change that moves the clock towards the transmitter's
/// frequency, given a CFO reading (positive: receiver slower).
pub fn cfo_adjust(measured_cfo_ppm: f64, trim_slope_ppm: f64) -> i32 {
    (measured_cfo_ppm / trim_slope_ppm).round() as i32
}

/// Applies [`cfo_adjust`] to a clock model, failing if the index would leave
/// the trim range.
pub fn apply_cfo_adjust(model: &ClockModel, measured_cfo_ppm: f64) -> Result<ClockModel> {
    let delta = cfo_adjust(measured_cfo_ppm, model.trim_slope_ppm);
    model.with_trim(model.trim_index() + delta)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

fn random_origin<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // clock phase is not aligned with the global tick grid
    rng.random::<f64>() * TIMESTAMP_MODULUS as f64
}

/// One SS-TWR exchange over an isolated link; returns the distance estimate.
///
/// With `drift_compensated`, the responder's reply interval is scaled by
/// `1 + ê`, where ê is the CFO the responder measured on the POLL, before it
/// is subtracted from the round trip.
pub fn sstwr<R: Rng + ?Sized>(
    initiator: (&ClockModel, Point),
    responder: (&ClockModel, Point),
    t_resp_s: f64,
    drift_compensated: bool,
    radio: &RadioConfig,
    rng: &mut R,
) -> Result<f64> {
    let init = NodeClock::new(*initiator.0, random_origin(rng));
    let resp = NodeClock::new(*responder.0, random_origin(rng));
    let tof = time_of_flight(initiator.1, responder.1);

    let start = 1e-3;
    let poll_desired = RadioTimestamp::from_unwrapped(init.local_at(start) + seconds_to_ticks(100e-6));
    let g_poll = schedule_tx(&init, poll_desired, start)?;
    let t1 = quantize_tx(poll_desired);

    let g_rx = g_poll + tof;
    let t2 = RadioTimestamp::from_unwrapped(rx_ticks(&resp, g_rx, radio, rng));
    let cfo = measure_cfo(responder.0, initiator.0, radio.cfo_noise_ppm, rng);

    let desired = t2.wrapping_add(duration_ticks(t_resp_s));
    let g_tx = schedule_tx(&resp, desired, g_rx)?;
    let t3 = quantize_tx(desired);

    let t4 = RadioTimestamp::from_unwrapped(rx_ticks(&init, g_tx + tof, radio, rng));

    let round = t4.since(t1) as f64;
    let reply = t3.since(t2) as f64;
    let factor = if drift_compensated { 1.0 + cfo * 1e-6 } else { 1.0 };
    let tof_est = (round - factor * reply) / 2.0 * TICK_S;
    Ok(SPEED_OF_LIGHT * tof_est)
}

/// A node taking part in concurrent ranging.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub position: Point,
    pub clock: NodeClock,
}

/// Channel and front-end conditions of one exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeConditions {
    pub radio: RadioConfig,
    pub noise_sigma: f64,
    pub pulse: PulseShape,
    /// Std of the per-response arrival-time jitter at the initiator.
    pub toa_jitter_s: f64,
    pub phr_error_rate: f64,
}

impl Default for ExchangeConditions {
    fn default() -> Self {
        ExchangeConditions {
            radio: RadioConfig::default(),
            noise_sigma: 0.0,
            pulse: PulseShape::default(),
            toa_jitter_s: 0.0,
            phr_error_rate: 0.0,
        }
    }
}

/// What the initiator logs for one concurrent-ranging round.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub exchange_id: u64,
    pub poll_tx_ts: RadioTimestamp,
    pub cir: Cir,
    /// PHY header error: the first-path timestamp is unusable.
    pub phr_error: bool,
    pub params: CrngParams,
    pub ground_truth: Option<Vec<f64>>,
}

/// Simulator-side view of how one responder transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponderTrace {
    /// Global emission instant of the RESPONSE, if it was sent.
    pub tx_global: Option<f64>,
    /// Instant the RESPONSE would leave with an unquantized scheduler.
    pub ideal_tx_global: f64,
    /// Quantization error of the scheduled timestamp, ticks (≤ 0).
    pub epsilon_ticks: i64,
    pub trim_step: i32,
    pub t_det_s: f64,
    pub arrival_global: Option<f64>,
    pub failure: Option<String>,
}

impl ResponderTrace {
    pub fn tx_error_s(&self) -> Option<f64> {
        self.tx_global.map(|g| g - self.ideal_tx_global)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeTrace {
    pub poll_tx_global: f64,
    pub responders: Vec<ResponderTrace>,
}

/// Simulates one concurrent-ranging round starting at global time `start`.
///
/// Responder `i` (0-based) replies `T_RESP + i·T_ID + A_TX` after its POLL RX.
/// With full compensation it first trims its crystal towards the initiator's
/// frequency, then detunes it to cancel the scheduler's quantization error.
/// Trim state persists in `responders` across calls.
#[allow(clippy::too_many_arguments)]
pub fn crng_exchange<R: Rng + ?Sized>(
    exchange_id: u64,
    initiator: &Node,
    responders: &mut [Node],
    profiles: &[MultipathProfile],
    params: &CrngParams,
    compensation: Compensation,
    cond: &ExchangeConditions,
    start: f64,
    rng: &mut R,
) -> Result<(ExchangeRecord, ExchangeTrace)> {
    params.validate()?;
    if responders.len() != params.n_responders || profiles.len() != responders.len() {
        return Err(Error::Validation(format!(
            "{} responders and {} profiles for n_responders = {}",
            responders.len(),
            profiles.len(),
            params.n_responders
        )));
    }

    let poll_desired = RadioTimestamp::from_unwrapped(initiator.clock.local_at(start) + seconds_to_ticks(100e-6));
    let g_poll = schedule_tx(&initiator.clock, poll_desired, start)?;
    let poll_tx_ts = quantize_tx(poll_desired);
    let init_model = *initiator.clock.model();

    let mut arrivals = Vec::with_capacity(responders.len());
    let mut traces = Vec::with_capacity(responders.len());
    let mut truth = Vec::with_capacity(responders.len());

    for (index, (resp, profile)) in responders.iter_mut().zip(profiles).enumerate() {
        let distance = initiator.position.distance(resp.position);
        truth.push(distance);
        let tof = distance / SPEED_OF_LIGHT;
        let g_rx = g_poll + tof;
        let rx_local = rx_ticks(&resp.clock, g_rx, &cond.radio, rng);
        let cfo = measure_cfo(resp.clock.model(), &init_model, cond.radio.cfo_noise_ppm, rng);

        let desired = rx_local + params.response_delay_ticks(index) as f64;
        let desired_ts = RadioTimestamp::from_unwrapped(desired);
        let epsilon = quantize_tx(desired_ts).ticks() as i64 - desired_ts.ticks() as i64;
        let t_det_jitter = gaussian(rng, params.t_det_jitter_s);
        let arrival_jitter = gaussian(rng, cond.toa_jitter_s);

        let mut trace = ResponderTrace {
            tx_global: None,
            ideal_tx_global: 0.0,
            epsilon_ticks: epsilon,
            trim_step: 0,
            t_det_s: 0.0,
            arrival_global: None,
            failure: None,
        };

        let scheduled = match compensation {
            Compensation::None => {
                trace.ideal_tx_global = resp.clock.global_at(desired);
                schedule_tx(&resp.clock, desired_ts, g_rx)
            }
            Compensation::Full => {
                match apply_cfo_adjust(resp.clock.model(), cfo) {
                    Ok(model) => resp.clock.retune(g_rx, model),
                    Err(e) => trace.failure = Some(e.to_string()),
                }
                trace.ideal_tx_global = resp.clock.global_at(desired);
                match plan_detuning(resp.clock.model(), epsilon, params) {
                    Ok(plan) => {
                        trace.trim_step = plan.step;
                        trace.t_det_s = plan.t_det_s;
                        let window = (plan.t_det_s + t_det_jitter).max(0.0);
                        if plan.step != 0 {
                            resp.clock.detune(g_rx, window, plan.step)?;
                        }
                        schedule_tx(&resp.clock, desired_ts.wrapping_add(plan.slot_shift), g_rx)
                    }
                    Err(e) => Err(e),
                }
            }
        };

        match scheduled {
            Ok(g_tx) if trace.failure.is_none() => {
                resp.clock.settle(g_tx);
                let g_arr = g_tx + tof + arrival_jitter;
                trace.tx_global = Some(g_tx);
                trace.arrival_global = Some(g_arr);
                arrivals.push(Arrival {
                    global_time: g_arr,
                    amplitude: path_amplitude(distance)?,
                    profile: profile.clone(),
                });
            }
            Ok(_) => {}
            Err(e) => trace.failure = Some(e.to_string()),
        }
        traces.push(trace);
    }

    let capture = CaptureConfig {
        noise_sigma: cond.noise_sigma,
        pulse: cond.pulse,
        radio: cond.radio,
    };
    let cir = capture_cir(&arrivals, &initiator.clock, &capture, rng)?;
    let phr_error = cond.phr_error_rate > 0.0 && rng.random::<f64>() < cond.phr_error_rate;

    Ok((
        ExchangeRecord {
            exchange_id,
            poll_tx_ts,
            cir,
            phr_error,
            params: *params,
            ground_truth: Some(truth),
        },
        ExchangeTrace {
            poll_tx_global: g_poll,
            responders: traces,
        },
    ))
}

/// [`compensate_tx`], except that an error too small for one step over the
/// default window still gets a single step over a shorter window.
fn detuning_for(epsilon_s: f64, t_det_default_s: f64, trim_slope_ppm: f64) -> (i32, f64) {
    match compensate_tx(epsilon_s, t_det_default_s, trim_slope_ppm) {
        (0, _) if epsilon_s != 0.0 => {
            let step = if epsilon_s / trim_slope_ppm > 0.0 { 1 } else { -1 };
            (step, epsilon_s / (trim_slope_ppm * 1e-6 * f64::from(step)))
        }
        plan => plan,
    }
}

struct DetunePlan {
    step: i32,
    t_det_s: f64,
    /// Added to the desired timestamp before quantization.
    slot_shift: i64,
}

/// Picks the detuning that cancels the quantization error. When slowing the
/// clock would push the trim index past the rail, the responder targets the
/// next 512-tick slot instead and speeds its clock up.
fn plan_detuning(model: &ClockModel, epsilon_ticks: i64, params: &CrngParams) -> Result<DetunePlan> {
    let fits = |step: i32, t_det: f64| {
        model.with_trim(model.trim_index() + step).is_ok() && t_det < params.t_resp_s
    };
    let eps_s = epsilon_ticks as f64 * TICK_S;
    let (step, t_det) = detuning_for(eps_s, params.t_det_default_s, model.trim_slope_ppm);
    if fits(step, t_det) {
        return Ok(DetunePlan {
            step,
            t_det_s: t_det,
            slot_shift: 0,
        });
    }
    let late_s = (epsilon_ticks + TX_QUANTUM_TICKS as i64) as f64 * TICK_S;
    let (alt_step, alt_det) = detuning_for(late_s, params.t_det_default_s, model.trim_slope_ppm);
    if fits(alt_step, alt_det) {
        return Ok(DetunePlan {
            step: alt_step,
            t_det_s: alt_det,
            slot_shift: TX_QUANTUM_TICKS as i64,
        });
    }
    Err(Error::TrimRangeExceeded {
        requested: model.trim_index() + step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::{ticks_to_seconds, TRIM_NEUTRAL};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compensate_tx_examples() {
        let (step, t_det) = compensate_tx(-5e-9, 400e-6, -1.48);
        assert_eq!(step, 8);
        assert!((t_det * 1e6 - 422.3).abs() < 0.05, "{}", t_det * 1e6);
        assert_eq!(compensate_tx(0.0, 560e-6, -1.48), (0, 0.0));
        let (step, t_det) = compensate_tx(-8e-9, 560e-6, -1.48);
        assert_eq!(step, 10);
        assert!((t_det * 1e6 - 540.5).abs() < 0.05, "{}", t_det * 1e6);
    }

    #[test]
    fn cfo_adjust_examples() {
        assert_eq!(cfo_adjust(3.0, -1.48), -2);
        assert_eq!(cfo_adjust(0.0, -1.48), 0);
        assert_eq!(cfo_adjust(-1.48, -1.48), 1);
        let m = ClockModel::new(1.48).with_trim(TRIM_NEUTRAL).unwrap();
        let reference = ClockModel::ideal();
        let adjusted = apply_cfo_adjust(&m, crate::radio::cfo_ppm(&m, &reference)).unwrap();
        assert!(crate::radio::cfo_ppm(&adjusted, &reference).abs() < 1e-9);
    }

    #[test]
    fn cfo_adjust_out_of_range() {
        let m = ClockModel::ideal().with_trim(30).unwrap();
        assert!(matches!(apply_cfo_adjust(&m, -3.0), Err(Error::TrimRangeExceeded { .. })));
    }

    #[test]
    fn params_capacity() {
        let mut p = CrngParams::default();
        p.validate().unwrap();
        p.n_responders = 8;
        assert!(p.validate().is_err());
        p.n_responders = 7;
        p.validate().unwrap();
    }

    fn node(ppm: f64, pos: Point, rng: &mut ChaCha8Rng) -> Node {
        Node {
            position: pos,
            clock: NodeClock::new(ClockModel::new(ppm), random_origin(rng)),
        }
    }

    #[test]
    fn sstwr_ideal_clocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ClockModel::ideal();
        for t_resp in [320e-6, 800e-6] {
            let d = sstwr((&a, Point::new(0.0, 0.0)), (&a, Point::new(4.0, 0.0)), t_resp, false, &RadioConfig::ideal(), &mut rng).unwrap();
            // two truncated RX timestamps: at most one tick of round-trip bias
            assert!((d - 4.0).abs() < SPEED_OF_LIGHT * TICK_S, "{d}");
        }
    }

    #[test]
    fn sstwr_drift_bias_and_compensation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ei = ClockModel::new(5.0);
        let er = ClockModel::ideal();
        let d = sstwr((&ei, Point::new(0.0, 0.0)), (&er, Point::new(4.0, 0.0)), 800e-6, false, &RadioConfig::ideal(), &mut rng).unwrap();
        assert!(((d - 4.0) - 0.5996).abs() < 0.01, "bias {}", d - 4.0);
        let d = sstwr((&ei, Point::new(0.0, 0.0)), (&er, Point::new(4.0, 0.0)), 800e-6, true, &RadioConfig::ideal(), &mut rng).unwrap();
        assert!((d - 4.0).abs() < 0.01, "bias {}", d - 4.0);
    }

    fn six_responders(rng: &mut ChaCha8Rng, ppm: &[f64]) -> Vec<Node> {
        let pos = [
            Point::new(0.0, 0.0),
            Point::new(6.4, 0.0),
            Point::new(6.4, 3.2),
            Point::new(6.4, 6.4),
            Point::new(0.0, 6.4),
            Point::new(0.0, 3.2),
        ];
        pos.iter().zip(ppm).map(|(&p, &e)| node(e, p, rng)).collect()
    }

    #[test]
    fn full_compensation_hits_ideal_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = node(2.0, Point::new(2.0, 2.5), &mut rng);
        let ppm = [-7.0, -3.0, 0.5, 4.0, 7.5, 6.0];
        let mut resp = six_responders(&mut rng, &ppm);
        let profiles = vec![MultipathProfile::direct_only(0.0); 6];
        let cond = ExchangeConditions {
            radio: RadioConfig::ideal(),
            ..Default::default()
        };
        for k in 0..20 {
            let (_, trace) = crng_exchange(k, &init, &mut resp, &profiles, &CrngParams::default(), Compensation::Full, &cond, k as f64 * 0.125, &mut rng).unwrap();
            for r in &trace.responders {
                assert!(r.failure.is_none(), "{:?}", r.failure);
                let err = r.tx_error_s().unwrap();
                assert!(err.abs() < 0.1e-9, "deviation {} ns", err * 1e9);
            }
        }
    }

    #[test]
    fn no_compensation_error_equals_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let init = node(0.0, Point::new(2.0, 2.5), &mut rng);
        let mut resp = six_responders(&mut rng, &[0.0; 6]);
        let profiles = vec![MultipathProfile::direct_only(0.0); 6];
        let cond = ExchangeConditions {
            radio: RadioConfig::ideal(),
            ..Default::default()
        };
        let (_, trace) = crng_exchange(0, &init, &mut resp, &profiles, &CrngParams::default(), Compensation::None, &cond, 0.0, &mut rng).unwrap();
        for r in &trace.responders {
            let err = r.tx_error_s().unwrap();
            let eps = ticks_to_seconds(r.epsilon_ticks as f64);
            assert!((err - eps).abs() < 1e-13, "{err} vs {eps}");
            assert!(r.epsilon_ticks <= 0 && r.epsilon_ticks > -512);
        }
    }

    #[test]
    fn rail_fallback_uses_next_slot() {
        let mut model = ClockModel::ideal().with_trim(29).unwrap();
        model.base_offset_ppm = 0.0;
        let params = CrngParams::default();
        let plan = plan_detuning(&model, -500, &params).unwrap();
        assert!(plan.step < 0);
        assert_eq!(plan.slot_shift, 512);
        // −12 ticks needs ~0 steps either way
        let plan = plan_detuning(&model, -12, &params).unwrap();
        assert_eq!(plan.slot_shift, 0);
    }

    #[test]
    fn record_interval_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let init = node(1.0, Point::new(3.0, 3.0), &mut rng);
        let mut resp = six_responders(&mut rng, &[3.0, -2.0, 1.0, 0.0, 5.0, -6.0]);
        let profiles = vec![MultipathProfile::direct_only(0.0); 6];
        let params = CrngParams::default();
        for k in 0..50 {
            let (rec, _) = crng_exchange(k, &init, &mut resp, &profiles, &params, Compensation::Full, &ExchangeConditions::default(), 0.3 * k as f64, &mut rng).unwrap();
            let dt = ticks_to_seconds(rec.cir.fp_timestamp.since(rec.poll_tx_ts) as f64);
            assert!(dt > 0.0 && dt < 2.0 * params.t_resp_s + 6.0 * params.t_id_s + 10e-6, "{dt}");
        }
    }

    proptest! {
        #[test]
        fn compensation_cancels_epsilon(eps_ticks in 1i64..512, t_det_us in 100.0..700.0f64) {
            let eps = -(eps_ticks as f64) * TICK_S;
            let (step, t_det) = compensate_tx(eps, t_det_us * 1e-6, -1.48);
            if step != 0 {
                let lag = 1.48e-6 * f64::from(step) * t_det;
                prop_assert!((lag - eps.abs()).abs() < 1e-18);
            }
        }
    }
}

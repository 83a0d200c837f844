//! Turning per-responder ToA indices into distances.

use crate::channel::{PulseTemplate, SPEED_OF_LIGHT};
use crate::cirproc::{estimate_toas, rearrange, ProcParams, RearrangedCir, Rejection, ToaAlgorithm, ToaEstimate, Upsampler};
use crate::error::{Error, Result};
use crate::protocol::{CrngParams, ExchangeRecord};
use crate::radio::{RadioTimestamp, SAMPLE_TICKS, TICK_S};

pub const DEFAULT_MAX_RANGE_M: f64 = 100.0;
/// Calibration offsets beyond this magnitude are clamped.
pub const CAL_OFFSET_LIMIT_M: f64 = 0.3;
const CAL_OFFSET_WARN_M: f64 = 0.2;
pub const MIN_CALIBRATION_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceEstimate {
    pub responder_index: usize,
    pub distance_m: f64,
    pub raw_tof_ns: f64,
    pub valid: bool,
    pub rejection: Option<Rejection>,
}

impl DistanceEstimate {
    pub fn rejected(responder_index: usize, reason: Rejection) -> Self {
        DistanceEstimate {
            responder_index,
            distance_m: f64::NAN,
            raw_tof_ns: f64::NAN,
            valid: false,
            rejection: Some(reason),
        }
    }
}

/// RX timestamp of a response whose ToA sits at `toa_index_up`, derived from
/// the first-path timestamp and its position in the upsampled CIR.
pub fn rx_timestamp_of(fp_timestamp: RadioTimestamp, fp_index_up: f64, upsample_factor: usize, toa_index_up: f64) -> RadioTimestamp {
    let offset = ((fp_index_up - toa_index_up) * SAMPLE_TICKS / upsample_factor as f64).round() as i64;
    fp_timestamp.wrapping_add(-offset)
}

/// Distance from one ToA estimate: `c·(T_RTT − T_RESP,i)/2 + cal`.
pub fn distance(
    poll_tx_ts: RadioTimestamp,
    rx_ts: RadioTimestamp,
    params: &CrngParams,
    responder_index: usize,
    cal_offset_m: f64,
    max_range_m: f64,
) -> DistanceEstimate {
    let rtt = rx_ts.signed_since(poll_tx_ts) as f64;
    let reply = params.response_delay_ticks(responder_index) as f64;
    let tof_s = (rtt - reply) / 2.0 * TICK_S;
    let d = SPEED_OF_LIGHT * tof_s + cal_offset_m;
    let valid = d > 0.0 && d < max_range_m;
    DistanceEstimate {
        responder_index,
        distance_m: d,
        raw_tof_ns: tof_s * 1e9,
        valid,
        rejection: (!valid).then_some(Rejection::OutOfRange),
    }
}

/// Mean of `truth − estimate`, clamped to ±0.3 m.
pub fn calibrate_offset(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_CALIBRATION_SAMPLES,
            got: pairs.len(),
        });
    }
    let mean = pairs.iter().map(|(truth, est)| truth - est).sum::<f64>() / pairs.len() as f64;
    if mean.abs() > CAL_OFFSET_WARN_M {
        log::warn!("calibration offset {mean:.3} m is unusually large");
    }
    Ok(mean.clamp(-CAL_OFFSET_LIMIT_M, CAL_OFFSET_LIMIT_M))
}

/// Reusable state for processing many records with one configuration.
#[derive(Debug)]
pub struct Processor {
    pub proc: ProcParams,
    pub template: PulseTemplate,
    pub max_range_m: f64,
    upsampler: Upsampler,
}

impl Processor {
    pub fn new(proc: ProcParams, template: PulseTemplate, max_range_m: f64) -> Self {
        Processor {
            upsampler: Upsampler::new(crate::radio::CIR_LEN, proc.upsample_factor),
            proc,
            template,
            max_range_m,
        }
    }

    pub fn rearranged(&self, record: &ExchangeRecord) -> Result<RearrangedCir> {
        rearrange(&record.cir, &self.proc, &self.upsampler)
    }

    /// ToA estimates for every responder of one record.
    pub fn toas(&self, record: &ExchangeRecord, algorithm: ToaAlgorithm) -> Result<(RearrangedCir, Vec<ToaEstimate>)> {
        let r = self.rearranged(record)?;
        let est = estimate_toas(&r, &self.proc, record.params.t_id_s, record.params.n_responders, algorithm, &self.template);
        Ok((r, est))
    }

    /// Distance estimates for every responder of one record.
    pub fn distances(&self, record: &ExchangeRecord, algorithm: ToaAlgorithm, cal_offset_m: f64) -> Vec<DistanceEstimate> {
        let r = if record.phr_error { None } else { self.rearranged(record).ok() };
        self.distances_with(record, r.as_ref(), algorithm, cal_offset_m)
    }

    /// Like [`distances`](Self::distances) with the re-arranged CIR supplied
    /// by the caller (`None` if re-arrangement failed).
    pub fn distances_with(
        &self,
        record: &ExchangeRecord,
        rearranged: Option<&RearrangedCir>,
        algorithm: ToaAlgorithm,
        cal_offset_m: f64,
    ) -> Vec<DistanceEstimate> {
        let n = record.params.n_responders;
        if record.phr_error {
            return (0..n).map(|i| DistanceEstimate::rejected(i, Rejection::PhrError)).collect();
        }
        let Some(r) = rearranged else {
            return (0..n).map(|i| DistanceEstimate::rejected(i, Rejection::RearrangeFailed)).collect();
        };
        estimate_toas(r, &self.proc, record.params.t_id_s, n, algorithm, &self.template)
            .iter()
            .map(|t| match t.rejection {
                Some(reason) => DistanceEstimate::rejected(t.responder_index, reason),
                None => {
                    let rx = rx_timestamp_of(r.fp_timestamp, r.fp_index_up, r.upsample_factor, t.toa_index_up);
                    distance(record.poll_tx_ts, rx, &record.params, t.responder_index, cal_offset_m, self.max_range_m)
                }
            })
            .collect()
    }
}

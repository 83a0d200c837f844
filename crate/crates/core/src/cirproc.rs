//! CIR post-processing at the initiator: re-arrangement, upsampling,
//! chunking and per-responder ToA estimation.

use std::ops::Range;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::PulseTemplate;
use crate::error::{Error, Result};
use crate::radio::{Cir, RadioTimestamp, SAMPLE_PERIOD_NS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcParams {
    pub upsample_factor: usize,
    /// Normalised amplitude a sample must reach to count as signal during
    /// re-arrangement.
    pub rearrange_threshold: f64,
    /// Length of the noise-only window searched during re-arrangement.
    pub noise_window: usize,
    pub toa_threshold_multiplier: f64,
    /// Lower bound on the detection threshold, normalised amplitude.
    pub min_threshold: f64,
    pub ss_iterations: usize,
    /// Position of the earliest signal sample after re-arrangement, in
    /// upsampled samples.
    pub guard_offset: usize,
}

impl Default for ProcParams {
    fn default() -> Self {
        ProcParams {
            upsample_factor: 30,
            rearrange_threshold: 0.14,
            noise_window: 228,
            toa_threshold_multiplier: 11.0,
            min_threshold: 0.05,
            ss_iterations: 3,
            guard_offset: 1920,
        }
    }
}

impl ProcParams {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_factor == 0 {
            return Err(Error::Validation("upsample_factor must be at least 1".into()));
        }
        if self.noise_window == 0 || self.noise_window >= crate::radio::CIR_LEN {
            return Err(Error::Validation("noise_window must be in 1..1016".into()));
        }
        if !(self.rearrange_threshold > 0.0 && self.rearrange_threshold <= 1.0) {
            return Err(Error::Validation("rearrange_threshold must be in (0, 1]".into()));
        }
        if self.ss_iterations == 0 {
            return Err(Error::Validation("ss_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToaAlgorithm {
    Threshold,
    SearchSubtract,
}

impl ToaAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            ToaAlgorithm::Threshold => "threshold",
            ToaAlgorithm::SearchSubtract => "search_subtract",
        }
    }
}

/// Why an estimate is not usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    BelowThreshold,
    OutOfChunk,
    PhrError,
    NoDetectablePath,
    RearrangeFailed,
    OutOfRange,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::BelowThreshold => "below_threshold",
            Rejection::OutOfChunk => "out_of_chunk",
            Rejection::PhrError => "phr_error",
            Rejection::NoDetectablePath => "no_detectable_path",
            Rejection::RearrangeFailed => "rearrange_failed",
            Rejection::OutOfRange => "out_of_range",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Rejection::BelowThreshold,
            Rejection::OutOfChunk,
            Rejection::PhrError,
            Rejection::NoDetectablePath,
            Rejection::RearrangeFailed,
            Rejection::OutOfRange,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }
}

/// Band-limited interpolation by zero-padding the spectrum.
pub struct Upsampler {
    n: usize,
    factor: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Upsampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Upsampler").field("n", &self.n).field("factor", &self.factor).finish()
    }
}

impl Upsampler {
    pub fn new(n: usize, factor: usize) -> Self {
        let mut planner = FftPlanner::new();
        Upsampler {
            n,
            factor,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n * factor),
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Returns `n·factor` samples; every `factor`-th equals the input.
    pub fn upsample(&self, input: &[Complex<f64>]) -> Vec<Complex<f64>> {
        assert_eq!(input.len(), self.n, "upsampler length mismatch");
        if self.factor == 1 {
            return input.to_vec();
        }
        let n = self.n;
        let m = n * self.factor;
        let mut spec = input.to_vec();
        self.forward.process(&mut spec);
        let mut padded = vec![Complex::new(0.0, 0.0); m];
        let half = n / 2;
        padded[..half].copy_from_slice(&spec[..half]);
        if n.is_multiple_of(2) {
            // split the Nyquist bin so real inputs stay real
            padded[half] = spec[half] * 0.5;
            padded[m - half] = spec[half] * 0.5;
            padded[m - half + 1..].copy_from_slice(&spec[half + 1..]);
        } else {
            padded[half] = spec[half];
            padded[m - half..].copy_from_slice(&spec[half + 1..]);
        }
        self.inverse.process(&mut padded);
        let scale = 1.0 / n as f64;
        padded.iter_mut().for_each(|v| *v *= scale);
        padded
    }
}

/// Rotated, upsampled and normalised amplitude CIR.
#[derive(Debug, Clone, PartialEq)]
pub struct RearrangedCir {
    pub amplitudes: Vec<f64>,
    /// Source index that became index 0 of the rotated CIR.
    pub shift: usize,
    pub fp_index_up: f64,
    pub fp_timestamp: RadioTimestamp,
    pub sample_period_ns: f64,
    pub upsample_factor: usize,
}

/// Rotates the CIR so the earliest response sits `guard_offset` upsampled
/// samples from the start, then upsamples and normalises it.
pub fn rearrange(cir: &Cir, params: &ProcParams, upsampler: &Upsampler) -> Result<RearrangedCir> {
    let n = cir.samples.len();
    let l = upsampler.factor();
    let amps = cir.amplitudes();
    let max = amps.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::RearrangeFailed);
    }
    let norm: Vec<f64> = amps.iter().map(|a| a / max).collect();

    let w = params.noise_window;
    let mut sum: f64 = norm[..w].iter().sum();
    let (mut best, mut best_sum) = (0usize, sum);
    for start in 1..n {
        sum += norm[(start + w - 1) % n] - norm[start - 1];
        if sum < best_sum - 1e-12 {
            best = start;
            best_sum = sum;
        }
    }
    let first = (0..n)
        .map(|k| (best + k) % n)
        .find(|&i| norm[i] >= params.rearrange_threshold)
        .ok_or(Error::RearrangeFailed)?;

    let guard = (params.guard_offset as f64 / l as f64).round() as usize;
    let shift = (first + n - guard % n) % n;
    let rotated: Vec<Complex<f64>> = (0..n)
        .map(|j| {
            let s = cir.samples[(j + shift) % n];
            Complex::new(f64::from(s.re), f64::from(s.im))
        })
        .collect();
    let up = upsampler.upsample(&rotated);
    let up_amps: Vec<f64> = up.iter().map(|c| c.norm()).collect();
    let up_max = up_amps.iter().copied().fold(0.0, f64::max);
    let amplitudes = up_amps.iter().map(|a| a / up_max).collect();

    Ok(RearrangedCir {
        amplitudes,
        shift,
        fp_index_up: (cir.fp_index - shift as f64).rem_euclid(n as f64) * l as f64,
        fp_timestamp: cir.fp_timestamp,
        sample_period_ns: SAMPLE_PERIOD_NS / l as f64,
        upsample_factor: l,
    })
}

/// Std of the trailing 128 source samples of the normalised CIR.
pub fn noise_std(r: &RearrangedCir) -> f64 {
    let l = r.upsample_factor;
    let start = r.amplitudes.len().saturating_sub(128 * l);
    let tail: Vec<f64> = r.amplitudes[start..].iter().step_by(l).copied().collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    (tail.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / tail.len() as f64).sqrt()
}

/// Splits the upsampled CIR into one window per responder. Windows are
/// `T_ID` wide and centred on the expected response edges.
pub fn chunks(r: &RearrangedCir, t_id_s: f64, n_responders: usize, guard_offset: usize) -> Vec<Range<usize>> {
    let width = (t_id_s * 1e9 / r.sample_period_ns).floor() as usize;
    let start = guard_offset.saturating_sub(width / 2);
    let len = r.amplitudes.len();
    (0..n_responders)
        .map(|i| {
            let lo = (start + i * width).min(len);
            let hi = (start + (i + 1) * width).min(len);
            lo..hi
        })
        .collect()
}

/// First index strictly above `eta`.
pub fn toa_threshold(chunk: &[f64], eta: f64) -> Result<f64, Rejection> {
    match chunk.iter().position(|&a| a > eta) {
        None => Err(Rejection::BelowThreshold),
        // the response began before the chunk
        Some(0) => Err(Rejection::OutOfChunk),
        Some(i) => Ok(i as f64),
    }
}

/// Search-and-subtract on `amps[range]`: repeatedly fits the template at the
/// strongest correlation lag and removes it; the earliest fitted path whose
/// gain exceeds `eta` is the ToA, reported at its leading half-power point
/// relative to `range.start`. The search extends one template length into
/// the neighbouring samples so that pulses straddling the chunk edge are
/// fitted whole; paths peaking outside the chunk are not candidates.
pub fn toa_search_subtract(
    amps: &[f64],
    range: Range<usize>,
    eta: f64,
    iterations: usize,
    template: &PulseTemplate,
) -> Result<f64, Rejection> {
    let w = &template.waveform;
    let m = w.len() as i64;
    if range.is_empty() {
        return Err(Rejection::BelowThreshold);
    }
    let lo = range.start.saturating_sub(w.len());
    let hi = (range.end + w.len()).min(amps.len());
    let mut residual = amps[lo..hi].to_vec();
    let len = residual.len() as i64;
    let (chunk_lo, chunk_hi) = ((range.start - lo) as i64, (range.end - lo) as i64);
    let energy = template.energy();
    // lag j places template sample 0 at residual index j
    let corr_at = |res: &[f64], j: i64| -> f64 {
        let a = (-j).max(0);
        let b = m.min(len - j);
        (a..b).map(|i| w[i as usize] * res[(i + j) as usize]).sum()
    };
    let offset = m - 1;
    let mut corr: Vec<f64> = (-offset..len).map(|j| corr_at(&residual, j)).collect();

    let exclusion = (template.lead.round() as i64).max(1);
    let mut peaks: Vec<i64> = Vec::new();
    let mut found: Vec<f64> = Vec::new();
    let mut outside = false;
    for _ in 0..iterations {
        let (idx, &best) = corr
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty correlation");
        let alpha = best / energy;
        if alpha <= eta {
            break;
        }
        let j = idx as i64 - offset;
        let peak = j + template.peak_index as i64;
        for i in 0..m {
            let k = i + j;
            if (0..len).contains(&k) {
                residual[k as usize] -= alpha * w[i as usize];
            }
        }
        for jj in (j - m + 1).max(-offset)..(j + m).min(len) {
            corr[(jj + offset) as usize] = corr_at(&residual, jj);
        }
        // fit residue of an accepted path, not a separate arrival
        if peaks.iter().any(|&p| (p - peak).abs() < exclusion) {
            continue;
        }
        peaks.push(peak);
        if (chunk_lo..chunk_hi).contains(&peak) {
            found.push((peak - chunk_lo) as f64 - template.lead);
        } else {
            outside = true;
        }
    }
    match found.iter().copied().reduce(f64::min) {
        Some(t) => Ok(t),
        None if outside => Err(Rejection::OutOfChunk),
        None => Err(Rejection::BelowThreshold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaEstimate {
    pub responder_index: usize,
    /// Upsampled index in the re-arranged CIR.
    pub toa_index_up: f64,
    pub valid: bool,
    pub rejection: Option<Rejection>,
}

/// Detection threshold for a re-arranged CIR.
pub fn detection_threshold(r: &RearrangedCir, params: &ProcParams) -> f64 {
    (params.toa_threshold_multiplier * noise_std(r)).max(params.min_threshold)
}

/// Runs `algorithm` on every responder chunk.
pub fn estimate_toas(
    r: &RearrangedCir,
    params: &ProcParams,
    t_id_s: f64,
    n_responders: usize,
    algorithm: ToaAlgorithm,
    template: &PulseTemplate,
) -> Vec<ToaEstimate> {
    let eta = detection_threshold(r, params);
    chunks(r, t_id_s, n_responders, params.guard_offset)
        .into_iter()
        .enumerate()
        .map(|(i, range)| {
            let res = match algorithm {
                ToaAlgorithm::Threshold => toa_threshold(&r.amplitudes[range.clone()], eta),
                ToaAlgorithm::SearchSubtract => {
                    toa_search_subtract(&r.amplitudes, range.clone(), eta, params.ss_iterations, template)
                }
            };
            match res {
                Ok(t) => ToaEstimate {
                    responder_index: i,
                    toa_index_up: range.start as f64 + t,
                    valid: true,
                    rejection: None,
                },
                Err(reason) => ToaEstimate {
                    responder_index: i,
                    toa_index_up: f64::NAN,
                    valid: false,
                    rejection: Some(reason),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::PulseShape;
    use crate::radio::CIR_LEN;
    use proptest::prelude::*;

    fn cir_from(samples: Vec<Complex<i16>>, fp_index: f64) -> Cir {
        Cir {
            samples,
            fp_index,
            fp_timestamp: RadioTimestamp::from_ticks(1_000_000),
            scale: 1.0,
        }
    }

    fn pulse_cir(edges: &[(f64, f64)]) -> Cir {
        let pulse = PulseShape::default();
        let lead = pulse.half_power_lead_ns() / SAMPLE_PERIOD_NS;
        let mut buf = vec![0.0; CIR_LEN];
        for &(edge, amp) in edges {
            for (k, b) in buf.iter_mut().enumerate() {
                *b += amp * pulse.eval((k as f64 - edge - lead) * SAMPLE_PERIOD_NS);
            }
        }
        cir_from(buf.iter().map(|&v| Complex::new((v * 10_000.0).round() as i16, 0)).collect(), edges[0].0)
    }

    #[test]
    fn upsample_identity_and_interpolation() {
        let n = 64;
        let x: Vec<Complex<f64>> = (0..n)
            .map(|k| Complex::new((2.0 * std::f64::consts::PI * 3.0 * k as f64 / n as f64).cos(), 0.0))
            .collect();
        let up = Upsampler::new(n, 4).upsample(&x);
        assert_eq!(up.len(), 256);
        for k in 0..n {
            assert!((up[4 * k] - x[k]).norm() < 1e-12);
        }
        // band-limited tone is reproduced between samples
        for (m, v) in up.iter().enumerate() {
            let want = (2.0 * std::f64::consts::PI * 3.0 * m as f64 / 256.0).cos();
            assert!((v.re - want).abs() < 1e-12 && v.im.abs() < 1e-12);
        }
        assert_eq!(Upsampler::new(n, 1).upsample(&x), x);
    }

    #[test]
    fn rearrange_moves_edge_to_guard() {
        // earliest response at 500, strongest later at 780
        let cir = pulse_cir(&[(500.0, 0.6), (780.0, 1.0)]);
        let params = ProcParams::default();
        let up = Upsampler::new(CIR_LEN, params.upsample_factor);
        let r = rearrange(&cir, &params, &up).unwrap();
        assert_eq!(r.amplitudes.len(), CIR_LEN * 30);
        let guard_src = 64;
        let src: Vec<f64> = r.amplitudes.iter().step_by(30).copied().collect();
        let src_max = src.iter().copied().fold(0.0, f64::max);
        assert!(src[guard_src] / src_max >= params.rearrange_threshold * 0.99);
        assert!(src[guard_src - 1] / src_max < params.rearrange_threshold * 1.01);
        let edge = (r.shift + guard_src) % CIR_LEN;
        assert!((497..=501).contains(&edge), "edge {edge}");
        let max = r.amplitudes.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!((r.fp_index_up - ((500.0 - r.shift as f64).rem_euclid(1016.0) * 30.0)).abs() < 1e-9);
    }

    #[test]
    fn rearrange_inverse_shift_recovers_source() {
        let cir = pulse_cir(&[(300.0, 0.8), (420.0, 0.5)]);
        let params = ProcParams {
            upsample_factor: 1,
            ..Default::default()
        };
        let r = rearrange(&cir, &params, &Upsampler::new(CIR_LEN, 1)).unwrap();
        let src = cir.amplitudes();
        let max = src.iter().copied().fold(0.0, f64::max);
        for j in 0..CIR_LEN {
            assert!((r.amplitudes[j] - src[(j + r.shift) % CIR_LEN] / max).abs() < 1e-12);
        }
    }

    #[test]
    fn rearrange_all_zero_fails() {
        let cir = cir_from(vec![Complex::new(0, 0); CIR_LEN], 750.0);
        let p = ProcParams::default();
        assert!(matches!(rearrange(&cir, &p, &Upsampler::new(CIR_LEN, 30)), Err(Error::RearrangeFailed)));
    }

    #[test]
    fn chunk_width_and_start() {
        let r = RearrangedCir {
            amplitudes: vec![0.0; CIR_LEN * 30],
            shift: 0,
            fp_index_up: 0.0,
            fp_timestamp: RadioTimestamp::default(),
            sample_period_ns: SAMPLE_PERIOD_NS / 30.0,
            upsample_factor: 30,
        };
        let c = chunks(&r, 128e-9, 6, 1920);
        assert_eq!(c[0].len(), 3833);
        assert_eq!(c[0].start, 1920 - 3833 / 2);
        assert_eq!(c[5].end, c[0].start + 6 * 3833);
        assert_eq!(chunks(&r, 128e-9, 6, 480)[0].start, 0);
    }

    #[test]
    fn threshold_examples() {
        let mut c = vec![0.0; 3833];
        c[1000] = 0.15;
        c[1001] = 0.3;
        assert_eq!(toa_threshold(&c, 0.2), Ok(1001.0));
        assert_eq!(toa_threshold(&c, 0.3), Err(Rejection::BelowThreshold));
        c[0] = 0.5;
        assert_eq!(toa_threshold(&c, 0.2), Err(Rejection::OutOfChunk));
    }

    fn rendered_chunk(paths: &[(f64, f64)], len: usize, res_ns: f64) -> Vec<f64> {
        let pulse = PulseShape::default();
        (0..len)
            .map(|k| {
                paths
                    .iter()
                    .map(|&(peak, amp)| amp * pulse.eval((k as f64 - peak) * res_ns))
                    .sum::<f64>()
                    .abs()
            })
            .collect()
    }

    #[test]
    fn ss_single_pulse_at_half_power_edge() {
        let res = SAMPLE_PERIOD_NS / 30.0;
        let t = PulseTemplate::from_shape(&PulseShape::default(), res);
        let chunk = rendered_chunk(&[(1800.0, 0.7)], 3833, res);
        let toa = toa_search_subtract(&chunk, 0..chunk.len(), 0.05, 3, &t).unwrap();
        assert!((toa - (1800.0 - t.lead)).abs() < 1.0, "{toa}");
    }

    #[test]
    fn ss_finds_weaker_direct_path() {
        // direct path at 0.4× a multipath component 10 ns later
        let res = SAMPLE_PERIOD_NS / 30.0;
        let t = PulseTemplate::from_shape(&PulseShape::default(), res);
        let mpc = 1500.0 + 10.0 / res;
        let chunk = rendered_chunk(&[(1500.0, 0.4), (mpc, 1.0)], 3833, res);
        let toa = toa_search_subtract(&chunk, 0..chunk.len(), 0.1, 3, &t).unwrap();
        assert!((toa - (1500.0 - t.lead)).abs() < 2.0, "{toa}");
        let first_only = toa_search_subtract(&chunk, 0..chunk.len(), 0.1, 1, &t).unwrap();
        assert!((first_only - (mpc - t.lead)).abs() < 2.0);
    }

    #[test]
    fn ss_below_threshold() {
        let res = SAMPLE_PERIOD_NS / 30.0;
        let t = PulseTemplate::from_shape(&PulseShape::default(), res);
        let chunk = rendered_chunk(&[(1800.0, 0.04)], 3833, res);
        assert_eq!(toa_search_subtract(&chunk, 0..3833, 0.05, 3, &t), Err(Rejection::BelowThreshold));
        // a pulse peaking just before the chunk belongs to the previous one
        let amps = rendered_chunk(&[(3833.0 - 30.0, 0.9)], 3 * 3833, res);
        assert_eq!(toa_search_subtract(&amps, 3833..7666, 0.05, 3, &t), Err(Rejection::OutOfChunk));
        let toa = toa_search_subtract(&amps, 0..3833, 0.05, 3, &t).unwrap();
        assert!((toa - (3803.0 - t.lead)).abs() < 1.0, "{toa}");
    }

    #[test]
    fn estimates_per_responder() {
        // two responses 128 ns apart plus an empty third slot
        let t_id = 128e-9;
        let slot = t_id * 1e9 / SAMPLE_PERIOD_NS;
        let cir = pulse_cir(&[(400.0, 1.0), (400.0 + slot + 3.0, 0.8)]);
        let params = ProcParams::default();
        let up = Upsampler::new(CIR_LEN, 30);
        let r = rearrange(&cir, &params, &up).unwrap();
        let res = r.sample_period_ns;
        let t = PulseTemplate::from_shape(&PulseShape::default(), res);
        for alg in [ToaAlgorithm::Threshold, ToaAlgorithm::SearchSubtract] {
            let est = estimate_toas(&r, &params, t_id, 3, alg, &t);
            assert!(est[0].valid && est[1].valid, "{alg:?} {est:?}");
            assert_eq!(est[2].rejection, Some(Rejection::BelowThreshold));
            let gap_ns = (est[1].toa_index_up - est[0].toa_index_up) * res;
            assert!((gap_ns - (t_id * 1e9 + 3.0 * SAMPLE_PERIOD_NS)).abs() < 0.3, "{alg:?} {gap_ns}");
        }
    }

    proptest! {
        #[test]
        fn rearrange_is_a_rotation(seed in any::<u64>(), edge in 0usize..1016) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut cir = pulse_cir(&[(edge as f64, 1.0)]);
            for s in cir.samples.iter_mut() {
                s.re += rng.random_range(-200..200);
                s.im += rng.random_range(-200..200);
            }
            let p = ProcParams { upsample_factor: 1, ..Default::default() };
            let r = rearrange(&cir, &p, &Upsampler::new(CIR_LEN, 1)).unwrap();
            let src = cir.amplitudes();
            let max = src.iter().copied().fold(0.0, f64::max);
            prop_assert!(r.shift < CIR_LEN);
            for j in 0..CIR_LEN {
                prop_assert!((r.amplitudes[j] - src[(j + r.shift) % CIR_LEN] / max).abs() < 1e-12);
            }
        }

        #[test]
        fn threshold_first_crossing(v in proptest::collection::vec(0.0..1.0f64, 2..200), eta in 0.0..1.0f64) {
            match toa_threshold(&v, eta) {
                Ok(i) => {
                    let i = i as usize;
                    prop_assert!(v[i] > eta);
                    prop_assert!(v[..i].iter().all(|&a| a <= eta));
                }
                Err(Rejection::OutOfChunk) => prop_assert!(v[0] > eta),
                Err(_) => prop_assert!(v.iter().all(|&a| a <= eta)),
            }
        }
    }
}

//! Scenario execution and error statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{gen_multipath_with, ChannelParams, Environment, MultipathProfile, PulseShape, PulseTemplate};
use crate::cirproc::{ProcParams, Rejection, ToaAlgorithm};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::locate::{locate, PositionEstimate};
use crate::protocol::{crng_exchange, sstwr, Compensation, CrngParams, ExchangeConditions, ExchangeRecord, Node};
use crate::radio::{ClockModel, NodeClock, RadioConfig, TIMESTAMP_MODULUS};
use crate::ranging::{DistanceEstimate, Processor};

pub const DEFAULT_OUTLIER_THRESHOLD_M: f64 = 10.0;
pub const DEFAULT_EXCHANGE_RATE_HZ: f64 = 8.0;
pub const DEFAULT_PHR_ERROR_RATE: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    CrngThreshold,
    CrngSs,
    Sstwr,
    SstwrComp,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::CrngThreshold, Scheme::CrngSs, Scheme::Sstwr, Scheme::SstwrComp];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::CrngThreshold => "crng_threshold",
            Scheme::CrngSs => "crng_ss",
            Scheme::Sstwr => "sstwr",
            Scheme::SstwrComp => "sstwr_comp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Scheme::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn algorithm(self) -> Option<ToaAlgorithm> {
        match self {
            Scheme::CrngThreshold => Some(ToaAlgorithm::Threshold),
            Scheme::CrngSs => Some(ToaAlgorithm::SearchSubtract),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub point: Point,
    /// Speed on the segment leaving this waypoint, m/s.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Static(Vec<Point>),
    Trajectory(Vec<Waypoint>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClockSpec {
    /// Initiator first, then one entry per responder.
    Fixed(Vec<f64>),
    /// Each node drawn once from U(−r, r).
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub anchors: Vec<Point>,
    pub motion: Motion,
    /// Trials per position; laps for a trajectory.
    pub trials_per_position: usize,
    pub environment: Environment,
    pub channel: ChannelParams,
    pub noise_sigma: f64,
    pub toa_jitter_s: f64,
    pub radio: RadioConfig,
    pub clocks: ClockSpec,
    pub trim_slope_ppm: f64,
    pub seed: u64,
    pub params: CrngParams,
    pub proc: ProcParams,
    pub pulse: PulseShape,
    pub schemes: Vec<Scheme>,
    pub compensation: Compensation,
    pub phr_error_rate: f64,
    pub max_range_m: f64,
    pub outlier_threshold_m: f64,
    pub exchange_rate_hz: f64,
    pub sstwr_t_resp_s: f64,
    pub nlls_tol: f64,
    pub nlls_max_iter: usize,
    pub cal_offset_threshold_m: f64,
    pub cal_offset_ss_m: f64,
}

impl Scenario {
    /// Defaults for everything but geometry.
    pub fn new(anchors: Vec<Point>, motion: Motion) -> Self {
        let params = CrngParams {
            n_responders: anchors.len(),
            ..Default::default()
        };
        Scenario {
            anchors,
            motion,
            trials_per_position: 1,
            environment: Environment::None,
            channel: ChannelParams::for_environment(Environment::None),
            noise_sigma: 0.0,
            toa_jitter_s: 0.0,
            radio: RadioConfig::default(),
            clocks: ClockSpec::Uniform(8.0),
            trim_slope_ppm: crate::radio::DEFAULT_TRIM_SLOPE_PPM,
            seed: 0,
            params,
            proc: ProcParams::default(),
            pulse: PulseShape::default(),
            schemes: Scheme::ALL.to_vec(),
            compensation: Compensation::Full,
            phr_error_rate: DEFAULT_PHR_ERROR_RATE,
            max_range_m: crate::ranging::DEFAULT_MAX_RANGE_M,
            outlier_threshold_m: DEFAULT_OUTLIER_THRESHOLD_M,
            exchange_rate_hz: DEFAULT_EXCHANGE_RATE_HZ,
            sstwr_t_resp_s: 320e-6,
            nlls_tol: crate::locate::DEFAULT_TOL,
            nlls_max_iter: crate::locate::DEFAULT_MAX_ITER,
            cal_offset_threshold_m: 0.0,
            cal_offset_ss_m: 0.0,
        }
    }

    pub fn with_environment(mut self, env: Environment) -> Self {
        self.environment = env;
        self.channel = ChannelParams::for_environment(env);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() < 3 {
            return Err(Error::Validation(format!("need at least 3 anchors, got {}", self.anchors.len())));
        }
        if self.params.n_responders != self.anchors.len() {
            return Err(Error::Validation(format!(
                "n_responders = {} but {} anchors are configured",
                self.params.n_responders,
                self.anchors.len()
            )));
        }
        self.params.validate()?;
        self.proc.validate()?;
        if self.trials_per_position == 0 {
            return Err(Error::Validation("trials_per_position must be at least 1".into()));
        }
        match &self.motion {
            Motion::Static(p) if p.is_empty() => {
                return Err(Error::Validation("initiator_positions is empty".into()));
            }
            Motion::Trajectory(w) if w.len() < 2 => {
                return Err(Error::Validation("a trajectory needs at least 2 waypoints".into()));
            }
            Motion::Trajectory(w) => {
                for (i, seg) in w.windows(2).enumerate() {
                    if !(seg[0].speed > 0.0) || !seg[0].speed.is_finite() {
                        return Err(Error::ZeroSpeedSegment(i));
                    }
                }
            }
            _ => {}
        }
        if let ClockSpec::Fixed(v) = &self.clocks {
            if v.len() != self.anchors.len() + 1 {
                return Err(Error::Validation(format!(
                    "clock_offsets_ppm needs {} entries (initiator first), got {}",
                    self.anchors.len() + 1,
                    v.len()
                )));
            }
        }
        if self.schemes.is_empty() {
            return Err(Error::Validation("no schemes selected".into()));
        }
        if !(self.exchange_rate_hz > 0.0) {
            return Err(Error::Validation("exchange_rate_hz must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.phr_error_rate) {
            return Err(Error::Validation("phr_error_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn cal_offset(&self, scheme: Scheme) -> f64 {
        match scheme {
            Scheme::CrngThreshold => self.cal_offset_threshold_m,
            Scheme::CrngSs => self.cal_offset_ss_m,
            _ => 0.0,
        }
    }

    pub fn template(&self) -> PulseTemplate {
        PulseTemplate::from_shape(&self.pulse, crate::radio::SAMPLE_PERIOD_NS / self.proc.upsample_factor as f64)
    }

    pub fn processor(&self) -> Processor {
        Processor::new(self.proc, self.template(), self.max_range_m)
    }

    fn conditions(&self) -> ExchangeConditions {
        ExchangeConditions {
            radio: self.radio,
            noise_sigma: self.noise_sigma,
            pulse: self.pulse,
            toa_jitter_s: self.toa_jitter_s,
            phr_error_rate: self.phr_error_rate,
        }
    }

    /// Every exchange of the run, in exchange-id order.
    pub fn exchanges(&self) -> Result<Vec<ExchangeSlot>> {
        self.validate()?;
        let trials = self.trials_per_position;
        let period = 1.0 / self.exchange_rate_hz;
        let mut out = Vec::new();
        match &self.motion {
            Motion::Static(points) => {
                for (p, &pos) in points.iter().enumerate() {
                    for t in 0..trials {
                        let id = (p * trials + t) as u64;
                        out.push(ExchangeSlot {
                            exchange_id: id,
                            position_id: p,
                            trial: t,
                            position: pos,
                            channel_key: p as u64,
                            start_s: id as f64 * period,
                        });
                    }
                }
            }
            Motion::Trajectory(waypoints) => {
                let path = sample_path(waypoints, self.exchange_rate_hz)?;
                let n = path.len();
                for lap in 0..trials {
                    for (k, &(pos, seg)) in path.iter().enumerate() {
                        let id = (lap * n + k) as u64;
                        out.push(ExchangeSlot {
                            exchange_id: id,
                            position_id: k,
                            trial: lap,
                            position: pos,
                            channel_key: seg as u64,
                            start_s: id as f64 * period,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Crystal offsets, initiator first.
    pub fn clock_offsets(&self) -> Vec<f64> {
        match &self.clocks {
            ClockSpec::Fixed(v) => v.clone(),
            ClockSpec::Uniform(r) => {
                let mut rng = substream(self.seed, "clock", 0, 0);
                (0..=self.anchors.len())
                    .map(|_| if *r > 0.0 { rng.random_range(-r..*r) } else { 0.0 })
                    .collect()
            }
        }
    }

    fn clock_model(&self, ppm: f64) -> ClockModel {
        ClockModel::new(ppm).with_trim_slope(self.trim_slope_ppm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeSlot {
    pub exchange_id: u64,
    pub position_id: usize,
    pub trial: usize,
    pub position: Point,
    /// Selects the multipath realisation of every link.
    pub channel_key: u64,
    pub start_s: f64,
}

/// Samples a piecewise-linear path at `rate_hz`; returns the position and
/// segment index of every sample.
pub fn sample_path(waypoints: &[Waypoint], rate_hz: f64) -> Result<Vec<(Point, usize)>> {
    if waypoints.len() < 2 {
        return Err(Error::Validation("a trajectory needs at least 2 waypoints".into()));
    }
    let mut ends = Vec::with_capacity(waypoints.len() - 1);
    let mut total = 0.0;
    for (i, seg) in waypoints.windows(2).enumerate() {
        if !(seg[0].speed > 0.0) || !seg[0].speed.is_finite() {
            return Err(Error::ZeroSpeedSegment(i));
        }
        total += seg[0].point.distance(seg[1].point) / seg[0].speed;
        ends.push(total);
    }
    let n = (total * rate_hz + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let t = k as f64 / rate_hz;
        while seg + 1 < ends.len() && t > ends[seg] {
            seg += 1;
        }
        let begin = if seg == 0 { 0.0 } else { ends[seg - 1] };
        let span = ends[seg] - begin;
        let frac = if span > 0.0 { ((t - begin) / span).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (waypoints[seg].point, waypoints[seg + 1].point);
        out.push((a + (b - a) * frac, seg));
    }
    Ok(out)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, tag, a, b)`.
pub fn substream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for byte in tag.bytes() {
        h = splitmix(h ^ u64::from(byte));
    }
    h = splitmix(h ^ a);
    h = splitmix(h ^ b.rotate_left(32));
    ChaCha8Rng::seed_from_u64(h)
}

/// One row per scheme × exchange × responder.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub scheme: Scheme,
    pub position_id: usize,
    pub trial: usize,
    pub responder: usize,
    pub d_true: f64,
    pub d_est: f64,
    pub valid: bool,
    pub reason: Option<Rejection>,
    pub x_true: f64,
    pub y_true: f64,
    pub x_est: f64,
    pub y_est: f64,
    pub loc_err: f64,
}

/// Output of a scenario run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ExchangeRecord>,
    pub rows: Vec<Row>,
    pub summary: RunSummary,
}

/// Simulates every concurrent-ranging exchange of the scenario. Trim state
/// persists from one exchange to the next, so this runs sequentially.
pub fn simulate_records(scn: &Scenario) -> Result<Vec<ExchangeRecord>> {
    let slots = scn.exchanges()?;
    let offsets = scn.clock_offsets();
    let mut origin_rng = substream(scn.seed, "origin", 0, 0);
    // clock phase is not aligned with the global tick grid
    let mut origin = || origin_rng.random::<f64>() * TIMESTAMP_MODULUS as f64;
    let mut initiator = Node {
        position: Point::default(),
        clock: NodeClock::new(scn.clock_model(offsets[0]), origin()),
    };
    let mut responders: Vec<Node> = scn
        .anchors
        .iter()
        .zip(&offsets[1..])
        .map(|(&p, &ppm)| Node {
            position: p,
            clock: NodeClock::new(scn.clock_model(ppm), origin()),
        })
        .collect();
    let cond = scn.conditions();
    let mut profiles: Vec<MultipathProfile> = Vec::new();
    let mut profile_key = None;
    let mut records = Vec::with_capacity(slots.len());
    for slot in &slots {
        if profile_key != Some(slot.channel_key) {
            profiles = (0..scn.anchors.len())
                .map(|a| {
                    let mut rng = substream(scn.seed, "mpc", slot.channel_key, a as u64);
                    gen_multipath_with(scn.environment, &scn.channel, &mut rng)
                })
                .collect();
            profile_key = Some(slot.channel_key);
        }
        initiator.position = slot.position;
        let mut rng = substream(scn.seed, "xchg", slot.exchange_id, 0);
        let (record, _) = crng_exchange(
            slot.exchange_id,
            &initiator,
            &mut responders,
            &profiles,
            &scn.params,
            scn.compensation,
            &cond,
            slot.start_s,
            &mut rng,
        )?;
        records.push(record);
    }
    Ok(records)
}

fn locate_row_fields(scn: &Scenario, dists: &[DistanceEstimate]) -> Option<PositionEstimate> {
    let (anchors, d): (Vec<Point>, Vec<f64>) = dists
        .iter()
        .filter(|e| e.valid)
        .map(|e| (scn.anchors[e.responder_index], e.distance_m))
        .unzip();
    if anchors.len() < 3 {
        return None;
    }
    locate(&anchors, &d, scn.nlls_tol, scn.nlls_max_iter).ok()
}

fn rows_for(scn: &Scenario, scheme: Scheme, slot: &ExchangeSlot, truth: &[f64], dists: &[DistanceEstimate]) -> Vec<Row> {
    let pos = locate_row_fields(scn, dists);
    let (x_est, y_est, loc_err) = match pos {
        Some(p) => (p.position.x, p.position.y, p.position.distance(slot.position)),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    dists
        .iter()
        .map(|e| Row {
            scheme,
            position_id: slot.position_id,
            trial: slot.trial,
            responder: e.responder_index,
            d_true: truth[e.responder_index],
            d_est: e.distance_m,
            valid: e.valid,
            reason: e.rejection,
            x_true: slot.position.x,
            y_true: slot.position.y,
            x_est,
            y_est,
            loc_err,
        })
        .collect()
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        let threads = std::env::var("CRNG_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        if threads > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    f()
}

fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        with_pool(|| items.par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        with_pool(|| items.iter().map(&f).collect())
    }
}

/// Runs the offline pipeline (re-arrange → ToA → distance → locate) on
/// logged records. `process` on the CLI and the in-process run share this.
pub fn process_records(scn: &Scenario, records: &[ExchangeRecord]) -> Result<Vec<Row>> {
    let slots = scn.exchanges()?;
    let by_id: std::collections::HashMap<u64, &ExchangeSlot> = slots.iter().map(|s| (s.exchange_id, s)).collect();
    let processor = scn.processor();
    let schemes: Vec<Scheme> = scn.schemes.iter().copied().filter(|s| s.algorithm().is_some()).collect();
    for r in records {
        if !by_id.contains_key(&r.exchange_id) {
            return Err(Error::Validation(format!("record {} does not belong to this scenario", r.exchange_id)));
        }
        if r.params.n_responders != scn.anchors.len() {
            return Err(Error::Validation(format!(
                "record {} has {} responders, scenario has {} anchors",
                r.exchange_id,
                r.params.n_responders,
                scn.anchors.len()
            )));
        }
    }
    let per_record: Vec<Vec<(Scheme, Vec<Row>)>> = map_ordered(records, |rec| {
        let slot = by_id[&rec.exchange_id];
        let truth: Vec<f64> = scn.anchors.iter().map(|a| a.distance(slot.position)).collect();
        let params = CrngParams {
            n_responders: rec.params.n_responders,
            ..scn.params
        };
        let rec = ExchangeRecord { params, ..rec.clone() };
        let rearranged = if rec.phr_error { None } else { processor.rearranged(&rec).ok() };
        schemes
            .iter()
            .map(|&s| {
                let alg = s.algorithm().expect("concurrent scheme");
                let d = processor.distances_with(&rec, rearranged.as_ref(), alg, scn.cal_offset(s));
                (s, rows_for(scn, s, slot, &truth, &d))
            })
            .collect()
    });
    let mut rows = Vec::new();
    for scheme in &schemes {
        for rec in &per_record {
            for (s, r) in rec {
                if s == scheme {
                    rows.extend(r.iter().cloned());
                }
            }
        }
    }
    Ok(rows)
}

fn sstwr_rows(scn: &Scenario, scheme: Scheme) -> Result<Vec<Row>> {
    let slots = scn.exchanges()?;
    let offsets = scn.clock_offsets();
    let init_model = scn.clock_model(offsets[0]);
    let models: Vec<ClockModel> = offsets[1..].iter().map(|&p| scn.clock_model(p)).collect();
    let radio = RadioConfig {
        timestamp_jitter_s: scn.toa_jitter_s,
        ..scn.radio
    };
    let compensated = scheme == Scheme::SstwrComp;
    let per_slot: Vec<Result<Vec<Row>>> = map_ordered(&slots, |slot| {
        let mut dists = Vec::with_capacity(scn.anchors.len());
        let mut truth = Vec::with_capacity(scn.anchors.len());
        for (i, (&anchor, model)) in scn.anchors.iter().zip(&models).enumerate() {
            let mut rng = substream(scn.seed, scheme.name(), slot.exchange_id, i as u64);
            truth.push(anchor.distance(slot.position));
            let d = sstwr((&init_model, slot.position), (model, anchor), scn.sstwr_t_resp_s, compensated, &radio, &mut rng)?;
            let valid = d > 0.0 && d < scn.max_range_m;
            dists.push(DistanceEstimate {
                responder_index: i,
                distance_m: d,
                raw_tof_ns: d / crate::channel::SPEED_OF_LIGHT * 1e9,
                valid,
                rejection: (!valid).then_some(Rejection::OutOfRange),
            });
        }
        Ok(rows_for(scn, scheme, slot, &truth, &dists))
    });
    let mut rows = Vec::new();
    for r in per_slot {
        rows.extend(r?);
    }
    Ok(rows)
}

fn run(scn: &Scenario) -> Result<RunOutput> {
    scn.validate()?;
    let wants_crng = scn.schemes.iter().any(|s| s.algorithm().is_some());
    let records = if wants_crng { simulate_records(scn)? } else { Vec::new() };
    let mut rows = if wants_crng { process_records(scn, &records)? } else { Vec::new() };
    for &scheme in &scn.schemes {
        if scheme.algorithm().is_none() {
            rows.extend(sstwr_rows(scn, scheme)?);
        }
    }
    let summary = summarize(&rows, scn.outlier_threshold_m);
    Ok(RunOutput { records, rows, summary })
}

pub fn run_static(scn: &Scenario) -> Result<RunOutput> {
    if !matches!(scn.motion, Motion::Static(_)) {
        return Err(Error::Validation("run_static needs initiator_positions".into()));
    }
    run(scn)
}

pub fn run_trajectory(scn: &Scenario) -> Result<RunOutput> {
    if !matches!(scn.motion, Motion::Trajectory(_)) {
        return Err(Error::Validation("run_trajectory needs a trajectory".into()));
    }
    run(scn)
}

/// Error statistics of one population.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ErrorStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// Percentiles 50, 75, 90, 95, 99 of the absolute error.
    pub abs_percentiles: [f64; 5],
}

pub const PERCENTILES: [f64; 5] = [50.0, 75.0, 90.0, 95.0, 99.0];

/// Nearest-rank percentile of sorted data.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return ErrorStats {
                count: 0,
                median: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
                abs_percentiles: [f64::NAN; 5],
            };
        }
        let n = errors.len() as f64;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n;
        let std = (sorted.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let mut abs: Vec<f64> = sorted.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        ErrorStats {
            count: sorted.len(),
            median,
            mean,
            std,
            abs_percentiles: PERCENTILES.map(|p| nearest_rank(&abs, p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub per_responder: Vec<ErrorStats>,
    pub ranging: ErrorStats,
    pub localization: ErrorStats,
    pub ranging_success_rate: f64,
    pub localization_success_rate: f64,
    pub ranging_outliers: usize,
    pub localization_outliers: usize,
    pub exchanges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub schemes: Vec<SchemeSummary>,
}

impl RunSummary {
    pub fn scheme(&self, s: Scheme) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|x| x.scheme == s)
    }
}

/// Aggregates rows per scheme. Errors beyond `outlier_m` are counted as
/// outliers: dropped from the statistics, kept in success-rate denominators.
pub fn summarize(rows: &[Row], outlier_m: f64) -> RunSummary {
    let mut schemes: Vec<Scheme> = rows.iter().map(|r| r.scheme).collect();
    schemes.sort();
    schemes.dedup();
    let schemes = schemes
        .into_iter()
        .map(|scheme| {
            let mine: Vec<&Row> = rows.iter().filter(|r| r.scheme == scheme).collect();
            let n_resp = mine.iter().map(|r| r.responder + 1).max().unwrap_or(0);
            let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_resp];
            let mut all = Vec::new();
            let mut outliers = 0;
            for r in &mine {
                if !r.valid {
                    continue;
                }
                let e = r.d_est - r.d_true;
                if e.abs() > outlier_m {
                    outliers += 1;
                    continue;
                }
                per[r.responder].push(e);
                all.push(e);
            }
            // one localization outcome per exchange
            let mut exchanges: Vec<(usize, usize, f64)> = mine.iter().map(|r| (r.position_id, r.trial, r.loc_err)).collect();
            exchanges.sort_by_key(|e| (e.0, e.1));
            exchanges.dedup_by(|a, b| (a.0, a.1) == (b.0, b.1));
            let mut loc = Vec::new();
            let mut loc_outliers = 0;
            for &(_, _, err) in &exchanges {
                if err.is_nan() {
                    continue;
                }
                if err > outlier_m {
                    loc_outliers += 1;
                } else {
                    loc.push(err);
                }
            }
            let attempts = mine.len().max(1) as f64;
            SchemeSummary {
                scheme,
                per_responder: per.iter().map(|v| ErrorStats::from_errors(v)).collect(),
                ranging: ErrorStats::from_errors(&all),
                localization: ErrorStats::from_errors(&loc),
                ranging_success_rate: all.len() as f64 / attempts,
                localization_success_rate: loc.len() as f64 / exchanges.len().max(1) as f64,
                ranging_outliers: outliers,
                localization_outliers: loc_outliers,
                exchanges: exchanges.len(),
            }
        })
        .collect();
    RunSummary { schemes }
}

//! Scenario files: flat TOML, unknown keys rejected.

use serde::Deserialize;

use crate::channel::{ChannelParams, Environment, PulseShape};
use crate::cirproc::ProcParams;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::protocol::{Compensation, CrngParams, MAX_RESPONDERS};
use crate::radio::{RadioConfig, DEFAULT_TRIM_SLOPE_PPM};
use crate::sim::{ClockSpec, Motion, Scenario, Scheme, Waypoint};

/// Key reference printed by `--help`.
pub const CONFIG_HELP: &str = "\
Scenario keys (TOML, `#` comments; unknown or duplicate keys are errors):
  anchors = [[x, y], ...]             responder positions, metres (required, 3..7)
  initiator_positions = [[x, y], ...] static run positions
  trajectory = [[x, y, speed], ...]   waypoints; speed (m/s) applies to the outgoing segment
  trials_per_position = 1             trials per position, laps for a trajectory
  n_responders                        optional; must equal the anchor count (max 7)
  seed = 0
  schemes = [\"crng_threshold\", \"crng_ss\", \"sstwr\", \"sstwr_comp\"]
  compensation = \"full\"               full | none
  environment = \"none\"                none | residential | office | industrial
  noise_sigma = 0.0                   CIR noise std per component, 1 m direct path = 1.0
  toa_jitter_ns = 0.0                 per-response arrival jitter
  timestamp_jitter_ns = 0.0           RX timestamp jitter
  cfo_noise_ppm = 0.05                CFO measurement noise std
  rx_antenna_delay_ns = 0.0
  clock_offsets_ppm = [...]           initiator first, then one per anchor
  clock_offset_range_ppm = 8.0        used when clock_offsets_ppm is absent: U(-r, r)
  trim_slope_ppm = -1.48
  t_resp_us = 800.0
  t_id_ns = 128.0
  t_det_default_us = 560.0
  t_det_jitter_ns = 0.0
  antenna_tx_delay_ns = 0.0
  sstwr_t_resp_us = 320.0
  phr_error_rate = 0.003
  pulse_bandwidth_mhz = 900.0
  pulse_rolloff = 1.0
  upsample_factor = 30
  rearrange_threshold = 0.14
  noise_window = 228
  toa_threshold_multiplier = 11.0
  min_threshold = 0.05
  ss_iterations = 3
  guard_offset = 1920                 upsampled samples
  cal_offset_threshold_m = 0.0
  cal_offset_ss_m = 0.0
  max_range_m = 100.0
  outlier_threshold_m = 10.0
  exchange_rate_hz = 8.0
  nlls_tol = 1e-6
  nlls_max_iter = 100
  mpc_mean_taps, mpc_mean_excess_delay_ns, mpc_max_excess_delay_ns,
  mpc_decay_ns, mpc_first_tap_power   override the environment's tap statistics
";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub anchors: Vec<Point>,
    pub initiator_positions: Option<Vec<Point>>,
    pub trajectory: Option<Vec<[f64; 3]>>,
    pub trials_per_position: usize,
    pub n_responders: Option<usize>,
    pub seed: u64,
    pub schemes: Vec<String>,
    pub compensation: Compensation,
    pub environment: Environment,
    pub noise_sigma: f64,
    pub toa_jitter_ns: f64,
    pub timestamp_jitter_ns: f64,
    pub cfo_noise_ppm: f64,
    pub rx_antenna_delay_ns: f64,
    pub clock_offsets_ppm: Option<Vec<f64>>,
    pub clock_offset_range_ppm: Option<f64>,
    pub trim_slope_ppm: f64,
    pub t_resp_us: f64,
    pub t_id_ns: f64,
    pub t_det_default_us: f64,
    pub t_det_jitter_ns: f64,
    pub antenna_tx_delay_ns: f64,
    pub sstwr_t_resp_us: f64,
    pub phr_error_rate: f64,
    pub pulse_bandwidth_mhz: f64,
    pub pulse_rolloff: f64,
    pub upsample_factor: usize,
    pub rearrange_threshold: f64,
    pub noise_window: usize,
    pub toa_threshold_multiplier: f64,
    pub min_threshold: f64,
    pub ss_iterations: usize,
    pub guard_offset: usize,
    pub cal_offset_threshold_m: f64,
    pub cal_offset_ss_m: f64,
    pub max_range_m: f64,
    pub outlier_threshold_m: f64,
    pub exchange_rate_hz: f64,
    pub nlls_tol: f64,
    pub nlls_max_iter: usize,
    pub mpc_mean_taps: Option<f64>,
    pub mpc_mean_excess_delay_ns: Option<f64>,
    pub mpc_max_excess_delay_ns: Option<f64>,
    pub mpc_decay_ns: Option<f64>,
    pub mpc_first_tap_power: Option<f64>,
}

impl Default for Config {
    fn default() -> Self {
        let proc = ProcParams::default();
        let radio = RadioConfig::default();
        Config {
            anchors: Vec::new(),
            initiator_positions: None,
            trajectory: None,
            trials_per_position: 1,
            n_responders: None,
            seed: 0,
            schemes: Scheme::ALL.iter().map(|s| s.name().to_string()).collect(),
            compensation: Compensation::Full,
            environment: Environment::None,
            noise_sigma: 0.0,
            toa_jitter_ns: 0.0,
            timestamp_jitter_ns: 0.0,
            cfo_noise_ppm: radio.cfo_noise_ppm,
            rx_antenna_delay_ns: 0.0,
            clock_offsets_ppm: None,
            clock_offset_range_ppm: None,
            trim_slope_ppm: DEFAULT_TRIM_SLOPE_PPM,
            t_resp_us: 800.0,
            t_id_ns: 128.0,
            t_det_default_us: 560.0,
            t_det_jitter_ns: 0.0,
            antenna_tx_delay_ns: 0.0,
            sstwr_t_resp_us: 320.0,
            phr_error_rate: crate::sim::DEFAULT_PHR_ERROR_RATE,
            pulse_bandwidth_mhz: 900.0,
            pulse_rolloff: 1.0,
            upsample_factor: proc.upsample_factor,
            rearrange_threshold: proc.rearrange_threshold,
            noise_window: proc.noise_window,
            toa_threshold_multiplier: proc.toa_threshold_multiplier,
            min_threshold: proc.min_threshold,
            ss_iterations: proc.ss_iterations,
            guard_offset: proc.guard_offset,
            cal_offset_threshold_m: 0.0,
            cal_offset_ss_m: 0.0,
            max_range_m: crate::ranging::DEFAULT_MAX_RANGE_M,
            outlier_threshold_m: crate::sim::DEFAULT_OUTLIER_THRESHOLD_M,
            exchange_rate_hz: crate::sim::DEFAULT_EXCHANGE_RATE_HZ,
            nlls_tol: crate::locate::DEFAULT_TOL,
            nlls_max_iter: crate::locate::DEFAULT_MAX_ITER,
            mpc_mean_taps: None,
            mpc_mean_excess_delay_ns: None,
            mpc_max_excess_delay_ns: None,
            mpc_decay_ns: None,
            mpc_first_tap_power: None,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses scenario text into a validated [`Scenario`].
pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let cfg: Config = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    cfg.into_scenario()
}

pub fn parse_scenario(path: &std::path::Path) -> Result<Scenario> {
    parse_scenario_str(&std::fs::read_to_string(path)?)
}

impl Config {
    pub fn into_scenario(self) -> Result<Scenario> {
        let n = self.anchors.len();
        if let Some(k) = self.n_responders {
            if k > MAX_RESPONDERS {
                return Err(Error::Validation(format!(
                    "n_responders = {k} exceeds the {MAX_RESPONDERS}-responder capacity of one CIR"
                )));
            }
            if k != n {
                return Err(Error::Validation(format!("n_responders = {k} but {n} anchors are listed")));
            }
        }
        if n > MAX_RESPONDERS {
            return Err(Error::Validation(format!(
                "{n} anchors exceed the {MAX_RESPONDERS}-responder capacity of one CIR"
            )));
        }
        let motion = match (self.initiator_positions, self.trajectory) {
            (Some(p), None) => Motion::Static(p),
            (None, Some(t)) => Motion::Trajectory(
                t.iter()
                    .map(|w| Waypoint {
                        point: Point::new(w[0], w[1]),
                        speed: w[2],
                    })
                    .collect(),
            ),
            (Some(_), Some(_)) => {
                return Err(Error::Validation("set either initiator_positions or trajectory, not both".into()));
            }
            (None, None) => {
                return Err(Error::Validation("one of initiator_positions or trajectory is required".into()));
            }
        };
        let clocks = match (self.clock_offsets_ppm, self.clock_offset_range_ppm) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation(
                    "set either clock_offsets_ppm or clock_offset_range_ppm, not both".into(),
                ));
            }
            (Some(v), None) => ClockSpec::Fixed(v),
            (None, Some(r)) if r >= 0.0 => ClockSpec::Uniform(r),
            (None, Some(_)) => return Err(Error::Validation("clock_offset_range_ppm must be non-negative".into())),
            (None, None) => ClockSpec::Uniform(8.0),
        };
        let mut schemes = Vec::new();
        for s in &self.schemes {
            let scheme = Scheme::parse(s).ok_or_else(|| Error::Validation(format!("unknown scheme {s:?}")))?;
            if !schemes.contains(&scheme) {
                schemes.push(scheme);
            }
        }
        let mut channel = ChannelParams::for_environment(self.environment);
        if let Some(v) = self.mpc_mean_taps {
            channel.mean_taps = v;
        }
        if let Some(v) = self.mpc_mean_excess_delay_ns {
            channel.mean_excess_delay_ns = v;
        }
        if let Some(v) = self.mpc_max_excess_delay_ns {
            channel.max_excess_delay_ns = v;
        }
        if let Some(v) = self.mpc_decay_ns {
            channel.decay_ns = v;
        }
        if let Some(v) = self.mpc_first_tap_power {
            channel.first_tap_power = v;
        }
        if !(channel.mean_taps >= 0.0 && channel.mean_excess_delay_ns > 0.0 && channel.max_excess_delay_ns > 0.0 && channel.decay_ns > 0.0 && channel.first_tap_power >= 0.0) {
            return Err(Error::Validation("multipath parameters must be positive".into()));
        }
        if !(self.pulse_bandwidth_mhz > 0.0 && (0.0..=1.0).contains(&self.pulse_rolloff)) {
            return Err(Error::Validation("pulse_bandwidth_mhz must be positive and pulse_rolloff in [0, 1]".into()));
        }
        let pulse = PulseShape::for_bandwidth(self.pulse_bandwidth_mhz, self.pulse_rolloff);
        if pulse.duration_ns() > 2.0 {
            return Err(Error::Validation(format!(
                "pulse half-power duration {:.2} ns exceeds 2 ns",
                pulse.duration_ns()
            )));
        }
        if self.noise_sigma < 0.0 || self.toa_jitter_ns < 0.0 || self.timestamp_jitter_ns < 0.0 || self.cfo_noise_ppm < 0.0 {
            return Err(Error::Validation("noise parameters must be non-negative".into()));
        }

        let mut scn = Scenario::new(self.anchors, motion).with_environment(self.environment);
        scn.channel = channel;
        scn.trials_per_position = self.trials_per_position;
        scn.seed = self.seed;
        scn.schemes = schemes;
        scn.compensation = self.compensation;
        scn.noise_sigma = self.noise_sigma;
        scn.toa_jitter_s = self.toa_jitter_ns / 1e9;
        scn.radio = RadioConfig {
            rx_antenna_delay_s: self.rx_antenna_delay_ns / 1e9,
            timestamp_jitter_s: self.timestamp_jitter_ns / 1e9,
            cfo_noise_ppm: self.cfo_noise_ppm,
        };
        scn.clocks = clocks;
        scn.trim_slope_ppm = self.trim_slope_ppm;
        scn.params = CrngParams {
            t_resp_s: self.t_resp_us / 1e6,
            t_id_s: self.t_id_ns / 1e9,
            t_det_default_s: self.t_det_default_us / 1e6,
            antenna_tx_delay_s: self.antenna_tx_delay_ns / 1e9,
            n_responders: n,
            t_det_jitter_s: self.t_det_jitter_ns / 1e9,
        };
        scn.sstwr_t_resp_s = self.sstwr_t_resp_us / 1e6;
        scn.phr_error_rate = self.phr_error_rate;
        scn.pulse = pulse;
        scn.proc = ProcParams {
            upsample_factor: self.upsample_factor,
            rearrange_threshold: self.rearrange_threshold,
            noise_window: self.noise_window,
            toa_threshold_multiplier: self.toa_threshold_multiplier,
            min_threshold: self.min_threshold,
            ss_iterations: self.ss_iterations,
            guard_offset: self.guard_offset,
        };
        scn.cal_offset_threshold_m = self.cal_offset_threshold_m;
        scn.cal_offset_ss_m = self.cal_offset_ss_m;
        scn.max_range_m = self.max_range_m;
        scn.outlier_threshold_m = self.outlier_threshold_m;
        scn.exchange_rate_hz = self.exchange_rate_hz;
        scn.nlls_tol = self.nlls_tol;
        scn.nlls_max_iter = self.nlls_max_iter;
        scn.validate()?;
        Ok(scn)
    }
}

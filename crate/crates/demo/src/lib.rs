//! Browser bindings for the crng pipeline.
//!
//! Every operation takes and returns JSON so the page stays plain
//! JavaScript. The `*_json` functions do the work and are usable natively;
//! the `#[wasm_bindgen]` wrappers only translate errors.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use crng::channel::Environment;
use crng::cirproc::{chunks, detection_threshold, ToaAlgorithm};
use crng::locate::{linear_init, nlls_solve_traced, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crng::protocol::{compensate_tx, crng_exchange, Compensation, CrngParams, ExchangeConditions, Node};
use crng::radio::{ClockModel, NodeClock, RadioConfig, DEFAULT_TRIM_SLOPE_PPM};
use crng::sim::{run_static, substream, ClockSpec, Motion, Scenario, Scheme};
use crng::Point;

/// Upsampled samples merged into one plotted point.
const PLOT_BIN: usize = 10;

fn default_anchors() -> Vec<Point> {
    [(0.0, 0.0), (3.2, 0.0), (6.4, 0.0), (6.4, 6.4), (3.2, 6.4), (0.0, 6.4)]
        .map(|(x, y)| Point::new(x, y))
        .to_vec()
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExchangeRequest {
    pub anchors: Vec<Point>,
    pub initiator: Point,
    pub environment: Environment,
    pub noise_sigma: f64,
    pub toa_jitter_ns: f64,
    pub compensation: Compensation,
    pub seed: u64,
}

impl Default for ExchangeRequest {
    fn default() -> Self {
        ExchangeRequest {
            anchors: default_anchors(),
            initiator: Point::new(3.2, 3.2),
            environment: Environment::Office,
            noise_sigma: 0.005,
            toa_jitter_ns: 0.25,
            compensation: Compensation::Full,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AlgorithmView {
    /// Per responder, ns from the start of the re-arranged CIR.
    pub toa_ns: Vec<Option<f64>>,
    pub distance_m: Vec<Option<f64>>,
    pub position: Option<[f64; 2]>,
}

#[derive(Debug, Serialize)]
pub struct ExchangeView {
    /// Max-pooled re-arranged amplitudes, one point per `bin_ns`.
    pub amplitudes: Vec<f64>,
    pub bin_ns: f64,
    pub raw_amplitudes: Vec<f64>,
    pub chunks_ns: Vec<[f64; 2]>,
    pub threshold: f64,
    pub true_distance_m: Vec<f64>,
    pub threshold_view: AlgorithmView,
    pub search_subtract_view: AlgorithmView,
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Simulates and processes one concurrent-ranging exchange.
pub fn simulate_exchange_json(request: &str) -> Result<String, String> {
    let req: ExchangeRequest = parse(request)?;
    let mut scn = Scenario::new(req.anchors.clone(), Motion::Static(vec![req.initiator])).with_environment(req.environment);
    scn.noise_sigma = req.noise_sigma;
    scn.toa_jitter_s = req.toa_jitter_ns * 1e-9;
    scn.compensation = req.compensation;
    scn.seed = req.seed;
    scn.phr_error_rate = 0.0;
    scn.schemes = vec![Scheme::CrngThreshold, Scheme::CrngSs];
    let out = run_static(&scn).map_err(|e| e.to_string())?;
    let record = out.records.first().ok_or("no exchange was simulated")?;
    let processor = scn.processor();
    let r = processor.rearranged(record).map_err(|e| e.to_string())?;
    let ns = r.sample_period_ns;

    let view = |scheme: Scheme, alg: ToaAlgorithm| -> Result<AlgorithmView, String> {
        let (_, toas) = processor.toas(record, alg).map_err(|e| e.to_string())?;
        let rows: Vec<_> = out.rows.iter().filter(|row| row.scheme == scheme).collect();
        let position = rows
            .first()
            .filter(|row| row.x_est.is_finite() && row.y_est.is_finite())
            .map(|row| [row.x_est, row.y_est]);
        Ok(AlgorithmView {
            toa_ns: toas.iter().map(|t| t.valid.then_some(t.toa_index_up * ns)).collect(),
            distance_m: rows.iter().map(|row| row.valid.then_some(row.d_est)).collect(),
            position,
        })
    };

    let result = ExchangeView {
        amplitudes: r.amplitudes.chunks(PLOT_BIN).map(|c| c.iter().copied().fold(0.0, f64::max)).collect(),
        bin_ns: ns * PLOT_BIN as f64,
        raw_amplitudes: record.cir.amplitudes(),
        chunks_ns: chunks(&r, scn.params.t_id_s, scn.params.n_responders, scn.proc.guard_offset)
            .into_iter()
            .map(|c| [c.start as f64 * ns, c.end as f64 * ns])
            .collect(),
        threshold: detection_threshold(&r, &scn.proc),
        true_distance_m: record.ground_truth.clone().unwrap_or_default(),
        threshold_view: view(Scheme::CrngThreshold, ToaAlgorithm::Threshold)?,
        search_subtract_view: view(Scheme::CrngSs, ToaAlgorithm::SearchSubtract)?,
    };
    to_json(&result)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationRequest {
    pub epsilon_ns: f64,
    pub t_det_default_us: f64,
    pub trim_slope_ppm: f64,
    pub clock_offset_range_ppm: f64,
    pub exchanges: usize,
    pub seed: u64,
}

impl Default for CompensationRequest {
    fn default() -> Self {
        CompensationRequest {
            epsilon_ns: -5.0,
            t_det_default_us: 560.0,
            trim_slope_ppm: DEFAULT_TRIM_SLOPE_PPM,
            clock_offset_range_ppm: 8.0,
            exchanges: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CompensationView {
    pub step: i32,
    pub t_det_us: f64,
    /// TX instant error of every response, ns, without and with compensation.
    pub tx_error_none_ns: Vec<f64>,
    pub tx_error_full_ns: Vec<f64>,
}

fn tx_errors(req: &CompensationRequest, compensation: Compensation) -> Result<Vec<f64>, String> {
    let mut rng = substream(req.seed, "demo-tx", 0, 0);
    let params = CrngParams {
        t_det_default_s: req.t_det_default_us * 1e-6,
        ..Default::default()
    };
    let mut scn = Scenario::new(default_anchors(), Motion::Static(vec![Point::new(3.2, 3.2)]));
    scn.clocks = ClockSpec::Uniform(req.clock_offset_range_ppm);
    scn.seed = req.seed;
    let offsets = scn.clock_offsets();
    let model = |ppm: f64| ClockModel::new(ppm).with_trim_slope(req.trim_slope_ppm);
    let initiator = Node {
        position: Point::new(3.2, 3.2),
        clock: NodeClock::new(model(offsets[0]), 0.0),
    };
    let mut responders: Vec<Node> = default_anchors()
        .into_iter()
        .zip(&offsets[1..])
        .map(|(p, &ppm)| Node {
            position: p,
            clock: NodeClock::new(model(ppm), 1.0e9),
        })
        .collect();
    let profiles = vec![crng::channel::MultipathProfile::direct_only(0.0); responders.len()];
    let cond = ExchangeConditions {
        radio: RadioConfig::ideal(),
        ..Default::default()
    };
    let mut errors = Vec::new();
    for k in 0..req.exchanges.min(2000) {
        let start = k as f64 / 8.0;
        let (_, trace) = crng_exchange(k as u64, &initiator, &mut responders, &profiles, &params, compensation, &cond, start, &mut rng)
            .map_err(|e| e.to_string())?;
        errors.extend(trace.responders.iter().filter_map(|t| t.tx_error_s()).map(|e| e * 1e9));
    }
    Ok(errors)
}

/// Detuning plan for one quantization error plus TX-error samples from a
/// run of exchanges with and without compensation.
pub fn compensation_json(request: &str) -> Result<String, String> {
    let req: CompensationRequest = parse(request)?;
    let valid = req.trim_slope_ppm < 0.0 && req.t_det_default_us > 0.0;
    if !valid {
        return Err("trim slope must be negative and the detuning window positive".into());
    }
    let (step, t_det) = compensate_tx(req.epsilon_ns * 1e-9, req.t_det_default_us * 1e-6, req.trim_slope_ppm);
    to_json(&CompensationView {
        step,
        t_det_us: t_det * 1e6,
        tx_error_none_ns: tx_errors(&req, Compensation::None)?,
        tx_error_full_ns: tx_errors(&req, Compensation::Full)?,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocateRequest {
    pub anchors: Vec<Point>,
    pub distances: Vec<f64>,
    /// Cost-surface resolution per axis; 0 skips the surface.
    #[serde(default)]
    pub grid: usize,
}

#[derive(Debug, Serialize)]
pub struct LocateView {
    pub initial: [f64; 2],
    pub position: [f64; 2],
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cost_history: Vec<f64>,
    /// Row-major cost surface over `bounds` (`[x0, y0, x1, y1]`).
    pub surface: Vec<f64>,
    pub bounds: [f64; 4],
}

/// Linear initial guess refined by Levenberg-Marquardt.
pub fn locate_json(request: &str) -> Result<String, String> {
    let req: LocateRequest = parse(request)?;
    let init = linear_init(&req.anchors, &req.distances).map_err(|e| e.to_string())?;
    let (est, history) =
        nlls_solve_traced(&req.anchors, &req.distances, init, DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(|e| e.to_string())?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in req.anchors.iter().chain([&est.position]) {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let pad = 0.1 * (x1 - x0).max(y1 - y0).max(1.0);
    let bounds = [x0 - pad, y0 - pad, x1 + pad, y1 + pad];
    let n = req.grid.min(200);
    let mut surface = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let p = Point::new(
                bounds[0] + (bounds[2] - bounds[0]) * (i as f64 + 0.5) / n as f64,
                bounds[1] + (bounds[3] - bounds[1]) * (j as f64 + 0.5) / n as f64,
            );
            surface.push(req.anchors.iter().zip(&req.distances).map(|(a, d)| (a.distance(p) - d).powi(2)).sum());
        }
    }
    to_json(&LocateView {
        initial: init.into(),
        position: est.position.into(),
        residual_norm: est.residual_norm,
        iterations: est.iterations,
        converged: est.converged,
        cost_history: history,
        surface,
        bounds,
    })
}

#[wasm_bindgen(js_name = simulateExchange)]
pub fn simulate_exchange(request: &str) -> Result<String, JsError> {
    simulate_exchange_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = compensation)]
pub fn compensation(request: &str) -> Result<String, JsError> {
    compensation_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = locate)]
pub fn locate(request: &str) -> Result<String, JsError> {
    locate_json(request).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn exchange_view_has_six_responders() {
        let v: Value = serde_json::from_str(&simulate_exchange_json("{}").unwrap()).unwrap();
        assert_eq!(v["chunks_ns"].as_array().unwrap().len(), 6);
        assert_eq!(v["raw_amplitudes"].as_array().unwrap().len(), 1016);
        let truth = v["true_distance_m"].as_array().unwrap();
        let est = v["threshold_view"]["distance_m"].as_array().unwrap();
        for (t, e) in truth.iter().zip(est) {
            if let Some(e) = e.as_f64() {
                assert!((e - t.as_f64().unwrap()).abs() < 1.0);
            }
        }
        assert!(v["search_subtract_view"]["position"].is_array());
    }

    #[test]
    fn exchange_rejects_unknown_fields() {
        assert!(simulate_exchange_json(r#"{"colour": 1}"#).unwrap_err().contains("bad request"));
    }

    #[test]
    fn compensation_matches_worked_example() {
        let req = r#"{"epsilon_ns": -5.0, "t_det_default_us": 400.0, "exchanges": 20}"#;
        let v: Value = serde_json::from_str(&compensation_json(req).unwrap()).unwrap();
        assert_eq!(v["step"], 8);
        assert!((v["t_det_us"].as_f64().unwrap() - 422.3).abs() < 0.05);
        let worst = |key: &str| v[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().abs()).fold(0.0, f64::max);
        assert!(worst("tx_error_full_ns") < 0.1);
        assert!(worst("tx_error_none_ns") > 1.0);
    }

    #[test]
    fn locate_recovers_exact_position() {
        let target = Point::new(2.0, 4.5);
        let anchors = default_anchors();
        let d: Vec<f64> = anchors.iter().map(|a| a.distance(target)).collect();
        let req = serde_json::json!({ "anchors": anchors, "distances": d, "grid": 20 }).to_string();
        let v: Value = serde_json::from_str(&locate_json(&req).unwrap()).unwrap();
        let p = v["position"].as_array().unwrap();
        assert!((p[0].as_f64().unwrap() - 2.0).abs() < 1e-6);
        assert!((p[1].as_f64().unwrap() - 4.5).abs() < 1e-6);
        assert_eq!(v["surface"].as_array().unwrap().len(), 400);
    }

    #[test]
    fn locate_reports_degenerate_geometry() {
        let req = r#"{"anchors": [[0,0],[1,0],[2,0]], "distances": [1,1,1]}"#;
        assert!(locate_json(req).is_err());
    }
}

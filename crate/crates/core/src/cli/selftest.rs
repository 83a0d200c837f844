//! Analytic checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::geometry::Point;
use crate::locate::{jacobian, residuals};
use crate::protocol::{cfo_adjust, compensate_tx, sstwr};
use crate::radio::{quantize_tx, ClockModel, RadioConfig, RadioTimestamp, TICK_S, TIMESTAMP_MODULUS, TX_QUANTUM_TICKS};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all() -> Vec<CheckResult> {
    vec![quantization(), compensation(), sstwr_drift(), jacobian_fd()]
}

/// Quantization error is uniform on (−512, 0] ticks and bounded by 8.02 ns.
pub fn quantization() -> CheckResult {
    const N: usize = 1_000_000;
    const BINS: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(0x51a7);
    let mut counts = [0u64; BINS];
    let mut max_abs = 0.0f64;
    let mut in_range = true;
    for _ in 0..N {
        let d = RadioTimestamp::from_ticks(rng.random_range(0..TIMESTAMP_MODULUS));
        let eps = quantize_tx(d).ticks() as i64 - d.ticks() as i64;
        in_range &= eps <= 0 && eps > -(TX_QUANTUM_TICKS as i64);
        max_abs = max_abs.max(eps.unsigned_abs() as f64 * TICK_S);
        counts[(-eps) as usize * BINS / TX_QUANTUM_TICKS as usize] += 1;
    }
    let expected = N as f64 / BINS as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((BINS - 1) as f64).expect("dof").cdf(chi2);
    CheckResult {
        name: "tx quantization uniformity",
        passed: in_range && p > 0.01 && max_abs < 8.02e-9,
        detail: format!("chi2={chi2:.1} p={p:.3} max|eps|={:.4} ns", max_abs * 1e9),
    }
}

pub fn compensation() -> CheckResult {
    let (step, t_det) = compensate_tx(-5e-9, 400e-6, -1.48);
    let adj = cfo_adjust(3.0, -1.48);
    CheckResult {
        name: "tx compensation example",
        passed: step == 8 && (t_det * 1e6 - 422.3).abs() <= 0.05 && adj == -2,
        detail: format!("step={step} t_det={:.3} us cfo_adjust(+3)={adj}", t_det * 1e6),
    }
}

/// SS-TWR bias follows ½·T_RESP·Δe·c and vanishes with drift compensation.
pub fn sstwr_drift() -> CheckResult {
    let c = crate::channel::SPEED_OF_LIGHT;
    let mut rng = ChaCha8Rng::seed_from_u64(0xd41f7);
    let radio = RadioConfig::ideal();
    let (a, b) = (Point::new(0.0, 0.0), Point::new(5.0, 0.0));
    let mut worst_rel = 0.0f64;
    let mut worst_comp = 0.0f64;
    let mut ok = true;
    for t_resp in [320e-6, 800e-6] {
        for de in (-20..=20).step_by(5) {
            let de = f64::from(de);
            let ei = ClockModel::new(de / 2.0);
            let er = ClockModel::new(-de / 2.0);
            let reps = 8;
            let (mut raw, mut comp) = (0.0, 0.0);
            for _ in 0..reps {
                raw += sstwr((&ei, a), (&er, b), t_resp, false, &radio, &mut rng).unwrap_or(f64::NAN) - 5.0;
                comp += sstwr((&ei, a), (&er, b), t_resp, true, &radio, &mut rng).unwrap_or(f64::NAN) - 5.0;
            }
            let (raw, comp) = (raw / reps as f64, comp / reps as f64);
            let predicted = 0.5 * t_resp * de * 1e-6 * c;
            if de != 0.0 {
                let rel = ((raw - predicted) / predicted).abs();
                worst_rel = worst_rel.max(rel);
                ok &= rel <= 0.05;
            } else {
                ok &= raw.abs() < 0.02;
            }
            worst_comp = worst_comp.max(comp.abs());
            ok &= comp.abs() < 0.02;
        }
    }
    CheckResult {
        name: "ss-twr drift law",
        passed: ok,
        detail: format!("max rel err={:.2}% max compensated bias={:.2} cm", worst_rel * 100.0, worst_comp * 100.0),
    }
}

pub fn jacobian_fd() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ac0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..=6);
        let anchors: Vec<Point> = (0..n).map(|_| Point::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
        let p = Point::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let j = jacobian(&anchors, p);
        let h = 1e-6;
        for (axis, step) in [Point::new(h, 0.0), Point::new(0.0, h)].into_iter().enumerate() {
            let plus = residuals(&anchors, &d, p + step);
            let minus = residuals(&anchors, &d, p - step);
            for i in 0..n {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                let rel = (j[i][axis] - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    CheckResult {
        name: "jacobian vs finite differences",
        passed: worst < 1e-4,
        detail: format!("max rel err={worst:.2e}"),
    }
}

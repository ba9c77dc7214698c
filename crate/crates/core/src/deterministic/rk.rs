//! Adaptive embedded Runge–Kutta 5(4) integration (Dormand–Prince
//! coefficients) for the truncated coagulation right-hand sides. Step size is
//! controlled by the usual mixed absolute/relative error norm; steps are
//! clipped so the integrator lands exactly on requested sample times.

use super::SolveError;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// 5th-order weights (identical to the last A row: first-same-as-last pair).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Embedded 4th-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Step-count bookkeeping surfaced in trajectory metadata.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
}

pub struct Integrator {
    pub atol: f64,
    pub rtol: f64,
    /// Suggested size for the next step; persists across `integrate_to` calls
    /// so sample boundaries do not reset the adaptation.
    h_next: f64,
}

impl Integrator {
    pub fn new(atol: f64, rtol: f64) -> Self {
        Self { atol, rtol, h_next: 0.0 }
    }

    /// Advance `y` from `t0` to `t1` (`t1 > t0`), calling
    /// `rhs(y, dy)` for derivatives.
    pub fn integrate_to<F>(
        &mut self,
        y: &mut [f64],
        t0: f64,
        t1: f64,
        mut rhs: F,
        stats: &mut StepStats,
    ) -> Result<(), SolveError>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let dim = y.len();
        let mut t = t0;
        let mut k = vec![vec![0.0; dim]; 7];
        let mut y_stage = vec![0.0; dim];
        let mut y_new = vec![0.0; dim];
        if self.h_next <= 0.0 {
            self.h_next = (t1 - t0) * 1e-4;
        }
        let mut h = self.h_next.min(t1 - t0);

        while t < t1 {
            h = h.min(t1 - t);
            if h < f64::EPSILON * t.abs().max(1.0) {
                return Err(SolveError::StepUnderflow { t });
            }
            for stage in 0..7 {
                for i in 0..dim {
                    let mut acc = y[i];
                    for (s, ks) in k.iter().enumerate().take(stage) {
                        let a = A[stage][s];
                        if a != 0.0 {
                            acc += h * a * ks[i];
                        }
                    }
                    y_stage[i] = acc;
                }
                let _ = C[stage]; // autonomous right-hand sides; time unused
                let (head, tail) = k.split_at_mut(stage);
                let _ = head;
                rhs(&y_stage, &mut tail[0]);
            }
            let mut err_sq = 0.0;
            for i in 0..dim {
                let mut y5 = y[i];
                let mut e = 0.0;
                for s in 0..7 {
                    y5 += h * B5[s] * k[s][i];
                    e += h * (B5[s] - B4[s]) * k[s][i];
                }
                y_new[i] = y5;
                let scale = self.atol + self.rtol * y[i].abs().max(y5.abs());
                err_sq += (e / scale) * (e / scale);
            }
            let err = (err_sq / dim as f64).sqrt();
            if !err.is_finite() {
                return Err(SolveError::NonFinite { t });
            }
            if err <= 1.0 {
                t += h;
                y.copy_from_slice(&y_new);
                stats.accepted += 1;
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h *= factor;
                self.h_next = h;
            } else {
                stats.rejected += 1;
                h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_integrated_to_tolerance() {
        let mut integ = Integrator::new(1e-12, 1e-10);
        let mut y = vec![1.0];
        let mut stats = StepStats::default();
        integ.integrate_to(&mut y, 0.0, 2.0, |y, dy| dy[0] = -3.0 * y[0], &mut stats)
            .unwrap();
        let exact = (-6.0f64).exp();
        assert!((y[0] - exact).abs() < 1e-10, "got {} want {}", y[0], exact);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn logistic_quadratic_rhs_matches_closed_form() {
        // y' = y² blows up at t = 1/y0; integrate safely short of it.
        let mut integ = Integrator::new(1e-12, 1e-10);
        let mut y = vec![1.0];
        let mut stats = StepStats::default();
        integ.integrate_to(&mut y, 0.0, 0.9, |y, dy| dy[0] = y[0] * y[0], &mut stats)
            .unwrap();
        assert!((y[0] - 10.0).abs() < 1e-7, "got {}", y[0]);
    }

    #[test]
    fn sample_boundaries_do_not_change_the_result_beyond_tolerance() {
        let run = |breaks: &[f64]| {
            let mut integ = Integrator::new(1e-13, 1e-11);
            let mut y = vec![1.0, 0.5];
            let mut stats = StepStats::default();
            let mut t = 0.0;
            for &tb in breaks {
                integ.integrate_to(
                    &mut y,
                    t,
                    tb,
                    |y, dy| {
                        dy[0] = -y[0] * y[1];
                        dy[1] = y[0] * y[0] - y[1];
                    },
                    &mut stats,
                )
                .unwrap();
                t = tb;
            }
            y
        };
        let once = run(&[2.0]);
        let split = run(&[0.3, 0.9, 1.1, 2.0]);
        for i in 0..2 {
            assert!((once[i] - split[i]).abs() < 1e-9);
        }
    }
}

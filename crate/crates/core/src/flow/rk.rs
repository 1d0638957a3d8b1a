//! Dormand–Prince 5(4) for autonomous systems, with first-same-as-last stages
//! and sign-change event location by re-stepping.

use super::FlowError;

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
pub(crate) const H_MIN: f64 = 1e-14;

pub(crate) enum Control {
    Continue,
    Stop,
}

pub(crate) enum RunEnd {
    Stopped,
    Event { y: Vec<f64> },
    TimedOut { t: f64 },
}

pub(crate) struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub t_max: f64,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Dopri5 {
    pub fn new(n: usize, rtol: f64, atol: f64, t_max: f64) -> Self {
        Self { rtol, atol, t_max, k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }

    /// One step of size `h` from `(y, f0)`; writes the result into `y_out`, the
    /// derivative there into `f_out`, and returns the scaled error norm.
    fn step<R>(&mut self, rhs: &mut R, y: &[f64], f0: &[f64], h: f64, y_out: &mut [f64], f_out: &mut [f64]) -> Result<f64, FlowError>
    where
        R: FnMut(&[f64], &mut [f64]) -> Result<(), FlowError>,
    {
        let n = y.len();
        self.k[0].copy_from_slice(f0);
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * self.k[j][i];
                }
                self.tmp[i] = y[i] + h * acc;
            }
            rhs(&self.tmp, &mut self.k[s])?;
        }
        // the seventh stage point is the fifth-order solution
        y_out.copy_from_slice(&self.tmp);
        f_out.copy_from_slice(&self.k[6]);
        let mut sum = 0.0;
        for i in 0..n {
            let mut err = 0.0;
            for s in 0..7 {
                err += E[s] * self.k[s][i];
            }
            let sc = self.atol + self.rtol * y[i].abs().max(y_out[i].abs());
            sum += (h * err / sc).powi(2);
        }
        Ok((sum / n as f64).sqrt())
    }

    fn initial_step(&self, y: &[f64], f: &[f64]) -> f64 {
        let n = y.len() as f64;
        let scaled = |v: &[f64]| {
            (v.iter().zip(y).map(|(a, b)| (a / (self.atol + self.rtol * b.abs())).powi(2)).sum::<f64>() / n).sqrt()
        };
        let (d0, d1) = (scaled(y), scaled(f));
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(self.t_max)
    }

    /// Integrates from `y0` until `observe` stops, `event` changes sign from
    /// negative to non-negative, or `t_max` is reached.
    pub fn run<R, O>(
        &mut self,
        y0: &[f64],
        mut rhs: R,
        normalize: &dyn Fn(&mut [f64]),
        event: Option<&dyn Fn(&[f64]) -> f64>,
        mut observe: O,
    ) -> Result<RunEnd, FlowError>
    where
        R: FnMut(&[f64], &mut [f64]) -> Result<(), FlowError>,
        O: FnMut(f64, &[f64], &[f64]) -> Result<Control, FlowError>,
    {
        let n = y0.len();
        let mut y = y0.to_vec();
        let mut f = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut f_new = vec![0.0; n];
        rhs(&y, &mut f)?;
        let mut t = 0.0;
        if let Control::Stop = observe(t, &y, &f)? {
            return Ok(RunEnd::Stopped);
        }
        let mut g_prev = event.map(|e| e(&y));
        let mut h = self.initial_step(&y, &f);
        loop {
            if t >= self.t_max {
                return Ok(RunEnd::TimedOut { t });
            }
            let h_try = h.min(self.t_max - t);
            // a stage that cannot be evaluated (overflow far from the
            // trajectory) counts as a rejected step
            let err = match self.step(&mut rhs, &y, &f, h_try, &mut y_new, &mut f_new) {
                Ok(err) => err,
                Err(e) if h_try * MIN_FACTOR < H_MIN => return Err(e),
                Err(_) => f64::INFINITY,
            };
            if !(err <= 1.0) {
                let factor = if err.is_finite() { (SAFETY * err.powf(-0.2)).max(MIN_FACTOR) } else { MIN_FACTOR };
                h = h_try * factor;
                if h < H_MIN {
                    return Err(FlowError::StepUnderflow { t, point: y, step: h });
                }
                continue;
            }
            let factor = if err == 0.0 { MAX_FACTOR } else { (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
            if let (Some(e), Some(gp)) = (event, g_prev) {
                let g_new = e(&y_new);
                if gp < 0.0 && g_new >= 0.0 {
                    let y = self.locate(&mut rhs, e, &y, &f, t, h_try)?;
                    return Ok(RunEnd::Event { y });
                }
                g_prev = Some(g_new);
            }
            t += h_try;
            normalize(&mut y_new);
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut f, &mut f_new);
            if let Control::Stop = observe(t, &y, &f)? {
                return Ok(RunEnd::Stopped);
            }
            h = h_try * factor;
        }
    }

    /// Bisects the step fraction at which `event` first becomes non-negative.
    fn locate<R>(&mut self, rhs: &mut R, event: &dyn Fn(&[f64]) -> f64, y: &[f64], f: &[f64], t: f64, h: f64) -> Result<Vec<f64>, FlowError>
    where
        R: FnMut(&[f64], &mut [f64]) -> Result<(), FlowError>,
    {
        let n = y.len();
        let mut out = vec![0.0; n];
        let mut f_out = vec![0.0; n];
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut y_hi = vec![0.0; n];
        self.step(rhs, y, f, h, &mut y_hi, &mut f_out)?;
        while (hi - lo) * h > 1e-13 * t.max(1.0) {
            let mid = 0.5 * (lo + hi);
            self.step(rhs, y, f, mid * h, &mut out, &mut f_out)?;
            if event(&out) >= 0.0 {
                hi = mid;
                y_hi.copy_from_slice(&out);
            } else {
                lo = mid;
            }
        }
        Ok(y_hi)
    }
}

//! Composite Gauss–Legendre integration on finite and half-infinite ranges.

use std::sync::OnceLock;

const ORDER: usize = 16;

/// Nodes and weights on [-1, 1], found by Newton iteration on `P_ORDER`.
fn rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = ORDER;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
        }
        out
    })
}

/// Adds `∫_a^b f` componentwise into `acc`.
fn panel<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, acc: &mut [f64], buf: &mut [f64]) {
    let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
    for &(x, w) in rule() {
        f(mid + half * x, buf);
        for (s, v) in acc.iter_mut().zip(buf.iter()) {
            *s += w * half * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadError {
    /// The integrand did not decay where it should have, or was not finite.
    Divergent { at: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    /// Panel width in units of the supplied scale.
    pub panel: f64,
    /// Stop once this many consecutive panels each add less than `rel_tol`
    /// of the running total.
    pub quiet_panels: usize,
    pub rel_tol: f64,
    /// Give up (divergence) past this many scales from the lower limit.
    pub max_scales: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            panel: 0.25,
            quiet_panels: 8,
            rel_tol: 1e-17,
            max_scales: 2000.0,
        }
    }
}

/// Vector-valued `∫_lo^hi f(z) dz` (`hi = None` for `+∞`). On infinite ranges
/// every component must go quiet before the integration stops.
pub fn integrate_vec<F: FnMut(f64, &mut [f64])>(
    mut f: F,
    dim: usize,
    lo: f64,
    hi: Option<f64>,
    scale: f64,
    cfg: &QuadConfig,
) -> Result<Vec<f64>, QuadError> {
    let mut total = vec![0.0; dim];
    let mut piece = vec![0.0; dim];
    let mut buf = vec![0.0; dim];
    let width = cfg.panel * scale;
    if let Some(hi) = hi {
        let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
        let w = (hi - lo) / panels as f64;
        for k in 0..panels {
            panel(&mut f, lo + k as f64 * w, lo + (k + 1) as f64 * w, &mut total, &mut buf);
        }
        if total.iter().any(|v| !v.is_finite()) {
            return Err(QuadError::Divergent { at: hi });
        }
        return Ok(total);
    }
    let mut quiet = 0;
    let mut k = 0usize;
    loop {
        let (a, b) = (lo + k as f64 * width, lo + (k + 1) as f64 * width);
        piece.iter_mut().for_each(|p| *p = 0.0);
        panel(&mut f, a, b, &mut piece, &mut buf);
        if piece.iter().any(|v| !v.is_finite()) {
            return Err(QuadError::Divergent { at: b });
        }
        for (t, p) in total.iter_mut().zip(&piece) {
            *t += p;
        }
        let small = piece
            .iter()
            .zip(&total)
            .all(|(p, t)| p.abs() <= cfg.rel_tol * t.abs() || *t == 0.0 && *p == 0.0);
        quiet = if small { quiet + 1 } else { 0 };
        if quiet >= cfg.quiet_panels {
            return Ok(total);
        }
        k += 1;
        if (b - lo) > cfg.max_scales * scale {
            return Err(QuadError::Divergent { at: b });
        }
    }
}

pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: Option<f64>,
    scale: f64,
    cfg: &QuadConfig,
) -> Result<f64, QuadError> {
    integrate_vec(|z, out| out[0] = f(z), 1, lo, hi, scale, cfg).map(|v| v[0])
}

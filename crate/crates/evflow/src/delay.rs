//! Link and station delay functions.
//!
//! The congestion model uses BPR (Bureau of Public Roads) delay laws
//! `fft * (1 + a * (x / cap)^b)` together with their closed form integrals,
//! which appear in the Beckmann style potential. Parameters are calibrated
//! from queue simulator samples by nonlinear least squares.

use serde::{Deserialize, Serialize};

use crate::network::{Network, Node, VehType};
use crate::queuesim::{run_logged, RoutePlan, Scenario, VehiclePlan};
use crate::{Error, Result};

/// Lower clamp for the BPR coefficient `a` during fitting. Zero-congestion
/// data drives `a` toward 0, which log-space iterates cannot reach.
pub const A_MIN: f64 = 1e-6;
/// Exponent bounds during fitting; keeps noisy links well conditioned.
pub const B_MIN: f64 = 1.0;
pub const B_MAX: f64 = 12.0;

/// BPR parameters: delay(x) = fft * (1 + a * (x / cap)^b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayParams {
    /// Free-flow time, seconds.
    pub fft: f64,
    /// Practical capacity, vehicles per hour.
    pub cap: f64,
    pub a: f64,
    pub b: f64,
}

impl DelayParams {
    pub fn new(fft: f64, cap: f64, a: f64, b: f64) -> Result<Self> {
        if !(fft > 0.0 && cap > 0.0 && a > 0.0 && b > 0.0) {
            return Err(Error::validation(format!(
                "BPR params must be positive: fft={fft}, cap={cap}, a={a}, b={b}"
            )));
        }
        Ok(Self { fft, cap, a, b })
    }
}

/// delay(x) in seconds.
pub fn bpr_delay(p: &DelayParams, x: f64) -> f64 {
    assert!(x >= 0.0, "negative flow {x}");
    p.fft * (1.0 + p.a * (x / p.cap).powf(p.b))
}

/// Exact closed form of `int_0^x delay(s) ds`.
pub fn bpr_integral(p: &DelayParams, x: f64) -> f64 {
    assert!(x >= 0.0, "negative flow {x}");
    p.fft * x + p.fft * p.a * x * (x / p.cap).powf(p.b) / (p.b + 1.0)
}

/// Delay law attached to a link or charging station in the congestion game.
///
/// BPR covers calibrated road links. Affine covers constant and linear
/// station service laws and the textbook test networks, which BPR cannot
/// express (its invariants require fft > 0 and a > 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayFn {
    Bpr(DelayParams),
    Affine { base: f64, slope: f64 },
}

impl DelayFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            DelayFn::Bpr(p) => bpr_delay(p, x),
            DelayFn::Affine { base, slope } => {
                assert!(x >= 0.0, "negative flow {x}");
                base + slope * x
            }
        }
    }

    pub fn integral(&self, x: f64) -> f64 {
        match self {
            DelayFn::Bpr(p) => bpr_integral(p, x),
            DelayFn::Affine { base, slope } => {
                assert!(x >= 0.0, "negative flow {x}");
                base * x + 0.5 * slope * x * x
            }
        }
    }

    pub fn constant(delay: f64) -> Self {
        DelayFn::Affine { base: delay, slope: 0.0 }
    }
}

/// One calibration observation: aggregate flow and mean experienced delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    /// Vehicles per hour.
    pub flow: f64,
    /// Seconds.
    pub mean_delay: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: DelayParams,
    pub r_squared: f64,
    pub residual_norm: f64,
    /// False when the iteration cap was hit; params are then best-so-far.
    pub converged: bool,
}

/// Residuals and Jacobian in log-parameter space u = ln(fft, cap, a, b).
fn residuals_jacobian(
    samples: &[LinkSample],
    p: &DelayParams,
    jac: &mut [[f64; 4]],
    res: &mut [f64],
) -> f64 {
    let mut cost = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let rho = s.flow / p.cap;
        let rb = if s.flow == 0.0 { 0.0 } else { rho.powf(p.b) };
        let d = p.fft * (1.0 + p.a * rb);
        let r = d - s.mean_delay;
        res[i] = r;
        cost += r * r;
        let farb = p.fft * p.a * rb;
        jac[i][0] = d;
        jac[i][1] = -p.b * farb;
        jac[i][2] = farb;
        jac[i][3] = if s.flow == 0.0 { 0.0 } else { p.b * farb * rho.ln() };
    }
    0.5 * cost
}

fn clamp_params(u: &mut [f64; 4]) {
    u[2] = u[2].max(A_MIN.ln());
    u[3] = u[3].clamp(B_MIN.ln(), B_MAX.ln());
}

fn params_from_log(u: &[f64; 4]) -> DelayParams {
    DelayParams { fft: u[0].exp(), cap: u[1].exp(), a: u[2].exp(), b: u[3].exp() }
}

/// Nonlinear least-squares BPR fit (Levenberg-Marquardt in log space).
///
/// Log parameterization enforces positivity without explicit constraints.
/// Needs at least 4 samples spanning at least 2 distinct flow values.
///
/// `a` trades off exactly against `cap` (only a/cap^b enters the model), so
/// it is held at its initial value (default 0.15) and the fit calibrates
/// fft, cap and b. Constant-delay data sits on the a -> 0 boundary instead.
pub fn fit_bpr(samples: &[LinkSample], init: Option<DelayParams>) -> Result<FitReport> {
    if samples.len() < 4 {
        return Err(Error::validation(format!(
            "insufficient samples: need at least 4, got {}",
            samples.len()
        )));
    }
    let mut flows: Vec<f64> = samples.iter().map(|s| s.flow).collect();
    flows.sort_by(|a, b| a.total_cmp(b));
    flows.dedup();
    if flows.len() < 2 {
        return Err(Error::validation("insufficient samples: all flows identical"));
    }
    for s in samples {
        if s.flow < 0.0 || !(s.mean_delay > 0.0) {
            return Err(Error::validation(format!(
                "bad sample: flow={}, mean_delay={}",
                s.flow, s.mean_delay
            )));
        }
    }

    let start = init.unwrap_or_else(|| {
        let fft0 = samples.iter().map(|s| s.mean_delay).fold(f64::INFINITY, f64::min);
        let cap0 = samples.iter().map(|s| s.flow).fold(0.0, f64::max).max(1e-6);
        DelayParams { fft: fft0, cap: cap0, a: 0.15, b: 4.0 }
    });
    let mut u = [start.fft.ln(), start.cap.ln(), start.a.max(A_MIN).ln(), start.b.ln()];
    clamp_params(&mut u);

    let n = samples.len();
    let dmin = samples.iter().map(|s| s.mean_delay).fold(f64::INFINITY, f64::min);
    let dmax = samples.iter().map(|s| s.mean_delay).fold(0.0f64, f64::max);
    if dmax - dmin <= 1e-9 * dmax {
        // Constant delay carries no congestion signal; the least-squares
        // optimum sits on the a -> 0 boundary.
        let mean = samples.iter().map(|s| s.mean_delay).sum::<f64>() / n as f64;
        let p = DelayParams { fft: mean, cap: u[1].exp(), a: A_MIN, b: u[3].exp() };
        let ss_res: f64 = samples.iter().map(|s| (bpr_delay(&p, s.flow) - s.mean_delay).powi(2)).sum();
        return Ok(FitReport {
            params: p,
            r_squared: 1.0 - ss_res,
            residual_norm: ss_res.sqrt(),
            converged: true,
        });
    }

    let mut jac = vec![[0.0f64; 4]; n];
    let mut res = vec![0.0f64; n];
    let mut p = params_from_log(&u);
    let mut cost = residuals_jacobian(samples, &p, &mut jac, &mut res);

    let mut lambda = 1e-3;
    let mut converged = false;
    const MAX_ITERS: usize = 400;
    for _ in 0..MAX_ITERS {
        // normal equations (J^T J + lambda diag(J^T J)) dU = -J^T r
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for i in 0..n {
            for k in 0..4 {
                if k == 2 {
                    continue; // a stays at its initial value
                }
                jtr[k] += jac[i][k] * res[i];
                for m in 0..4 {
                    if m == 2 {
                        continue;
                    }
                    jtj[(k, m)] += jac[i][k] * jac[i][m];
                }
            }
        }
        let grad_norm = jtr.amax();
        if grad_norm < 1e-12 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut damped = jtj;
        for k in 0..4 {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
        }
        damped[(2, 2)] = 1.0;
        let step = match damped.lu().solve(&(-jtr)) {
            Some(s) => s,
            None => {
                lambda *= 10.0;
                continue;
            }
        };
        let mut u_new = u;
        for k in 0..4 {
            u_new[k] += step[k];
        }
        clamp_params(&mut u_new);
        let p_new = params_from_log(&u_new);
        let mut res_new = vec![0.0f64; n];
        let mut jac_new = vec![[0.0f64; 4]; n];
        let cost_new = residuals_jacobian(samples, &p_new, &mut jac_new, &mut res_new);
        if cost_new < cost {
            let rel = (cost - cost_new) / cost.max(1e-300);
            u = u_new;
            p = p_new;
            res = res_new;
            jac = jac_new;
            cost = cost_new;
            lambda = (lambda / 3.0).max(1e-12);
            if rel < 1e-14 {
                converged = true;
                break;
            }
        } else {
            lambda *= 3.0;
            if lambda > 1e12 {
                converged = true; // stuck in a basin; treat as local minimum
                break;
            }
        }
    }

    let ss_res: f64 = res.iter().map(|r| r * r).sum();
    let mean = samples.iter().map(|s| s.mean_delay).sum::<f64>() / n as f64;
    let ss_tot: f64 = samples.iter().map(|s| (s.mean_delay - mean).powi(2)).sum();
    // Flat data has no variance to explain; report 1 - ss_res so a perfect
    // constant fit still scores 1 and the invariant r2 <= 1 holds.
    let r_squared = if ss_tot > 1e-12 { 1.0 - ss_res / ss_tot } else { 1.0 - ss_res };

    Ok(FitReport { params: p, r_squared, residual_norm: ss_res.sqrt(), converged })
}

/// Simulate one physical link in isolation across a range of injection
/// rates and measure the mean experienced delay at each.
///
/// Vehicles enter uniformly spaced at 3600/flow seconds. The first 20% of
/// the horizon is warm-up; a sample records the realized flow and mean
/// delay of traversals entering afterwards. Gridlocked or empty runs are
/// excluded; a level with no valid run yields no sample.
pub fn generate_link_samples(
    scenario: &Scenario,
    link: usize,
    flow_levels: &[f64],
    seeds: &[u64],
) -> Result<Vec<LinkSample>> {
    use rayon::prelude::*;

    if seeds.is_empty() {
        return Err(Error::validation("generate_link_samples needs at least one seed"));
    }
    if link >= scenario.net.links.len() {
        return Err(Error::validation(format!("link index {link} out of range")));
    }
    if flow_levels.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::validation("flow levels must be strictly positive"));
    }
    let src = &scenario.net.links[link];
    let nodes = vec![
        Node { id: "a".into(), x: None, y: None },
        Node { id: "b".into(), x: None, y: None },
    ];
    let mini_net = Network::new(
        nodes,
        vec![(
            src.id.clone(),
            "a".into(),
            "b".into(),
            src.length_m,
            src.lanes,
            src.fft_s,
            Some(src.cap_vph),
            false,
        )],
        vec![],
    )?;
    let mini = Scenario::new(mini_net, vec![], scenario.horizon_s)?;
    let steps = mini.steps();
    let warmup = steps / 5;
    let dt = mini.dt_s as f64;
    let catalog = [RoutePlan { od: 0, vtype: VehType::F1, links: vec![0], station: None }];

    let mut out = Vec::new();
    for &phi in flow_levels {
        let n = (scenario.horizon_s as f64 * phi / 3600.0).floor() as usize;
        if n == 0 {
            continue;
        }
        let vehicles: Vec<VehiclePlan> = (0..n)
            .map(|k| VehiclePlan {
                id: k,
                route: 0,
                depart_s: (k as f64 * 3600.0 / phi) as u32,
                initial_charge: None,
            })
            .collect();
        let runs: Vec<Result<Option<(f64, f64)>>> = seeds
            .par_iter()
            .map(|&seed| {
                let (res, log) = run_logged(&mini, &catalog, &vehicles, seed)?;
                if res.gridlocked {
                    return Ok(None);
                }
                let window: Vec<f64> = log[0]
                    .iter()
                    .filter(|&&(entered, _)| entered >= warmup)
                    .map(|&(entered, left)| (left - entered) as f64 * dt)
                    .collect();
                if window.is_empty() {
                    return Ok(None);
                }
                let hours = (steps - warmup) as f64 * dt / 3600.0;
                let realized = window.len() as f64 / hours;
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                Ok(Some((realized, mean)))
            })
            .collect();
        let mut valid = Vec::new();
        for r in runs {
            if let Some(v) = r? {
                valid.push(v);
            }
        }
        if valid.is_empty() {
            continue;
        }
        let flow = valid.iter().map(|v| v.0).sum::<f64>() / valid.len() as f64;
        let mean_delay = valid.iter().map(|v| v.1).sum::<f64>() / valid.len() as f64;
        out.push(LinkSample { flow, mean_delay });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(fft: f64, cap: f64, a: f64, b: f64) -> DelayParams {
        DelayParams { fft, cap, a, b }
    }

    #[test]
    fn bpr_delay_known_values() {
        assert_relative_eq!(bpr_delay(&p(10.0, 100.0, 1.0, 2.0), 0.0), 10.0);
        assert_relative_eq!(bpr_delay(&p(10.0, 100.0, 1.0, 2.0), 100.0), 20.0);
        assert_relative_eq!(bpr_delay(&p(10.0, 100.0, 0.15, 4.0), 50.0), 10.09375);
    }

    #[test]
    fn bpr_integral_closed_form_matches_quadrature() {
        let pr = p(10.0, 100.0, 1.0, 2.0);
        assert_relative_eq!(bpr_integral(&pr, 0.0), 0.0);
        assert_relative_eq!(bpr_integral(&pr, 100.0), 1000.0 + 1000.0 / 3.0, epsilon = 1e-9);
        // Simpson quadrature oracle on an uneven case.
        let pr = p(7.0, 1900.0, 0.15, 4.0);
        let x = 2500.0;
        let n = 20_000;
        let h = x / n as f64;
        let mut acc = bpr_delay(&pr, 0.0) + bpr_delay(&pr, x);
        for i in 1..n {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * bpr_delay(&pr, i as f64 * h);
        }
        let quad = acc * h / 3.0;
        assert_relative_eq!(bpr_integral(&pr, x), quad, epsilon = 1e-6);
    }

    #[test]
    fn integral_derivative_is_delay() {
        let pr = p(12.0, 1900.0, 0.15, 4.0);
        for &x in &[10.0f64, 500.0, 1900.0, 3000.0] {
            let h = 1e-4 * x.max(1.0);
            let fd = (bpr_integral(&pr, x + h) - bpr_integral(&pr, x - h)) / (2.0 * h);
            assert_relative_eq!(fd, bpr_delay(&pr, x), epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn delay_non_decreasing_and_integral_convex() {
        let pr = p(5.0, 800.0, 0.3, 2.5);
        let mut prev = 0.0;
        let grid: Vec<f64> = (0..200).map(|i| i as f64 * 15.0).collect();
        for &x in &grid {
            let d = bpr_delay(&pr, x);
            assert!(d >= prev);
            prev = d;
        }
        for w in grid.windows(3) {
            let second = bpr_integral(&pr, w[0]) - 2.0 * bpr_integral(&pr, w[1])
                + bpr_integral(&pr, w[2]);
            assert!(second >= -1e-9);
        }
    }

    #[test]
    fn fit_roundtrip_exact() {
        let truth = p(12.0, 1900.0, 0.15, 4.0);
        let samples: Vec<LinkSample> = (1..=20)
            .map(|i| {
                let flow = i as f64 * 150.0;
                LinkSample { flow, mean_delay: bpr_delay(&truth, flow) }
            })
            .collect();
        let rep = fit_bpr(&samples, None).unwrap();
        assert!((rep.params.fft - truth.fft).abs() / truth.fft <= 0.01);
        assert!((rep.params.cap - truth.cap).abs() / truth.cap <= 0.01);
        assert!((rep.params.a - truth.a).abs() / truth.a <= 0.01);
        assert!((rep.params.b - truth.b).abs() / truth.b <= 0.01);
        assert!(rep.r_squared >= 0.999, "r2 = {}", rep.r_squared);
    }

    #[test]
    fn fit_flat_data_clamps_a() {
        let samples: Vec<LinkSample> =
            (0..8).map(|i| LinkSample { flow: i as f64 * 100.0, mean_delay: 42.0 }).collect();
        let rep = fit_bpr(&samples, None).unwrap();
        assert!(rep.params.a <= 1e-3, "a = {}", rep.params.a);
        assert!((rep.params.fft - 42.0).abs() < 0.5);
        assert!(rep.r_squared <= 1.0);
        assert!(rep.r_squared > 0.99);
    }

    #[test]
    fn fit_rejects_insufficient_samples() {
        let s = vec![
            LinkSample { flow: 1.0, mean_delay: 2.0 },
            LinkSample { flow: 2.0, mean_delay: 2.1 },
            LinkSample { flow: 3.0, mean_delay: 2.5 },
        ];
        let err = fit_bpr(&s, None).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"));
        let same = vec![LinkSample { flow: 5.0, mean_delay: 2.0 }; 6];
        assert!(fit_bpr(&same, None).is_err());
    }

    #[test]
    fn affine_eval_and_integral() {
        let f = DelayFn::Affine { base: 1.0, slope: 2.0 };
        assert_relative_eq!(f.eval(3.0), 7.0);
        assert_relative_eq!(f.integral(3.0), 3.0 + 9.0);
        let c = DelayFn::constant(4.0);
        assert_relative_eq!(c.eval(100.0), 4.0);
        assert_relative_eq!(c.integral(2.0), 8.0);
    }

    fn one_link_scenario(fft: f64, cap: f64) -> Scenario {
        let nodes = vec![
            Node { id: "u".into(), x: None, y: None },
            Node { id: "v".into(), x: None, y: None },
        ];
        let net = Network::new(
            nodes,
            vec![("uv".into(), "u".into(), "v".into(), 500.0, 2, fft, Some(cap), false)],
            vec![],
        )
        .unwrap();
        Scenario::new(net, vec![], 3600).unwrap()
    }

    #[test]
    fn sampling_free_flow_recovers_fft() {
        // Injection far below capacity: every traversal takes exactly fft.
        let sc = one_link_scenario(10.0, 3600.0);
        let samples = generate_link_samples(&sc, 0, &[360.0], &[7, 11]).unwrap();
        assert_eq!(samples.len(), 1);
        assert!((samples[0].mean_delay - 10.0).abs() <= 0.5, "delay = {}", samples[0].mean_delay);
        assert!((samples[0].flow - 360.0).abs() / 360.0 <= 0.1, "flow = {}", samples[0].flow);
    }

    #[test]
    fn sampling_delays_grow_with_load() {
        let sc = one_link_scenario(10.0, 1800.0);
        let samples =
            generate_link_samples(&sc, 0, &[600.0, 1440.0, 1800.0], &[1, 2, 3, 4]).unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            // A traversal can never beat the free-flow time.
            assert!(s.mean_delay >= 10.0 - 1e-9, "delay = {}", s.mean_delay);
        }
        assert!(
            samples[2].mean_delay > samples[0].mean_delay + 2.0,
            "expected queueing near capacity: {samples:?}"
        );
    }

    #[test]
    fn sampling_rejects_bad_inputs() {
        let sc = one_link_scenario(10.0, 1800.0);
        assert!(generate_link_samples(&sc, 0, &[600.0], &[]).is_err());
        assert!(generate_link_samples(&sc, 0, &[0.0], &[1]).is_err());
        assert!(generate_link_samples(&sc, 5, &[600.0], &[1]).is_err());
    }
}

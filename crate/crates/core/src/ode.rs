//! Fixed-grid ODE solvers over a vector field, with optional trajectory
//! recording. The grid is uniform, t_k = k/N, integrating from t=0 to t=1.

use crate::numeric::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::validation(format!(
                "unknown solver {s:?} (expected euler, midpoint or rk4)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Number of steps N >= 1.
    pub n_steps: usize,
    pub record_trajectory: bool,
}

impl SolverConfig {
    pub fn new(method: Method, n_steps: usize) -> Self {
        SolverConfig {
            method,
            n_steps,
            record_trajectory: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }
}

/// N+1 states on the uniform grid, times 0 to 1 inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

/// Integrate dx/dt = field(x, t) from the initial state at t=0 to t=1.
pub fn solve(
    field: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    x0: &Tensor,
    cfg: &SolverConfig,
) -> Result<(Tensor, Option<Trajectory>)> {
    if cfg.n_steps == 0 {
        return Err(Error::validation("solver needs at least one step"));
    }
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let mut x = x0.clone();
    let mut traj = if cfg.record_trajectory {
        Some(Trajectory {
            times: vec![0.0],
            states: vec![x0.clone()],
        })
    } else {
        None
    };
    for k in 0..n {
        let t = k as f64 / n as f64;
        x = match cfg.method {
            Method::Euler => {
                let v = field(&x, t)?;
                let mut next = x.clone();
                next.axpy(h, &v);
                next
            }
            Method::Midpoint => {
                let k1 = field(&x, t)?;
                let mut half = x.clone();
                half.axpy(h / 2.0, &k1);
                let k2 = field(&half, t + h / 2.0)?;
                let mut next = x;
                next.axpy(h, &k2);
                next
            }
            Method::Rk4 => {
                let k1 = field(&x, t)?;
                let mut p = x.clone();
                p.axpy(h / 2.0, &k1);
                let k2 = field(&p, t + h / 2.0)?;
                let mut p = x.clone();
                p.axpy(h / 2.0, &k2);
                let k3 = field(&p, t + h / 2.0)?;
                let mut p = x.clone();
                p.axpy(h, &k3);
                let k4 = field(&p, t + h)?;
                let mut next = x;
                next.axpy(h / 6.0, &k1);
                next.axpy(h / 3.0, &k2);
                next.axpy(h / 3.0, &k3);
                next.axpy(h / 6.0, &k4);
                next
            }
        };
        if !x.all_finite() {
            return Err(Error::Divergence { step: k });
        }
        if let Some(tr) = &mut traj {
            tr.times.push((k + 1) as f64 / n as f64);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

/// Measured convergence order, or a flag when the method integrates the
/// problem exactly at some N (zero error makes the slope undefined).
#[derive(Debug, Clone, PartialEq)]
pub enum OrderEstimate {
    Order(f64),
    ExactIntegration,
}

/// Least-squares slope of log(error) vs log(1/N) against a known solution
/// at t=1.
pub fn empirical_order(
    method: Method,
    field: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    x0: &Tensor,
    exact_at_1: &Tensor,
    n_list: &[usize],
) -> Result<OrderEstimate> {
    if n_list.len() < 3 {
        return Err(Error::validation("need at least 3 step counts"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("step counts must be increasing"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in n_list {
        let (x1, _) = solve(field, x0, &SolverConfig::new(method, n))?;
        let err = x1.sub(exact_at_1)?.norm_sq().sqrt();
        if err == 0.0 {
            return Ok(OrderEstimate::ExactIntegration);
        }
        xs.push((1.0 / n as f64).ln());
        ys.push(err.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(OrderEstimate::Order(num / den))
}

/// Trajectory CSV: header `t,frame,dim0..dim{d-1}`, one row per (time, frame).
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.states[0].cols();
    let mut out = String::from("t,frame");
    for k in 0..d {
        out.push_str(&format!(",dim{k}"));
    }
    out.push('\n');
    for (t, state) in traj.times.iter().zip(&traj.states) {
        for frame in 0..state.shape()[0] {
            out.push_str(&format!("{t},{frame}"));
            for v in state.row(frame) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn constant_field_is_exact_for_all_methods() {
        let x0 = Tensor::new(vec![2, 2], vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let delta = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let expect = x0.add(&delta).unwrap();
        for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
            for n in [1usize, 3, 17] {
                let (x1, _) = solve(
                    &mut |_x, _t| Ok(delta.clone()),
                    &x0,
                    &SolverConfig::new(method, n),
                )
                .unwrap();
                // bitwise when h = 1/N is a power of two, otherwise only
                // step-summation roundoff remains
                for (a, b) in x1.data().iter().zip(expect.data()) {
                    assert!((a - b).abs() < 1e-14, "{method:?} N={n}: {a} vs {b}");
                }
                if n.is_power_of_two() && method == Method::Euler {
                    assert_eq!(x1.data(), expect.data(), "{method:?} N={n}");
                }
            }
        }
    }

    #[test]
    fn euler_one_step_identity() {
        // single step: x0 + field(x0, 0)
        let (x1, _) = solve(
            &mut |x, _t| Ok(x.clone()),
            &scalar(1.0),
            &SolverConfig::new(Method::Euler, 1),
        )
        .unwrap();
        assert_eq!(x1.data()[0], 2.0);
    }

    #[test]
    fn exponential_accuracy() {
        let e = std::f64::consts::E;
        let (x1, _) = solve(
            &mut |x, _t| Ok(x.clone()),
            &scalar(1.0),
            &SolverConfig::new(Method::Euler, 1000),
        )
        .unwrap();
        assert!((x1.data()[0] - e).abs() < 2e-3);
        let (x1, _) = solve(
            &mut |x, _t| Ok(x.clone()),
            &scalar(1.0),
            &SolverConfig::new(Method::Rk4, 10),
        )
        .unwrap();
        // true RK4 error at h = 0.1 on y' = y is about 2.1e-6
        assert!((x1.data()[0] - e).abs() < 3e-6);
    }

    #[test]
    fn empirical_orders_on_exponential() {
        let e = scalar(std::f64::consts::E);
        let ns = [8usize, 16, 32, 64, 128];
        let get = |method| {
            match empirical_order(method, &mut |x, _t| Ok(x.clone()), &scalar(1.0), &e, &ns)
                .unwrap()
            {
                OrderEstimate::Order(p) => p,
                OrderEstimate::ExactIntegration => panic!("unexpected exact"),
            }
        };
        assert!((get(Method::Euler) - 1.0).abs() < 0.1);
        assert!((get(Method::Midpoint) - 2.0).abs() < 0.2);
        assert!((get(Method::Rk4) - 4.0).abs() < 0.5);
    }

    #[test]
    fn constant_field_flagged_exact() {
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let est = empirical_order(
            Method::Euler,
            &mut |_x, _t| Ok(scalar(1.0)),
            &scalar(0.0),
            &one,
            &[2, 4, 8],
        )
        .unwrap();
        assert_eq!(est, OrderEstimate::ExactIntegration);
    }

    #[test]
    fn recording_does_not_change_final_state() {
        let cfg = SolverConfig::new(Method::Rk4, 25);
        let (a, _) = solve(&mut |x, t| Ok(x.scale(t)), &scalar(1.3), &cfg).unwrap();
        let (b, traj) = solve(&mut |x, t| Ok(x.scale(t)), &scalar(1.3), &cfg.clone().recording())
            .unwrap();
        assert_eq!(a.data(), b.data());
        let traj = traj.unwrap();
        assert_eq!(traj.states.len(), 26);
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(traj.times[25], 1.0);
        assert_eq!(traj.states[25].data(), a.data());
    }

    #[test]
    fn divergence_reports_step_index() {
        let res = solve(
            &mut |x, _t| Ok(x.map(|v| v * f64::NAN)),
            &scalar(1.0),
            &SolverConfig::new(Method::Euler, 4),
        );
        match res {
            Err(Error::Divergence { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn methods_agree_in_fine_step_limit() {
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| (v * t).sin() + 0.5));
        let x0 = scalar(0.2);
        let mut finals = Vec::new();
        for m in [Method::Euler, Method::Midpoint, Method::Rk4] {
            let (x1, _) = solve(&mut field.clone(), &x0, &SolverConfig::new(m, 10_000)).unwrap();
            finals.push(x1.data()[0]);
        }
        for w in finals.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![
                Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
                Tensor::new(vec![2, 2], vec![4.0, 5.0, 6.0, 7.0]).unwrap(),
            ],
        };
        let csv = trajectory_csv(&traj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,frame,dim0,dim1");
        assert_eq!(lines[1], "0,0,0,1");
        assert_eq!(lines[4], "1,1,6,7");
    }
}

//! Small dense quasi-Newton minimizer and projected gradient ascent.

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub value_tol: f64,
    /// Relative step for central differences.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-7,
            value_tol: 1e-12,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn numerical_gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`. Non-finite values are treated as `+inf` so the line search
/// backs away from them.
pub fn bfgs(f: impl Fn(&[f64]) -> f64, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let d = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x);
    if d == 0 {
        return Minimum {
            x,
            value: fx,
            iterations: 0,
            converged: true,
        };
    }
    let mut g = numerical_gradient(&eval, &x, opts.fd_step);
    // inverse Hessian approximation, row-major
    let mut h = identity(d);
    let mut converged = false;
    let mut iterations = 0;
    let mut stall = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let gnorm = dot(&g, &g).sqrt();
        if !gnorm.is_finite() {
            break;
        }
        if gnorm < opts.grad_tol {
            converged = true;
            break;
        }
        let mut p: Vec<f64> = (0..d).map(|i| -dot(&h[i * d..(i + 1) * d], &g)).collect();
        let mut slope = dot(&p, &g);
        if slope >= 0.0 {
            // lost descent; restart from steepest descent
            h = identity(d);
            p = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let mut trial: Vec<f64>;
        let mut ft;
        loop {
            trial = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            ft = eval(&trial);
            if ft <= fx + 1e-4 * t * slope || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        if !(ft < fx) {
            if h != identity(d) {
                h = identity(d);
                continue;
            }
            converged = gnorm < opts.grad_tol.sqrt();
            break;
        }
        let g_new = numerical_gradient(&eval, &trial, opts.fd_step);
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            let hy: Vec<f64> = (0..d).map(|i| dot(&h[i * d..(i + 1) * d], &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let improvement = fx - ft;
        x = trial;
        fx = ft;
        g = g_new;
        if improvement < opts.value_tol * fx.abs().max(1.0) {
            stall += 1;
            if stall >= 3 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
    }
    Minimum {
        x,
        value: fx,
        iterations,
        converged,
    }
}

#[derive(Clone, Debug)]
pub struct AscentOptions {
    pub max_iter: usize,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo: f64,
    /// Convergence when `‖P(x + ∇f) − x‖ < tol·√N`.
    pub tol: f64,
    pub min_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            tol: 1e-6,
            min_step: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AscentOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Trial points rejected because the objective was not finite there.
    pub rejected: usize,
}

/// Projected gradient ascent on the box `[lo, hi]ᴺ` with Armijo backtracking.
/// `on_step(iteration, x, value)` is called for the start point and after
/// every accepted step.
pub fn projected_ascent(
    value: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    (lo, hi): (f64, f64),
    x0: &[f64],
    opts: &AscentOptions,
    mut on_step: impl FnMut(usize, &[f64], f64),
) -> AscentOutcome {
    let project = |v: f64| v.clamp(lo, hi);
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().map(|&v| project(v)).collect();
    let mut fx = value(&x);
    let mut rejected = 0;
    on_step(0, &x, fx);
    if !fx.is_finite() {
        return AscentOutcome {
            x,
            value: fx,
            iterations: 0,
            converged: false,
            rejected: 1,
        };
    }
    let threshold = opts.tol * (n as f64).sqrt();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        let g = gradient(&x);
        let mapping: f64 = x
            .iter()
            .zip(&g)
            .map(|(a, b)| (project(a + b) - a).powi(2))
            .sum::<f64>()
            .sqrt();
        if mapping < threshold {
            converged = true;
            break;
        }
        let mut t = opts.initial_step;
        let mut accepted = None;
        while t >= opts.min_step {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| project(a + t * b)).collect();
            let ft = value(&trial);
            if !ft.is_finite() {
                rejected += 1;
                t *= opts.shrink;
                continue;
            }
            let gain: f64 = trial
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((a, b), c)| (a - b) * c)
                .sum();
            if ft >= fx + opts.armijo * gain {
                accepted = Some((trial, ft));
                break;
            }
            t *= opts.shrink;
        }
        let Some((trial, ft)) = accepted else {
            break;
        };
        debug_assert!(ft >= fx, "ascent step decreased the objective");
        iterations = it;
        x = trial;
        fx = ft;
        on_step(it, &x, fx);
    }
    AscentOutcome {
        x,
        value: fx,
        iterations,
        converged,
        rejected,
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = bfgs(
            f,
            &[-1.2, 1.0],
            &BfgsOptions {
                max_iter: 500,
                ..Default::default()
            },
        );
        assert!(
            (m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4,
            "{:?}",
            m
        );
    }

    #[test]
    fn ascent_finds_box_constrained_maximum() {
        // maximize −(x − 2)² − (y + 0.3)² on [−1, 1]²
        let f = |x: &[f64]| -(x[0] - 2.0).powi(2) - (x[1] + 0.3).powi(2);
        let g = |x: &[f64]| vec![-2.0 * (x[0] - 2.0), -2.0 * (x[1] + 0.3)];
        let mut values = Vec::new();
        let out = projected_ascent(
            f,
            g,
            (-1.0, 1.0),
            &[0.0, 0.0],
            &AscentOptions::default(),
            |_, _, v| values.push(v),
        );
        assert!(out.converged);
        assert!(
            (out.x[0] - 1.0).abs() < 1e-9 && (out.x[1] + 0.3).abs() < 1e-6,
            "{:?}",
            out.x
        );
        assert!(values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn handles_infinite_walls() {
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::INFINITY
            } else {
                x[0] - x[0].ln()
            }
        };
        let m = bfgs(f, &[5.0], &BfgsOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-4, "{:?}", m);
    }
}

//! Derivative-free minimizers used for variance-component estimation.

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fval: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Standard Nelder–Mead simplex minimization (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). Converges when the simplex function spread
/// falls below `tol` or after `max_iter` iterations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> OptimResult {
    let n = start.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

    let mut converged = false;
    for _ in 0..max_iter {
        // order best..worst
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fvals[a].partial_cmp(&fvals[b]).unwrap());
        let best = idx[0];
        let worst = idx[n];
        let second_worst = idx[n - 1];

        if (fvals[worst] - fvals[best]).abs() <= tol {
            converged = true;
            break;
        }

        // centroid of all but the worst point
        let mut centroid = vec![0.0; n];
        for &i in idx.iter().take(n) {
            for j in 0..n {
                centroid[j] += simplex[i][j] / n as f64;
            }
        }

        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + (centroid[j] - simplex[worst][j]))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < fvals[best] {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - simplex[worst][j]))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                fvals[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                fvals[worst] = f_reflect;
            }
        } else if f_reflect < fvals[second_worst] {
            simplex[worst] = reflect;
            fvals[worst] = f_reflect;
        } else {
            // contraction toward the better of worst/reflected
            let (base, f_base) = if f_reflect < fvals[worst] {
                (&reflect, f_reflect)
            } else {
                (&simplex[worst].clone(), fvals[worst])
            };
            let contract: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 0.5 * (base[j] - centroid[j]))
                .collect();
            let f_contract = eval(&contract, &mut evals);
            if f_contract < f_base {
                simplex[worst] = contract;
                fvals[worst] = f_contract;
            } else {
                // shrink toward the best vertex
                let best_point = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for j in 0..n {
                        simplex[i][j] = best_point[j] + 0.5 * (simplex[i][j] - best_point[j]);
                    }
                    fvals[i] = eval(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if fvals[i] < fvals[best] {
            best = i;
        }
    }
    OptimResult {
        x: simplex[best].clone(),
        fval: fvals[best],
        evaluations: evals,
        converged,
    }
}

/// Brent's parabolic-interpolation minimization on [a, b].
pub fn brent_min<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    tol: f64,
    max_iter: usize,
) -> OptimResult {
    const GOLD: f64 = 0.381_966_011_250_105;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut evals = 0;
    let mut eval = |x: f64, evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = eval(x, &mut evals);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut converged = false;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            converged = true;
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // fit a parabola through (v, fv), (w, fw), (x, fx)
            let r = (x - w) * (fx - fv);
            let q0 = (x - v) * (fx - fw);
            let mut p = (x - v) * q0 - (x - w) * r;
            let mut q = 2.0 * (q0 - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = eval(u, &mut evals);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    OptimResult {
        x: vec![x],
        fval: fx,
        evaluations: evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_minimizes_quadratic() {
        let res = nelder_mead(
            |x| (x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2),
            &[4.0, 4.0],
            1.0,
            1e-12,
            500,
        );
        assert!(res.converged);
        assert!((res.x[0] - 1.5).abs() < 1e-5);
        assert!((res.x[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn nelder_mead_handles_banana_valley() {
        let res = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            1e-12,
            2000,
        );
        assert!((res.x[0] - 1.0).abs() < 1e-4);
        assert!((res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn brent_finds_minimum_to_high_precision() {
        let res = brent_min(|x| (x - 0.731).powi(2) + 3.0, -10.0, 10.0, 1e-12, 200);
        assert!(res.converged);
        assert!((res.x[0] - 0.731).abs() < 1e-9);
    }

    #[test]
    fn brent_respects_bounds() {
        // monotone decreasing on the interval: minimum at the right edge
        let res = brent_min(|x| -x, 0.0, 2.0, 1e-10, 200);
        assert!((res.x[0] - 2.0).abs() < 1e-6);
    }
}

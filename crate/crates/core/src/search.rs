//! Derivative-free minimization: Nelder-Mead and a golden-section
//! coordinate polish.

use std::cmp::Ordering;

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn by_value(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
}

/// Minimizes `f` from `x0` with an axis-aligned initial simplex of edge
/// lengths `step`. Stops after `max_evals` evaluations or once the simplex
/// has collapsed in both value and extent.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: &[f64], max_evals: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
        let v = eval(&x);
        simplex.push((x, v));
    }
    let mut evals = n + 1;
    let scale0: f64 = step.iter().map(|s| s.abs()).fold(0.0, f64::max).max(1e-12);

    while evals < max_evals {
        // Stable sort keeps earlier vertices first on ties.
        simplex.sort_by(by_value);
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-12 * (1.0 + best.abs()) && diameter <= 1e-7 * scale0 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(x, _)| x[i]).sum::<f64>() / n as f64)
            .collect();
        let toward = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };
        let xr = toward(REFLECT);
        let fr = eval(&xr);
        evals += 1;
        if fr < best {
            let xe = toward(EXPAND);
            let fe = eval(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = toward(REFLECT * CONTRACT);
                let v = eval(&x);
                (x, v)
            } else {
                let x = toward(-CONTRACT);
                let v = eval(&x);
                (x, v)
            };
            evals += 1;
            if fc < fr.min(worst) {
                simplex[n] = (xc, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = anchor
                        .iter()
                        .zip(&vertex.0)
                        .map(|(a, v)| a + SHRINK * (v - a))
                        .collect();
                    let v = eval(&x);
                    *vertex = (x, v);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(by_value);
    simplex.swap_remove(0)
}

/// Coordinate sweeps of golden-section search on `[xᵢ − rᵢ, xᵢ + rᵢ]`,
/// halving the radii after each sweep. Only improvements are kept.
pub fn golden_polish<F: Fn(&[f64]) -> f64>(f: &F, mut x: Vec<f64>, radius: &[f64], sweeps: usize) -> (Vec<f64>, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    const ITERS: usize = 16;
    let mut fx = f(&x);
    let mut radius = radius.to_vec();
    for _ in 0..sweeps {
        for i in 0..x.len() {
            if radius[i] <= 0.0 {
                continue;
            }
            let mut probe = x.clone();
            let mut at = |t: f64| {
                probe[i] = t;
                let v = f(&probe);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            };
            let (mut a, mut b) = (x[i] - radius[i], x[i] + radius[i]);
            let mut c = b - INV_PHI * (b - a);
            let mut d = a + INV_PHI * (b - a);
            let (mut fc, mut fd) = (at(c), at(d));
            let (mut best_t, mut best_f) = (x[i], fx);
            for _ in 0..ITERS {
                for (t, v) in [(c, fc), (d, fd)] {
                    if v < best_f {
                        best_f = v;
                        best_t = t;
                    }
                }
                if fc <= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - INV_PHI * (b - a);
                    fc = at(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + INV_PHI * (b - a);
                    fd = at(d);
                }
            }
            for (t, v) in [(c, fc), (d, fd)] {
                if v < best_f {
                    best_f = v;
                    best_t = t;
                }
            }
            if best_f < fx {
                x[i] = best_t;
                fx = best_f;
            }
        }
        for r in radius.iter_mut() {
            *r *= 0.5;
        }
    }
    (x, fx)
}

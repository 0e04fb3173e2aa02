//! Two-dimensional Nelder-Mead minimizer used by the principal's outer fit.
//!
//! Deterministic: the initial simplex is the start point plus one offset per
//! coordinate, and every subsequent move is a fixed function of the current
//! simplex. Objective values may be `+inf` (infeasible points); they order
//! last and get reflected away. `NaN` objectives are a caller bug.

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub(crate) struct NmOptions {
    pub max_iter: usize,
    /// Convergence threshold on the simplex coordinate spread.
    pub xtol: f64,
    /// Convergence threshold on the simplex value spread.
    pub ftol: f64,
    /// Offset used to build the initial simplex around the start point.
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NmOutcome {
    pub point: [f64; 2],
    pub value: f64,
    pub evaluations: usize,
}

pub(crate) fn minimize<F>(f: &mut F, start: [f64; 2], opt: &NmOptions) -> Result<NmOutcome>
where
    F: FnMut(&[f64; 2]) -> Result<f64>,
{
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let mut evals = 0;
    let eval = |f: &mut F, p: &[f64; 2], n: &mut usize| -> Result<f64> {
        *n += 1;
        let v = f(p)?;
        debug_assert!(!v.is_nan(), "objective returned NaN");
        Ok(v)
    };

    let mut simplex: Vec<([f64; 2], f64)> = Vec::with_capacity(3);
    for p in [
        start,
        [start[0] + opt.init_scale, start[1]],
        [start[0], start[1] + opt.init_scale],
    ] {
        let v = eval(f, &p, &mut evals)?;
        simplex.push((p, v));
    }
    sort(&mut simplex);

    // Nothing to optimize if every vertex is infeasible.
    if simplex[0].1.is_infinite() {
        return Ok(NmOutcome {
            point: start,
            value: simplex.iter().find(|(p, _)| *p == start).map_or(f64::INFINITY, |s| s.1),
            evaluations: evals,
        });
    }

    for _ in 0..opt.max_iter {
        if converged(&simplex, opt) {
            break;
        }
        let centroid = [
            0.5 * (simplex[0].0[0] + simplex[1].0[0]),
            0.5 * (simplex[0].0[1] + simplex[1].0[1]),
        ];
        let worst = simplex[2].0;
        let reflected = [
            centroid[0] + ALPHA * (centroid[0] - worst[0]),
            centroid[1] + ALPHA * (centroid[1] - worst[1]),
        ];
        let f_reflected = eval(f, &reflected, &mut evals)?;

        if f_reflected < simplex[0].1 {
            let expanded = [
                centroid[0] + GAMMA * (reflected[0] - centroid[0]),
                centroid[1] + GAMMA * (reflected[1] - centroid[1]),
            ];
            let f_expanded = eval(f, &expanded, &mut evals)?;
            if f_expanded < f_reflected {
                simplex[2] = (expanded, f_expanded);
            } else {
                simplex[2] = (reflected, f_reflected);
            }
        } else if f_reflected < simplex[1].1 {
            simplex[2] = (reflected, f_reflected);
        } else {
            // Contract toward the better side of the worst vertex.
            let (anchor, f_anchor) = if f_reflected < simplex[2].1 {
                (reflected, f_reflected)
            } else {
                (worst, simplex[2].1)
            };
            let contracted = [
                centroid[0] + RHO * (anchor[0] - centroid[0]),
                centroid[1] + RHO * (anchor[1] - centroid[1]),
            ];
            let f_contracted = eval(f, &contracted, &mut evals)?;
            if f_contracted < f_anchor {
                simplex[2] = (contracted, f_contracted);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = [
                        best[0] + SIGMA * (v.0[0] - best[0]),
                        best[1] + SIGMA * (v.0[1] - best[1]),
                    ];
                    v.1 = eval(f, &v.0, &mut evals)?;
                }
            }
        }
        sort(&mut simplex);
    }

    Ok(NmOutcome {
        point: simplex[0].0,
        value: simplex[0].1,
        evaluations: evals,
    })
}

fn sort(simplex: &mut [([f64; 2], f64)]) {
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("NaN objective"));
}

fn converged(simplex: &[([f64; 2], f64)], opt: &NmOptions) -> bool {
    if simplex.iter().any(|(_, v)| v.is_infinite()) {
        return false;
    }
    let f_spread = simplex[2].1 - simplex[0].1;
    let x_spread = (0..2)
        .map(|c| {
            let lo = simplex.iter().map(|(p, _)| p[c]).fold(f64::INFINITY, f64::min);
            let hi = simplex.iter().map(|(p, _)| p[c]).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        })
        .fold(0.0f64, f64::max);
    f_spread <= opt.ftol && x_spread <= opt.xtol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let mut f = |p: &[f64; 2]| Ok((p[0] - 1.5).powi(2) + 3.0 * (p[1] + 0.5).powi(2));
        let out = minimize(
            &mut f,
            [0.0, 0.0],
            &NmOptions {
                max_iter: 500,
                xtol: 1e-10,
                ftol: 1e-14,
                init_scale: 0.1,
            },
        )
        .unwrap();
        assert!((out.point[0] - 1.5).abs() <= 1e-7);
        assert!((out.point[1] + 0.5).abs() <= 1e-7);
    }

    #[test]
    fn escapes_infinite_vertices() {
        // Infeasible half-plane x > 0.05; minimum sits on the feasible side.
        let mut f = |p: &[f64; 2]| {
            if p[0] > 0.05 {
                Ok(f64::INFINITY)
            } else {
                Ok((p[0] + 1.0).powi(2) + p[1].powi(2))
            }
        };
        let out = minimize(
            &mut f,
            [0.0, 0.0],
            &NmOptions {
                max_iter: 500,
                xtol: 1e-10,
                ftol: 1e-14,
                init_scale: 0.1,
            },
        )
        .unwrap();
        assert!((out.point[0] + 1.0).abs() <= 1e-6);
        assert!(out.point[1].abs() <= 1e-6);
    }

    #[test]
    fn all_infinite_simplex_returns_start() {
        let mut f = |_: &[f64; 2]| Ok(f64::INFINITY);
        let out = minimize(
            &mut f,
            [2.0, 3.0],
            &NmOptions {
                max_iter: 50,
                xtol: 1e-8,
                ftol: 1e-8,
                init_scale: 0.1,
            },
        )
        .unwrap();
        assert_eq!(out.point, [2.0, 3.0]);
        assert!(out.value.is_infinite());
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut f =
                |p: &[f64; 2]| Ok((p[0].sin() + p[1] * p[1]) * (1.0 + (p[0] - 0.3).powi(2)));
            minimize(
                &mut f,
                [0.2, -0.4],
                &NmOptions {
                    max_iter: 300,
                    xtol: 1e-9,
                    ftol: 1e-13,
                    init_scale: 0.1,
                },
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.point, b.point);
        assert_eq!(a.value, b.value);
        assert_eq!(a.evaluations, b.evaluations);
    }
}

//! Derivative-free Nelder-Mead used by the empirical-Bayes fit.

/// Minimizes `f` starting from `x0` with an axis-aligned initial simplex of
/// size `step`. Stops after `max_evals` evaluations or when the simplex
/// values agree to `ftol` (relative). Non-finite values are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: f64, max_evals: usize, ftol: f64) -> NmResult
where
    F: FnMut(&[f64]) -> f64,
{
    let k = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if k == 0 {
        let v = eval(x0, &mut evals);
        return NmResult {
            x: x0.to_vec(),
            value: v,
            evals,
        };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    simplex.push(x0.to_vec());
    for i in 0..k {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut centroid = vec![0.0; k];
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let (best, worst) = (values[0], values[k]);
        if best.is_finite() && (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for x in &simplex[..k] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / k as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[k])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let xr = along(-alpha);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-alpha * gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[k] = xe;
                values[k] = fe;
            } else {
                simplex[k] = xr;
                values[k] = fr;
            }
        } else if fr < values[k - 1] {
            simplex[k] = xr;
            values[k] = fr;
        } else {
            let (xc, fc) = if fr < values[k] {
                let xc = along(-alpha * rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < values[k].min(fr) {
                simplex[k] = xc;
                values[k] = fc;
            } else {
                for i in 1..=k {
                    let shrunk: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, x)| b + sigma * (x - b))
                        .collect();
                    values[i] = eval(&shrunk, &mut evals);
                    simplex[i] = shrunk;
                }
            }
        }
    }
    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty simplex");
    NmResult {
        x: simplex[bi].clone(),
        value: values[bi],
        evals,
    }
}

#[derive(Debug, Clone)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

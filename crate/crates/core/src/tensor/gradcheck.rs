use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Derivatives smaller than this are compared in absolute terms; central
/// differences of an O(1) objective carry roundoff near `1e-11`.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Compare reverse-mode gradients of `f` with central differences over every
/// coordinate of `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tape, &ParamStore) -> Result<Var>,
{
    grad_check_filtered(f, params, h, |_| true)
}

/// As [`grad_check`], restricted to parameters whose name passes `include`.
///
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn grad_check_filtered<F, P>(
    mut f: F,
    params: &ParamStore,
    h: f64,
    include: P,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tape, &ParamStore) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    fn eval<F>(f: &mut F, p: &ParamStore) -> Result<f64>
    where
        F: FnMut(&Tape, &ParamStore) -> Result<Var>,
    {
        let tape = Tape::new();
        let loss = f(&tape, p)?;
        Ok(tape.scalar(loss))
    }

    let mut work = params.clone();
    work.zero_grad();
    let base_a = eval(&mut f, &work)?;
    let base_b = eval(&mut f, &work)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::contract(format!(
            "objective is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let mut analytic = work.clone();
    {
        let tape = Tape::new();
        let loss = f(&tape, &analytic)?;
        let grads = tape.backward(loss)?;
        analytic.accumulate(&tape, &grads);
    }

    let names: Vec<String> = work.names().filter(|n| include(n)).map(String::from).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for name in names {
        let n = work.get(&name)?.value.len();
        let grad: Vec<f64> = analytic.get(&name)?.grad.iter().copied().collect();
        for k in 0..n {
            let orig = flat(&work, &name, k)?;
            set_flat(&mut work, &name, k, orig + h)?;
            let up = eval(&mut f, &work)?;
            set_flat(&mut work, &name, k, orig - h)?;
            let down = eval(&mut f, &work)?;
            set_flat(&mut work, &name, k, orig)?;

            let numeric = (up - down) / (2.0 * h);
            let a = grad[k];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some((name.clone(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

fn flat(p: &ParamStore, name: &str, k: usize) -> Result<f64> {
    let v = p.value(name)?;
    Ok(v[[k / v.ncols(), k % v.ncols()]])
}

fn set_flat(p: &mut ParamStore, name: &str, k: usize, x: f64) -> Result<()> {
    let v = &mut p.get_mut(name)?.value;
    let c = v.ncols();
    v[[k / c, k % c]] = x;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn exact_for_quadratic() {
        let mut p = ParamStore::new();
        p.insert("theta", array![[2.0]]).unwrap();
        let r = grad_check(
            |t, p| {
                let x = p.var(t, "theta")?;
                t.mul(x, x)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn mse_of_linear_map_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        p.insert_uniform("w", 4, 4, 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
        let y = Rc::new(Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0)));
        let r = grad_check(
            |t, p| {
                let w = p.var(t, "w")?;
                let xv = t.constant(x.clone());
                let wx = t.matmul(w, xv)?;
                t.mse(wx, y.clone())
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 16);
    }

    #[test]
    fn nondeterministic_objective_rejected() {
        let mut p = ParamStore::new();
        p.insert("theta", array![[1.0]]).unwrap();
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(1));
        let res = grad_check(
            |t, p| {
                let x = p.var(t, "theta")?;
                let noise = t.constant(array![[rng.borrow_mut().random::<f64>()]]);
                t.add(x, noise)
            },
            &p,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}

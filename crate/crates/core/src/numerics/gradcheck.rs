//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Array, NumericsError, Tape, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(parameter index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Gradient magnitudes below this are compared against it rather than against
/// themselves, so that round-off on near-zero partials does not dominate.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Which coordinates of each parameter get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most this many coordinates per parameter, chosen uniformly.
    SampledPerParam(usize),
}

/// Checks every coordinate of every parameter. See [`grad_check_with`].
pub fn grad_check<F>(params: &mut [Array<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    grad_check_with(params, f, h, tol, Coordinates::All, &mut rand::rng())
}

/// Compares the backward-pass gradient of the scalar built by `f` against
/// `(f(x+h) - f(x-h)) / 2h` for the selected coordinates.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a one-element output.
pub fn grad_check_with<F, R>(
    params: &mut [Array<f64>],
    mut f: F,
    h: f64,
    tol: f64,
    coords: Coordinates,
    rng: &mut R,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
    R: Rng + ?Sized,
{
    let mut eval = |params: &[Array<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        if tape.value(out).len() != 1 {
            return Err(NumericsError::NotScalar(tape.shape(out).to_vec()));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates_checked: 0,
        tol,
        passed: true,
    };
    for p in 0..params.len() {
        let len = params[p].len();
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..len).collect(),
            Coordinates::SampledPerParam(k) if k >= len => (0..len).collect(),
            Coordinates::SampledPerParam(k) => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in picks {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let (t, _, o) = eval(params)?;
            let plus = t.value(o).item();
            params[p].data_mut()[i] = orig - h;
            let (t, _, o) = eval(params)?;
            let minus = t.value(o).item();
            params[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((p, i));
            }
            report.coordinates_checked += 1;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Array::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut params = vec![Array::scalar(3.0)];
        let report = grad_check(&mut params, |tape, p| tape.mul(p[0], p[0]), 1e-5, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_abs_err < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut params = vec![Array::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let report = grad_check(
            &mut params,
            |tape, p| {
                let zero = tape.scale(p[0], 0.0);
                Ok(tape.sum(zero))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_abs_err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut params = vec![Array::from_f64(&[2], &[1.0, 2.0]).unwrap()];
        let err = grad_check(&mut params, |_, p| Ok(p[0]), 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, NumericsError::NotScalar(_)));
    }
}

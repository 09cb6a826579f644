//! Central finite-difference checking of tape gradients in 64-bit.

use super::{Result, Tape, Tensor, Var};

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to round-off from reporting
/// huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entries whose `±h` probe crossed a kink and were re-probed with a
    /// smaller step on the same smooth piece.
    pub refined: usize,
    /// Entries sitting so close to a kink that no step down to `h / 1000`
    /// stays on one piece; they are left out of `max_rel_err`.
    pub kinked: usize,
    /// `(parameter index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the tape gradient of `build` against central differences with
/// step `h` (Richardson-extrapolated with `h / 2`), over the listed `(parameter, element)` pairs (all elements when
/// `entries` is `None`). Stop-gradient outputs are held at their unperturbed
/// values while differencing.
pub fn check<F>(
    params: &[Tensor<f64>],
    h: f64,
    entries: Option<&[(usize, usize)]>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_branches();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let stops = tape.stop_values();
    let base = tape.branch_signature();

    let eval = |ps: &[Tensor<f64>]| -> Result<(f64, bool)> {
        let mut tape = Tape::with_frozen_stops(stops.clone());
        tape.track_branches();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.branch_signature() == base))
    };
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        refined: 0,
        kinked: 0,
        worst: None,
    };
    for &(pi, ei) in entries {
        let orig = work[pi].data()[ei];
        let mut numeric = None;
        for k in 0..4 {
            let step = h / 10f64.powi(k);
            let mut central = |d: f64| -> Result<(f64, bool)> {
                work[pi].data_mut()[ei] = orig + d;
                let (plus, same_p) = eval(&work)?;
                work[pi].data_mut()[ei] = orig - d;
                let (minus, same_m) = eval(&work)?;
                work[pi].data_mut()[ei] = orig;
                Ok(((plus - minus) / (2.0 * d), same_p && same_m))
            };
            let (coarse, same_c) = central(step)?;
            let (fine, same_f) = central(step / 2.0)?;
            if same_c && same_f {
                // Richardson extrapolation cancels the h² term.
                numeric = Some((4.0 * fine - coarse) / 3.0);
                report.refined += (k > 0) as usize;
                break;
            }
        }
        let Some(numeric) = numeric else {
            report.kinked += 1;
            continue;
        };
        let a = analytic[pi].data()[ei];
        let err = relative_error(a, numeric, DEFAULT_FLOOR);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((pi, ei, a, numeric));
        }
    }
    Ok(report)
}

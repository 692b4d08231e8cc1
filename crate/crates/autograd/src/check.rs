//! Gradient verification against central finite differences.
//!
//! The numeric side re-evaluates the recorded function with perturbed leaf
//! values and never touches the backward pass, so it is an independent
//! oracle for every analytic gradient rule.

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;

/// A differentiable function under test: records itself on a fresh tape over
/// the given leaves and returns the scalar loss variable.
pub type TapeFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError> + Send + Sync;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckResult {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the max was attained
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval_loss(
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError>,
    points: &[Tensor<f64>],
    ctx: &str,
    coord: usize,
) -> Result<f64, TapeError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(TapeError::NonFinite {
            ctx: format!("loss while perturbing {ctx}"),
            coord,
        });
    }
    Ok(v)
}

/// Compare analytic gradients of `f` at `points` against central finite
/// differences with the given step.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<GradCheckResult, TapeError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError>,
{
    if !(step > 0.0) {
        return Err(TapeError::InvalidValue {
            op: "grad_check",
            what: format!("step must be positive, got {step}"),
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| tape.param(p.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(TapeError::NonFinite {
            ctx: "loss at base point".into(),
            coord: 0,
        });
    }
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut coords = 0usize;

    for (pi, point) in points.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        for ci in 0..point.numel() {
            let a = analytic.map_or(0.0, |t| t.data()[ci]);
            if !a.is_finite() {
                return Err(TapeError::NonFinite {
                    ctx: format!("analytic gradient of input {pi}"),
                    coord: ci,
                });
            }
            let mut plus = points.to_vec();
            plus[pi].data_mut()[ci] += step;
            let mut minus = points.to_vec();
            minus[pi].data_mut()[ci] -= step;
            let ctx = format!("input {pi}");
            let fp = eval_loss(&f, &plus, &ctx, ci)?;
            let fm = eval_loss(&f, &minus, &ctx, ci)?;
            let numeric = (fp - fm) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(TapeError::NonFinite {
                    ctx: format!("numeric gradient of input {pi}"),
                    coord: ci,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, ci);
            }
            coords += 1;
        }
    }

    Ok(GradCheckResult {
        max_rel_err: max_rel,
        worst,
        coords_checked: coords,
    })
}

// ---- named case suite ------------------------------------------------

/// One named gradient check, runnable by the CLI battery and by tests.
pub struct GradCase {
    pub name: String,
    pub tolerance: f64,
    runner: Box<dyn Fn() -> Result<GradCheckResult, TapeError> + Send + Sync>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        tolerance: f64,
        runner: impl Fn() -> Result<GradCheckResult, TapeError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            tolerance,
            runner: Box::new(runner),
        }
    }

    pub fn run(&self) -> Result<GradCheckResult, TapeError> {
        (self.runner)()
    }
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: Option<f64>,
    pub detail: String,
}

pub fn run_cases(cases: &[GradCase]) -> Vec<CaseOutcome> {
    cases
        .iter()
        .map(|case| match case.run() {
            Ok(res) => CaseOutcome {
                name: case.name.clone(),
                passed: res.max_rel_err <= case.tolerance,
                max_rel_err: Some(res.max_rel_err),
                detail: format!(
                    "max rel err {:.3e} over {} coords (tol {:.1e})",
                    res.max_rel_err, res.coords_checked, case.tolerance
                ),
            },
            Err(e) => CaseOutcome {
                name: case.name.clone(),
                passed: false,
                max_rel_err: None,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

/// Deterministic pseudo-random stream for test points (splitmix64), so the
/// engine crate does not need an RNG dependency.
pub struct PointStream {
    state: u64,
}

impl PointStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn tensor(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| self.uniform())
    }

    pub fn vector(&mut self, n: usize) -> Tensor<f64> {
        Tensor::vector((0..n).map(|_| self.uniform()).collect())
    }

    /// Uniform targets in [0, 1] for BCE.
    pub fn unit_tensor(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| self.uniform() * 0.5 + 0.5)
    }
}

/// Gradient checks for every differentiable op the tape exposes, at small
/// randomized shapes. Matrix-valued ops are reduced to a scalar through MSE
/// against a fixed random target; MSE itself has a dedicated direct case.
pub fn builtin_cases(seed: u64) -> Vec<GradCase> {
    let tol = 1e-5;
    let step = 1e-6;
    let mut cases: Vec<GradCase> = Vec::new();
    let mut add = |name: &str,
                   runner: Box<
        dyn Fn() -> Result<GradCheckResult, TapeError> + Send + Sync,
    >| {
        cases.push(GradCase {
            name: name.to_string(),
            tolerance: tol,
            runner,
        });
    };

    macro_rules! case {
        ($name:expr, $points:expr, $body:expr) => {
            add(
                $name,
                Box::new(move || {
                    let points = $points;
                    grad_check($body, &points, step)
                }),
            );
        };
    }

    let mut s = PointStream::new(seed);

    let pts = vec![s.tensor(4, 3), s.tensor(3, 5), s.tensor(4, 5)];
    case!("matmul", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.matmul(v[0], v[1])?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(4, 6), s.tensor(6, 4)];
    case!("transpose", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.transpose(v[0])?;
        t.mse(y, v[1])
    });

    let pts = vec![s.tensor(5, 4), s.tensor(5, 4), s.tensor(5, 4)];
    case!("add", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.add(v[0], v[1])?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(5, 4), s.vector(4), s.tensor(5, 4)];
    case!("add_bias", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.add_bias(v[0], v[1])?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(3, 7), s.tensor(3, 7)];
    case!("scale", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.scale(v[0], -1.7)?;
        t.mse(y, v[1])
    });

    let pts = vec![s.tensor(4, 2), s.tensor(4, 3), s.tensor(4, 5)];
    case!("concat_cols", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.concat(Axis::Cols, &[v[0], v[1]])?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(2, 5), s.tensor(3, 5), s.tensor(5, 5)];
    case!("concat_rows", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.concat(Axis::Rows, &[v[0], v[1]])?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(4, 6), s.tensor(4, 2)];
    case!("split_cols", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let parts = t.split(Axis::Cols, v[0], &[4, 2])?;
        t.mse(parts[1], v[1])
    });

    let pts = vec![s.tensor(6, 3), s.tensor(2, 3)];
    case!("split_rows", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let parts = t.split(Axis::Rows, v[0], &[4, 2])?;
        t.mse(parts[1], v[1])
    });

    let pts = vec![s.tensor(3, 4), s.tensor(2, 6)];
    case!("reshape", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.reshape(v[0], vec![2, 6])?;
        t.mse(y, v[1])
    });

    let pts = vec![
        s.tensor(5, 6),
        s.vector(6).map(|v| v + 1.5),
        s.vector(6),
        s.tensor(5, 6),
    ];
    case!("layer_norm", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        t.mse(y, v[3])
    });

    let pts = vec![s.tensor(4, 7), s.tensor(4, 7)];
    case!("softmax", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.softmax(v[0])?;
        t.mse(y, v[1])
    });

    let pts = vec![s.tensor(5, 5).scale(2.0), s.tensor(5, 5)];
    case!("gelu", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.gelu(v[0])?;
        t.mse(y, v[1])
    });

    let pts = vec![s.tensor(5, 5).scale(3.0), s.tensor(5, 5)];
    case!("sigmoid", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.sigmoid(v[0])?;
        t.mse(y, v[1])
    });

    let pts = vec![s.tensor(5, 4), s.tensor(6, 4), s.tensor(6, 3), s.tensor(5, 3)];
    case!("attention", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.attention(v[0], v[1], v[2])?;
        t.mse(y, v[3])
    });

    let pts = vec![s.tensor(4, 3), s.tensor(5, 3), s.tensor(4, 5)];
    case!("scaled_nt", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.scaled_nt(v[0], v[1], 0.61)?;
        t.mse(y, v[2])
    });

    let pts = vec![s.tensor(4, 4), s.tensor(4, 4)];
    case!("mse", pts.clone(), |t: &mut Tape<f64>, v: &[Var]| {
        t.mse(v[0], v[1])
    });

    let pts = vec![s.tensor(4, 5).scale(2.5), s.unit_tensor(4, 5)];
    case!(
        "bce_with_logits",
        pts.clone(),
        |t: &mut Tape<f64>, v: &[Var]| t.bce_with_logits(v[0], v[1])
    );

    cases
}

use crate::tape::Axis;

/// Fixture for failure-path tests: claims d(x^2)/dx = 3x, which disagrees
/// with finite differences at x = 3.
pub fn injected_bad_gradient_case() -> GradCase {
    GradCase::new("injected_bad_gradient", 1e-5, || {
        let x = 3.0f64;
        let step = 1e-6;
        let numeric = ((x + step).powi(2) - (x - step).powi(2)) / (2.0 * step);
        let wrong_analytic = 3.0 * x;
        Ok(GradCheckResult {
            max_rel_err: (wrong_analytic - numeric).abs() / wrong_analytic.abs().max(1.0),
            worst: (0, 0),
            coords_checked: 1,
        })
    })
}

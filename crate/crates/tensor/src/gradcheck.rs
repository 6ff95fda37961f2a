//! Central finite-difference checks of tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Options for [`gradcheck`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// numerically zero are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_elements: None,
        }
    }
}

/// Worst discrepancy found by [`gradcheck`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = inputs[i].len();
        let stride = match opts.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Deterministic pseudo-random values in `[lo, hi)` for diagnostic inputs.
fn wiggle(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 43758.5453;
            lo + (hi - lo) * (t - t.floor())
        })
        .collect()
}

fn input(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), wiggle(n, seed, lo, hi)).expect("shape")
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct gradient.
pub fn weighted_sum(tape: &Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(out);
    let w = tape.constant(input(&shape, seed ^ 0x5eed, -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>>,
);

/// Gradient checks of every tape primitive on small pseudo-random inputs.
///
/// Returns one `(name, report)` row per primitive configuration.
pub fn primitive_suite(opts: GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>, TensorError> {
    use crate::tape::Padding;
    let v5 = |s| input(&[5], s, -1.0, 1.0);
    // values kept away from the kinks of relu/clamp/max
    let kinkless = Tensor::from_f64([5], &[-0.9, -0.35, 0.3, 0.65, 1.2]).unwrap();
    let cases: Vec<Case> = vec![
        ("add", vec![v5(1), v5(2)], Box::new(|t, x| t.add(x[0], x[1]))),
        (
            "add(broadcast)",
            vec![input(&[2, 5], 3, -1.0, 1.0), v5(4)],
            Box::new(|t, x| t.add(x[0], x[1])),
        ),
        ("sub", vec![v5(5), v5(6)], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![v5(7), v5(8)], Box::new(|t, x| t.mul(x[0], x[1]))),
        (
            "mul(broadcast)",
            vec![input(&[2, 1, 5], 9, -1.0, 1.0), input(&[3, 1], 10, -1.0, 1.0)],
            Box::new(|t, x| t.mul(x[0], x[1])),
        ),
        (
            "div",
            vec![v5(11), input(&[5], 12, 0.5, 2.0)],
            Box::new(|t, x| t.div(x[0], x[1])),
        ),
        ("scale", vec![v5(13)], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))),
        ("add_scalar", vec![v5(14)], Box::new(|t, x| Ok(t.add_scalar(x[0], 0.3)))),
        (
            "matmul",
            vec![input(&[2, 5], 15, -1.0, 1.0), input(&[5, 3], 16, -1.0, 1.0)],
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        (
            "matmul(batched)",
            vec![input(&[2, 2, 5], 17, -1.0, 1.0), input(&[2, 5, 3], 18, -1.0, 1.0)],
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        (
            "conv2d(same)",
            vec![input(&[2, 2, 5, 4], 19, -1.0, 1.0), input(&[3, 2, 3, 3], 20, -1.0, 1.0)],
            Box::new(|t, x| t.conv2d(x[0], x[1], Padding::Same)),
        ),
        (
            "conv2d(valid)",
            vec![input(&[2, 5, 5], 21, -1.0, 1.0), input(&[2, 2, 3, 2], 22, -1.0, 1.0)],
            Box::new(|t, x| t.conv2d(x[0], x[1], Padding::Valid)),
        ),
        (
            "max_pool2d",
            // distinct values so the argmax is stable under ±h
            vec![Tensor::new([2, 4, 6], (0..48).map(|i| ((i * 37) % 48) as f64 * 0.1).collect()).unwrap()],
            Box::new(|t, x| t.max_pool2d(x[0], (2, 3))),
        ),
        ("relu", vec![kinkless.clone()], Box::new(|t, x| Ok(t.relu(x[0])))),
        ("sigmoid", vec![v5(23)], Box::new(|t, x| Ok(t.sigmoid(x[0])))),
        ("tanh", vec![v5(24)], Box::new(|t, x| Ok(t.tanh(x[0])))),
        ("exp", vec![v5(25)], Box::new(|t, x| Ok(t.exp(x[0])))),
        ("ln", vec![input(&[5], 26, 0.2, 2.0)], Box::new(|t, x| Ok(t.ln(x[0])))),
        ("sin", vec![v5(27)], Box::new(|t, x| Ok(t.sin(x[0])))),
        ("sqrt", vec![input(&[5], 28, 0.2, 2.0)], Box::new(|t, x| Ok(t.sqrt(x[0])))),
        ("clamp", vec![kinkless], Box::new(|t, x| Ok(t.clamp(x[0], -0.5, 0.5)))),
        (
            "softmax(axis=0)",
            vec![input(&[5, 2], 29, -2.0, 2.0)],
            Box::new(|t, x| t.softmax(x[0], 0)),
        ),
        (
            "softmax(axis=1)",
            vec![input(&[2, 5], 30, -2.0, 2.0)],
            Box::new(|t, x| t.softmax(x[0], 1)),
        ),
        ("sum(axis)", vec![input(&[2, 5, 3], 31, -1.0, 1.0)], Box::new(|t, x| t.sum(x[0], 1))),
        ("mean(axis)", vec![input(&[2, 5, 3], 32, -1.0, 1.0)], Box::new(|t, x| t.mean(x[0], 2))),
        ("sum_all", vec![v5(33)], Box::new(|t, x| Ok(t.sum_all(x[0])))),
        ("mean_all", vec![v5(34)], Box::new(|t, x| Ok(t.mean_all(x[0])))),
        (
            "transpose",
            vec![input(&[2, 5, 3], 35, -1.0, 1.0)],
            Box::new(|t, x| t.transpose(x[0], &[2, 0, 1])),
        ),
        ("reshape", vec![input(&[2, 5], 36, -1.0, 1.0)], Box::new(|t, x| t.reshape(x[0], &[5, 2]))),
        (
            "concat",
            vec![input(&[2, 5], 37, -1.0, 1.0), input(&[2, 3], 38, -1.0, 1.0)],
            Box::new(|t, x| t.concat(&[x[0], x[1]], 1)),
        ),
        ("slice", vec![input(&[3, 5], 39, -1.0, 1.0)], Box::new(|t, x| t.slice(x[0], 1, 1, 4))),
        (
            "layer_norm",
            vec![input(&[2, 5], 40, -1.0, 1.0)],
            Box::new(|t, x| t.layer_norm(x[0], 1e-5)),
        ),
        (
            "embedding_lookup",
            vec![input(&[4, 5], 41, -1.0, 1.0)],
            Box::new(|t, x| t.embedding_lookup(x[0], &[1, 3, 1])),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, build))| {
            let report = gradcheck(
                |t, x| {
                    let out = build(t, x)?;
                    weighted_sum(t, out, i as u64)
                },
                &inputs,
                opts,
            )?;
            Ok((name, report))
        })
        .collect()
}

//! Binary cross-entropy, masked BCE and the per-system joint objective.

use serde::{Deserialize, Serialize};
use sonotag_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelVector, OutputLayout, System, Taxonomy};

/// Training targets of one clip. Values may be soft (mixup, relabeling).
pub type TargetBundle = LabelVector;

/// Probabilities are clamped into `[P_MIN, 1 − P_MIN]` before the logs.
pub const P_MIN: f64 = 1e-7;

/// Relative weights of the coarse and fine terms for systems 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 1.0, fine: 1.0 }
    }
}

fn check_same(tape_shape: &[usize], other: &[usize], what: &str) -> Result<()> {
    if tape_shape != other {
        return Err(Error::Loss(format!("{what} shape {other:?} does not match predictions {tape_shape:?}")));
    }
    Ok(())
}

/// Elementwise `−[y·ln p + (1−y)·ln(1−p)]` on clamped `p`.
fn bce_terms<T: Scalar>(tape: &Tape<T>, p: Var, y: &Tensor<T>) -> Result<Var> {
    check_same(&tape.shape(p), y.shape(), "target")?;
    let pc = tape.clamp(p, T::of(P_MIN), T::of(1.0 - P_MIN));
    let ln_p = tape.ln(pc);
    let ln_q = tape.ln(tape.add_scalar(tape.neg(pc), T::one()));
    let y_pos = tape.constant(y.clone());
    let y_neg = tape.constant(y.map(|v| T::one() - v));
    let a = tape.mul(y_pos, ln_p)?;
    let b = tape.mul(y_neg, ln_q)?;
    Ok(tape.neg(tape.add(a, b)?))
}

/// Mean binary cross-entropy over every element.
pub fn bce<T: Scalar>(tape: &Tape<T>, p: Var, y: &Tensor<T>) -> Result<Var> {
    let terms = bce_terms(tape, p, y)?;
    Ok(tape.mean_all(terms))
}

/// `Σ m·bce / max(1, Σ m)`. Entries with `m = 0` add nothing to the value
/// and receive no gradient.
pub fn masked_bce<T: Scalar>(tape: &Tape<T>, p: Var, y: &Tensor<T>, m: &Tensor<T>) -> Result<Var> {
    check_same(&tape.shape(p), m.shape(), "mask")?;
    let terms = bce_terms(tape, p, y)?;
    let mask = tape.constant(m.clone());
    let kept = tape.mul(mask, terms)?;
    let norm = m.data().iter().map(|v| v.f64()).sum::<f64>().max(1.0);
    Ok(tape.scale(tape.sum_all(kept), T::of(1.0 / norm)))
}

/// The 37-slot target of a System 3 clip: coarse, fine with unknown tags
/// resolved to 0, then one other/unknown slot per multi-child category. An
/// other/unknown slot is the clip's own value when present, raised to the
/// largest `1 − mask` among the category's children.
pub fn system3_target(tax: &Taxonomy, t: &TargetBundle) -> Vec<f32> {
    let mut out = Vec::with_capacity(tax.n_coarse() + tax.n_fine() + tax.n_other());
    out.extend_from_slice(&t.coarse);
    out.extend(t.fine.iter().zip(&t.fine_mask).map(|(&y, &m)| y * m));
    for (slot, &coarse) in tax.other_unknown().iter().enumerate() {
        let given = t.other.as_ref().map_or(0.0, |o| o[slot]);
        let unknown = tax.children(coarse).iter().map(|&i| 1.0 - t.fine_mask[i]).fold(0.0f32, f32::max);
        out.push(given.max(unknown));
    }
    out
}

/// Scalar loss on the tape plus its logged components.
pub struct JointLoss {
    pub total: Var,
    /// `(name, value)` of each term before weighting.
    pub terms: Vec<(&'static str, f64)>,
}

/// Training objective for a batch `outputs: [N, dim]` of sigmoid outputs.
///
/// Systems 1 and 2 sum a BCE over the coarse slots and a masked BCE over the
/// fine slots (normalised over the whole batch). System 3 uses one BCE over
/// all 37 slots with [`system3_target`].
pub fn joint_loss<T: Scalar>(
    tape: &Tape<T>,
    tax: &Taxonomy,
    layout: &OutputLayout,
    outputs: Var,
    targets: &[TargetBundle],
    weights: LossWeights,
) -> Result<JointLoss> {
    let shape = tape.shape(outputs);
    let n = targets.len();
    if shape != [n, layout.dim()] {
        return Err(Error::Loss(format!(
            "outputs {shape:?} do not match {n} targets of layout dim {}",
            layout.dim()
        )));
    }
    let gather = |f: &dyn Fn(&TargetBundle) -> Vec<f32>, width: usize| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(n * width);
        for t in targets {
            let row = f(t);
            if row.len() != width {
                return Err(Error::Loss(format!("target row has {} values, expected {width}", row.len())));
            }
            data.extend(row.into_iter().map(|v| T::of(v as f64)));
        }
        Ok(Tensor::new([n, width], data)?)
    };

    if layout.system() == System::Three {
        let y = gather(&|t| system3_target(tax, t), layout.dim())?;
        let total = bce(tape, outputs, &y)?;
        let v = tape.value(total).item().f64();
        return Ok(JointLoss {
            total,
            terms: vec![("bce", v)],
        });
    }

    let cr = layout.coarse_range();
    let fr = layout.fine_range();
    let yc = gather(&|t| t.coarse.clone(), cr.len())?;
    let yf = gather(&|t| t.fine.clone(), fr.len())?;
    let mf = gather(&|t| t.fine_mask.clone(), fr.len())?;
    let pc = tape.slice(outputs, 1, cr.start, cr.end)?;
    let pf = tape.slice(outputs, 1, fr.start, fr.end)?;
    let coarse = bce(tape, pc, &yc)?;
    let fine = masked_bce(tape, pf, &yf, &mf)?;
    let total = tape.add(
        tape.scale(coarse, T::of(weights.coarse)),
        tape.scale(fine, T::of(weights.fine)),
    )?;
    let terms = vec![
        ("coarse", tape.value(coarse).item().f64()),
        ("fine", tape.value(fine).item().f64()),
    ];
    Ok(JointLoss { total, terms })
}

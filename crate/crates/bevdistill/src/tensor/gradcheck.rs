//! Central-finite-difference verification of tape gradients.

use indexmap::IndexMap;

use super::{Tape, Tensor};

/// Named leaf values a checked expression is built from: name -> (shape, data).
pub type LeafValues = IndexMap<String, (Vec<usize>, Vec<f64>)>;

/// Named leaf tensors handed to the expression builder.
pub type BoundLeaves = IndexMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Elements where one-sided slopes disagree (non-differentiable point);
    /// these are reported but do not fail the check.
    pub kinks: usize,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.leaves {
            writeln!(
                f,
                "{:30} max_rel_err={:.3e} kinks={} ({} elems) {}",
                l.name,
                l.max_rel_err,
                l.kinks,
                l.checked,
                if l.max_rel_err <= self.tol {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        write!(f, "overall: {}", if self.passed() { "pass" } else { "FAIL" })
    }
}

/// Compares the tape gradient of `build(leaves)` against central finite
/// differences of the same expression, element by element, for every leaf.
///
/// `build` must be deterministic; it is re-evaluated with perturbed constant
/// inputs, so any randomness inside it would invalidate the differences.
pub fn grad_check<F>(build: F, leaves: &LeafValues, step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&BoundLeaves) -> Tensor,
{
    // Analytic pass on a fresh tape.
    let tape = Tape::new();
    let bound: BoundLeaves = leaves
        .iter()
        .map(|(name, (shape, data))| (name.clone(), tape.leaf(shape, data.clone())))
        .collect();
    let loss = build(&bound);
    loss.backward().expect("grad_check: backward failed");
    let analytic: IndexMap<String, Vec<f64>> = bound
        .iter()
        .map(|(name, t)| (name.clone(), t.grad().expect("leaf grad")))
        .collect();

    let eval = |values: &LeafValues| -> f64 {
        let consts: BoundLeaves = values
            .iter()
            .map(|(n, (s, d))| (n.clone(), Tensor::constant(s, d.clone())))
            .collect();
        build(&consts).item()
    };
    let f0 = eval(leaves);

    let mut reports = Vec::new();
    for (name, (_, data)) in leaves {
        let grad = &analytic[name];
        let mut max_rel = 0.0f64;
        let mut kinks = 0;
        for i in 0..data.len() {
            let mut plus = leaves.clone();
            plus.get_mut(name).unwrap().1[i] += step;
            let fp = eval(&plus);
            let mut minus = leaves.clone();
            minus.get_mut(name).unwrap().1[i] -= step;
            let fm = eval(&minus);
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > tol {
                // A kink (e.g. a relu boundary crossed by the perturbation)
                // shows up as disagreeing one-sided slopes, and the
                // disagreement it causes is about twice the error it leaves
                // in the central difference. A wrong analytic gradient at a
                // smooth point gives the opposite signature: large error,
                // one-sided slopes in agreement (|sp - sm| ~ step * |f''|).
                // So only excuse an element when the numerical slopes
                // disagree by at least as much as the error itself.
                let sp = (fp - f0) / step;
                let sm = (f0 - fm) / step;
                let disagreement = (sp - sm).abs() / sp.abs().max(sm.abs()).max(1e-8);
                if disagreement > rel.max(2.0 * tol) {
                    kinks += 1;
                    continue;
                }
            }
            max_rel = max_rel.max(rel);
        }
        reports.push(LeafReport {
            name: name.clone(),
            max_rel_err: max_rel,
            kinks,
            checked: data.len(),
        });
    }
    GradCheckReport {
        leaves: reports,
        tol,
        step,
    }
}

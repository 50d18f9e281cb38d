//! Central finite-difference gradient checking.
//!
//! For a case `f` mapping input tensors to an output node, the checker forms
//! a scalar loss `mean(f(x) * R)` with a fixed random projection `R`, takes
//! the analytic gradient from [`Tape::backward`], and compares the
//! directional derivative `sum(grad_i . v_i)` against the central difference
//! `(L(x + h v) - L(x - h v)) / 2h` for several random unit directions `v`.
//! Everything is seeded, so reports are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Settings for one checking run.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error between analytic and numeric values.
    pub tolerance: f64,
    /// Number of random directions per case.
    pub directions: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, directions: 3, seed: 0x9e3779b97f4a7c15 }
    }
}

/// Outcome of checking one case.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for CaseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<26} max_rel_err {:>12.3e} tol {:>8.1e} {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Relative error with a floor so near-zero derivative pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl GradCheck {
    /// Checks one case. `f` rebuilds the graph from the given input leaves;
    /// it must be a pure function of the leaf values.
    pub fn check<F>(&self, name: &str, inputs: &[Tensor], f: F) -> Result<CaseReport>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        self.check_scaled(name, inputs, f, 1.0)
    }

    /// Fault-injection variant: analytic directional derivatives are
    /// multiplied by `grad_scale` before comparison. Used to confirm the
    /// checker flags a corrupted gradient rule (`grad_scale != 1`).
    pub fn check_scaled<F>(
        &self,
        name: &str,
        inputs: &[Tensor],
        f: F,
        grad_scale: f64,
    ) -> Result<CaseReport>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));

        // Analytic pass: build, project to a scalar, backprop.
        let mut tape = Tape::new();
        let leaf_ids: Vec<NodeId> =
            inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &leaf_ids)?;
        let projection = Tensor::randn(tape.value(out).shape(), &mut rng);
        let proj_id = tape.constant(projection.clone());
        let weighted = tape.mul(out, proj_id)?;
        let loss = tape.mean(weighted)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = leaf_ids
            .iter()
            .zip(inputs)
            .map(|(&id, input)| {
                tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()))
            })
            .collect();

        // Numeric loss at shifted inputs, same projection, no tape gradients.
        let eval = |shifted: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> =
                shifted.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &ids)?;
            let proj_id = tape.constant(projection.clone());
            let weighted = tape.mul(out, proj_id)?;
            let loss = tape.mean(weighted)?;
            Ok(tape.value(loss).data()[0])
        };

        let mut max_rel_err: f64 = 0.0;
        for _ in 0..self.directions {
            // One random unit direction across the concatenation of all
            // inputs.
            let mut dirs: Vec<Tensor> =
                inputs.iter().map(|t| Tensor::randn(t.shape(), &mut rng)).collect();
            let norm: f64 = dirs
                .iter()
                .flat_map(|d| d.data().iter().map(|v| v * v))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for d in &mut dirs {
                for v in d.data_mut() {
                    *v /= norm;
                }
            }
            let analytic: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                * grad_scale;
            let shift = |sign: f64| -> Result<f64> {
                let shifted: Vec<Tensor> = inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(x, d)| {
                        let mut s = x.clone();
                        s.axpy(sign * self.step, d)?;
                        Ok(s)
                    })
                    .collect::<Result<_>>()?;
                eval(&shifted)
            };
            let numeric = (shift(1.0)? - shift(-1.0)?) / (2.0 * self.step);
            max_rel_err = max_rel_err.max(relative_error(analytic, numeric));
        }
        Ok(CaseReport { name: name.to_string(), max_rel_err, tolerance: self.tolerance })
    }
}

/// A named, self-contained check case.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>,
}

impl Case {
    pub fn new<F>(name: &str, inputs: Vec<Tensor>, build: F) -> Self
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static,
    {
        Self { name: name.to_string(), inputs, build: Box::new(build) }
    }
}

/// Runs a batch of cases with shared settings.
pub fn run_cases(cases: &[Case], cfg: &GradCheck) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .map(|c| cfg.check(&c.name, &c.inputs, |tape, ids| (c.build)(tape, ids)))
        .collect()
}

/// One check case per tape operation, exercising every gradient rule.
pub fn standard_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    // Keep |x| away from the kink at 0 so a 1e-5 step never crosses it.
    let away_from_zero = |t: Tensor| t.map(|v| v.signum() * (v.abs() + 0.5));
    let positive = |t: Tensor| t.map(|v| v.abs() + 0.5);

    vec![
        Case::new("add", vec![r(&[3, 4]), r(&[3, 4])], |t, ids| t.add(ids[0], ids[1])),
        Case::new("sub", vec![r(&[3, 4]), r(&[3, 4])], |t, ids| t.sub(ids[0], ids[1])),
        Case::new("mul", vec![r(&[3, 4]), r(&[3, 4])], |t, ids| t.mul(ids[0], ids[1])),
        Case::new("scale", vec![r(&[3, 4])], |t, ids| t.scale(ids[0], -1.7)),
        Case::new("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, ids| t.matmul(ids[0], ids[1])),
        Case::new("transpose", vec![r(&[3, 4])], |t, ids| t.transpose(ids[0])),
        Case::new("reshape", vec![r(&[3, 4])], |t, ids| t.reshape(ids[0], &[2, 6])),
        Case::new("concat_axis0", vec![r(&[2, 3]), r(&[4, 3])], |t, ids| {
            t.concat(0, &[ids[0], ids[1]])
        }),
        Case::new("concat_axis1", vec![r(&[2, 3]), r(&[2, 2])], |t, ids| {
            t.concat(1, &[ids[0], ids[1]])
        }),
        Case::new("slice0", vec![r(&[5, 3])], |t, ids| t.slice0(ids[0], 1, 3)),
        Case::new("conv2d", vec![r(&[2, 5, 6]), r(&[3, 2, 3, 3])], |t, ids| {
            t.conv2d(ids[0], ids[1], (1, 1), (1, 1))
        }),
        Case::new("conv2d_stride2", vec![r(&[2, 6, 8]), r(&[4, 2, 2, 2])], |t, ids| {
            t.conv2d(ids[0], ids[1], (2, 2), (0, 0))
        }),
        Case::new("group_norm", vec![r(&[4, 3, 3])], |t, ids| {
            t.group_norm(ids[0], 2, 1e-5)
        }),
        Case::new("add_vec_axis0", vec![r(&[3, 2, 2]), r(&[3])], |t, ids| {
            t.add_vec(ids[0], ids[1], 0)
        }),
        Case::new("add_vec_axis1", vec![r(&[3, 4]), r(&[4])], |t, ids| {
            t.add_vec(ids[0], ids[1], 1)
        }),
        Case::new("mul_vec_axis0", vec![r(&[3, 2, 2]), r(&[3])], |t, ids| {
            t.mul_vec(ids[0], ids[1], 0)
        }),
        Case::new("mul_vec_axis1", vec![r(&[3, 4]), r(&[4])], |t, ids| {
            t.mul_vec(ids[0], ids[1], 1)
        }),
        Case::new("softmax_rows", vec![r(&[3, 5])], |t, ids| t.softmax(ids[0], 1)),
        Case::new("softmax_cols", vec![r(&[3, 5])], |t, ids| t.softmax(ids[0], 0)),
        Case::new("log_softmax", vec![r(&[3, 5])], |t, ids| t.log_softmax(ids[0])),
        Case::new("silu", vec![r(&[3, 4])], |t, ids| t.silu(ids[0])),
        Case::new("abs", vec![away_from_zero(r(&[3, 4]))], |t, ids| t.abs(ids[0])),
        Case::new("log", vec![positive(r(&[3, 4]))], |t, ids| t.log(ids[0])),
        Case::new("mean", vec![r(&[3, 4])], |t, ids| t.mean(ids[0])),
        Case::new("sum", vec![r(&[3, 4])], |t, ids| t.sum(ids[0])),
        Case::new("space_to_depth", vec![r(&[1, 4, 6])], |t, ids| {
            t.space_to_depth(ids[0], 2)
        }),
        Case::new("depth_to_space", vec![r(&[4, 2, 3])], |t, ids| {
            t.depth_to_space(ids[0], 2)
        }),
        Case::new(
            "attention",
            vec![r(&[4, 3]), r(&[5, 3]), r(&[5, 2])],
            |t, ids| t.attention(ids[0], ids[1], ids[2], 1.0 / 3.0_f64.sqrt()),
        ),
    ]
}

//! Set matching between predicted and ground-truth moments, and the sigmoid
//! contrastive objective.
//!
//! Three cosine-similarity matrices (visual↔language, start↔start, end↔end)
//! are squashed by a sigmoid and multiplied entry-wise; the negated product is
//! the assignment cost. After matching, every (query, target) pair becomes an
//! independent binary problem: `+1` for matched pairs, `−1` otherwise.

mod hungarian;

pub use hungarian::{solve as hungarian_solve, AssignCost, Assignment};

use crate::error::{Error, Result};
use crate::model::{MomentPrediction, PredictionVars};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Inputs to the similarity step must be unit rows within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Ground-truth moments `Y`: one unit row per narration in each matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet<S> {
    /// `M × C` language (concept) vectors.
    pub lang: Tensor<S>,
    /// `M × d` temporal embeddings of the sampled starts.
    pub te_start: Tensor<S>,
    /// `M × d` temporal embeddings of the sampled ends.
    pub te_end: Tensor<S>,
}

impl<S: Scalar> GroundTruthSet<S> {
    pub fn len(&self) -> usize {
        self.lang.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The three `N × M` cosine matrices, in channel order visual, start, end.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices<S> {
    pub visual: Tensor<S>,
    pub start: Tensor<S>,
    pub end: Tensor<S>,
}

impl<S: Scalar> SimilarityMatrices<S> {
    pub fn channels(&self) -> [&Tensor<S>; 3] {
        [&self.visual, &self.start, &self.end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<S> {
    pub assignment: Assignment,
    pub sims: SimilarityMatrices<S>,
    pub cost: Tensor<S>,
}

/// Contrastive temperature `t = exp(log_t)` and bias `b`, shared by all channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScales<S> {
    pub log_temperature: S,
    pub bias: S,
}

impl<S: Scalar> LossScales<S> {
    pub fn new(temperature: S, bias: S) -> Result<Self> {
        if !(temperature > S::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            log_temperature: temperature.ln(),
            bias,
        })
    }

    pub fn temperature(&self) -> S {
        self.log_temperature.exp()
    }
}

fn check_unit_rows<S: Scalar>(name: &str, t: &Tensor<S>) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|&x| x * x).sum::<S>().sqrt().as_f64();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{name} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Pairwise dot products (cosines, given unit rows) for the three channels.
pub fn similarity_matrices<S: Scalar>(
    pred: &MomentPrediction<S>,
    gt: &GroundTruthSet<S>,
) -> Result<SimilarityMatrices<S>> {
    for (name, t) in [
        ("predicted visual", &pred.visual),
        ("predicted start", &pred.te_start),
        ("predicted end", &pred.te_end),
        ("ground-truth language", &gt.lang),
        ("ground-truth start", &gt.te_start),
        ("ground-truth end", &gt.te_end),
    ] {
        check_unit_rows(name, t)?;
    }
    Ok(SimilarityMatrices {
        visual: pred.visual.matmul_t(&gt.lang)?,
        start: pred.te_start.matmul_t(&gt.te_start)?,
        end: pred.te_end.matmul_t(&gt.te_end)?,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `cost[i][j] = −σ(s_visual)·σ(s_start)·σ(s_end)`; no temperature is applied.
pub fn build_cost<S: Scalar>(sims: &SimilarityMatrices<S>) -> Result<Tensor<S>> {
    let shape = sims.visual.shape();
    if sims.start.shape() != shape || sims.end.shape() != shape {
        return Err(Error::Shape {
            op: "build_cost",
            lhs: shape.to_vec(),
            rhs: sims.start.shape().to_vec(),
        });
    }
    let data = sims
        .visual
        .data()
        .iter()
        .zip(sims.start.data())
        .zip(sims.end.data())
        .map(|((&a, &b), &c)| {
            S::of(-(sigmoid(a.as_f64()) * sigmoid(b.as_f64()) * sigmoid(c.as_f64())))
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Optimal injective assignment of the `M` columns of an `N × M` cost matrix.
pub fn hungarian<S: Scalar>(cost: &Tensor<S>) -> Result<Assignment> {
    let (n, m) = cost.dims2()?;
    hungarian_solve(cost.data(), n, m)
}

/// Similarities, cost and assignment in one go.
pub fn match_moments<S: Scalar>(
    pred: &MomentPrediction<S>,
    gt: &GroundTruthSet<S>,
) -> Result<MatchResult<S>> {
    let sims = similarity_matrices(pred, gt)?;
    let cost = build_cost(&sims)?;
    let assignment = hungarian(&cost)?;
    Ok(MatchResult {
        assignment,
        sims,
        cost,
    })
}

/// `±1` label matrix for an assignment.
pub fn label_matrix<S: Scalar>(assignment: &Assignment) -> Result<Tensor<S>> {
    let (n, m) = (assignment.queries, assignment.targets());
    let mut z = Tensor::full(&[n, m], -S::one());
    for (j, &i) in assignment.query_of.iter().enumerate() {
        z.set(i, j, S::one());
    }
    Ok(z)
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Value-only loss: for each channel the mean over pairs of
/// `−log σ(z·(t·s + b))`, summed over the three channels.
pub fn sigmoid_contrastive_loss<S: Scalar>(
    sims: &SimilarityMatrices<S>,
    assignment: &Assignment,
    scales: &LossScales<S>,
) -> Result<S> {
    let t = scales.temperature().as_f64();
    let b = scales.bias.as_f64();
    let mut total = 0.0;
    for s in sims.channels() {
        let (n, m) = s.dims2()?;
        if n != assignment.queries || m != assignment.targets() {
            return Err(Error::Shape {
                op: "sigmoid_contrastive_loss",
                lhs: vec![n, m],
                rhs: vec![assignment.queries, assignment.targets()],
            });
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..m {
                let z = if assignment.is_matched(i, j) { 1.0 } else { -1.0 };
                sum += log1p_exp(-z * (t * s.get(i, j).as_f64() + b));
            }
        }
        total += sum / (n * m) as f64;
    }
    Ok(S::of(total))
}

/// Handles of the three similarity matrices on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityVars {
    pub visual: Var,
    pub start: Var,
    pub end: Var,
}

impl SimilarityVars {
    pub fn read<S: Scalar>(&self, tape: &Tape<S>) -> SimilarityMatrices<S> {
        SimilarityMatrices {
            visual: tape.value(self.visual).clone().with_grad(false),
            start: tape.value(self.start).clone().with_grad(false),
            end: tape.value(self.end).clone().with_grad(false),
        }
    }
}

/// Ground truth recorded on a tape (the temporal rows may depend on the table).
#[derive(Clone, Copy, Debug)]
pub struct GroundTruthVars {
    pub lang: Var,
    pub te_start: Var,
    pub te_end: Var,
}

pub fn similarity_vars<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &PredictionVars,
    gt: &GroundTruthVars,
) -> Result<SimilarityVars> {
    Ok(SimilarityVars {
        visual: tape.matmul_t(pred.visual, gt.lang)?,
        start: tape.matmul_t(pred.te_start, gt.te_start)?,
        end: tape.matmul_t(pred.te_end, gt.te_end)?,
    })
}

/// Differentiable version of [`sigmoid_contrastive_loss`]; `log_temperature`
/// and `bias` are `1 × 1` vars.
pub fn sigmoid_contrastive_loss_var<S: Scalar>(
    tape: &mut Tape<S>,
    sims: &SimilarityVars,
    assignment: &Assignment,
    log_temperature: Var,
    bias: Var,
) -> Result<Var> {
    let labels = tape.constant(label_matrix(assignment)?);
    let t = tape.exp(log_temperature);
    let mut total: Option<Var> = None;
    for s in [sims.visual, sims.start, sims.end] {
        let scaled = tape.mul(s, t)?;
        let logits = tape.add(scaled, bias)?;
        let signed = tape.mul(logits, labels)?;
        let ll = tape.log_sigmoid(signed);
        let mean = tape.mean(ll);
        let channel = tape.neg(mean);
        total = Some(match total {
            None => channel,
            Some(acc) => tape.add(acc, channel)?,
        });
    }
    Ok(total.expect("three channels"))
}

/// Mean similarity of matched and unmatched pairs for one channel.
pub fn pair_means<S: Scalar>(sim: &Tensor<S>, assignment: &Assignment) -> (f64, f64) {
    let (mut ms, mut mc, mut us, mut uc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..sim.rows() {
        for j in 0..sim.cols() {
            let v = sim.get(i, j).as_f64();
            if assignment.is_matched(i, j) {
                ms += v;
                mc += 1;
            } else {
                us += v;
                uc += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
    (mean(ms, mc), mean(us, uc))
}

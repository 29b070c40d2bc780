//! Central-difference verification of backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Perturbation applied in each direction.
    pub eps: f64,
    /// Coordinates probed per input (all of them when the input is smaller).
    pub coords_per_input: usize,
    /// Smallest denominator of the relative error, so that gradients that
    /// are zero in exact arithmetic do not amplify round-off.
    pub floor: f64,
    /// Denominator floor relative to the RMS of the input's analytic
    /// gradient. Central differences carry an absolute round-off of about
    /// `1e-16 |f| / eps`, which swamps coordinates whose gradient is orders
    /// of magnitude below the typical one.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_input: 32,
            floor: 1e-6,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NnError::NonFinite("checked function".into()))
    }
}

/// Compares `analytic` gradients of the scalar function `eval` against
/// central differences on a random subset of coordinates of every input.
pub fn compare_gradients<F>(
    mut eval: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: CheckOptions,
) -> Result<CheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if opts.eps <= 0.0 {
        return Err(NnError::InvalidArgument("eps must be positive".into()));
    }
    if analytic.len() != inputs.len() {
        return Err(NnError::InvalidArgument(format!(
            "{} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    finite(eval(inputs)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let rms = (analytic[i].dot(&analytic[i])? / n.max(1) as f64).sqrt();
        let floor = opts.floor.max(opts.scale_floor * rms);
        let coords: Vec<usize> = if n <= opts.coords_per_input {
            (0..n).collect()
        } else {
            (0..opts.coords_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.eps;
            let plus = finite(eval(&work)?)?;
            work[i].data_mut()[c] = orig - opts.eps;
            let minus = finite(eval(&work)?)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i].data()[c];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Builds `op` on fresh leaves for `inputs`, differentiates it and checks the
/// result numerically. Tensor-valued outputs are reduced to a scalar by an
/// inner product with fixed random weights.
pub fn finite_diff_check_with<F>(op: F, inputs: &[Tensor<f64>], opts: CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut build = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = op(&mut g, &ids)?;
        if !g.value(out).is_finite() {
            return Err(NnError::NonFinite("checked operation".into()));
        }
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let shape = g.value(out).shape().to_vec();
            let w = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
                Tensor::randn(&shape, 1.0, &mut rng)
            });
            g.dot_const(out, w)?
        };
        Ok((g, ids, loss))
    };
    let (g, ids, loss) = build(inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    compare_gradients(
        |vals| {
            let (g, _, loss) = build(vals)?;
            Ok(g.value(loss).data()[0])
        },
        inputs,
        &analytic,
        opts,
    )
}

/// Maximum relative gradient error of `op` at `inputs` with default options
/// and the given perturbation.
pub fn finite_diff_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    Ok(finite_diff_check_with(
        op,
        inputs,
        CheckOptions {
            eps,
            ..Default::default()
        },
    )?
    .max_rel_error)
}

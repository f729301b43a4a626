//! Finite-difference gradient verification.
//!
//! Analytic gradients from the tape are compared against central differences
//! ( f(x+h) - f(x-h) ) / 2h computed at f64. The error measure is relative:
//! |a - n| / max(max(|a|, |n|), 1e-6), which behaves like an absolute check
//! near zero and a relative one elsewhere.

use crate::error::{Error, Result};
use crate::graph::{BufId, Graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckConfig {
    /// Central-difference half-step.
    pub h: f64,
    /// Maximum tolerated relative error per coordinate.
    pub tol: f64,
    /// Check every `stride`-th coordinate of each tensor (1 = all).
    pub stride: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            h: 1e-4,
            tol: 1e-4,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub coords_checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// First few failing coordinates, for diagnostics.
    pub failure_log: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares supplied analytic gradients against central differences of a
/// scalar loss function of the parameter list.
pub fn check<F>(
    params: &mut [Tensor<f64>],
    analytic: &[Vec<f64>],
    loss: &mut F,
    cfg: &CheckConfig,
) -> Result<GradCheck>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::GradCheck(format!(
            "{} analytic gradients for {} tensors",
            analytic.len(),
            params.len()
        )));
    }
    let stride = cfg.stride.max(1);
    let mut out = GradCheck {
        coords_checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        failure_log: Vec::new(),
    };
    for pi in 0..params.len() {
        if analytic[pi].len() != params[pi].numel() {
            return Err(Error::GradCheck(format!(
                "tensor {pi}: analytic gradient has {} values for {} coords",
                analytic[pi].len(),
                params[pi].numel()
            )));
        }
        for ci in (0..params[pi].numel()).step_by(stride) {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + cfg.h;
            let up = loss(params)?;
            params[pi].data_mut()[ci] = orig - cfg.h;
            let down = loss(params)?;
            params[pi].data_mut()[ci] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite loss near tensor {pi} coord {ci}: {up}, {down}"
                )));
            }
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic[pi][ci];
            let e = rel_err(a, numeric);
            out.coords_checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = pi;
                out.worst_coord = ci;
                out.worst_analytic = a;
                out.worst_numeric = numeric;
            }
            if e > cfg.tol {
                out.failures += 1;
                if out.failure_log.len() < 10 {
                    out.failure_log.push(format!(
                        "tensor {pi} coord {ci}: analytic {a:.3e} vs numeric {numeric:.3e} (rel {e:.3e})"
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Gradient-checks a graph construction: `build` registers ops over the
/// given parameter buffers and returns the scalar loss buffer. The same
/// closure drives both the analytic backward pass and every perturbed
/// forward, so it must be deterministic in the parameter values.
pub fn check_build<B>(
    params: &mut [Tensor<f64>],
    build: &mut B,
    cfg: &CheckConfig,
) -> Result<GradCheck>
where
    B: FnMut(&mut Graph<f64>, &[BufId]) -> Result<BufId>,
{
    let forward = |ps: &[Tensor<f64>], build: &mut B| -> Result<(Graph<f64>, Vec<BufId>, BufId)> {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<BufId> = ps.iter().map(|p| g.param(p, true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.shape(loss) != (1, 1) {
            return Err(Error::GradCheck(format!(
                "loss buffer has shape {:?}, expected scalar",
                g.shape(loss)
            )));
        }
        Ok((g, ids, loss))
    };

    let analytic: Vec<Vec<f64>> = {
        let (mut g, ids, loss) = forward(params, build)?;
        g.backward(loss);
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; params[i].numel()])
            })
            .collect()
    };

    let mut loss_fn = |ps: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = forward(ps, build)?;
        Ok(g.scalar(loss))
    };
    check(params, &analytic, &mut loss_fn, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AttnMask;
    use crate::rng::Streams;

    fn randt(shape: Vec<usize>, seed: u64, name: &str) -> Tensor<f64> {
        let mut rng = Streams::new(seed).stream(name);
        Tensor::randn(shape, 0.5, &mut rng)
    }

    #[test]
    fn linear_softmax_ce_chain_checks_out() {
        let mut params = vec![randt(vec![3, 4], 1, "w"), randt(vec![1, 4], 1, "b")];
        let x = randt(vec![2, 3], 2, "x");
        let labels = vec![1u32, 3];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let xi = g.input(2, 3, x.data().to_vec());
            let h = g.matmul(xi, ids[0], false);
            let h = g.add_row(h, ids[1]);
            let p = g.softmax_rows(h, &AttnMask::Full);
            g.cross_entropy(p, &labels, u32::MAX, 0.1)
        };
        let r = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r.passed(), "max rel err {} {:?}", r.max_rel_err, r.failure_log);
        assert_eq!(r.failures, 0);
        assert!(r.coords_checked >= 16);
    }

    #[test]
    fn layer_norm_and_gelu_check_out() {
        let mut params = vec![
            randt(vec![4, 5], 3, "x"),
            randt(vec![1, 5], 4, "gain"),
            randt(vec![1, 5], 5, "bias"),
        ];
        let labels = vec![0u32, 2, 4, 1];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let n = g.layer_norm(ids[0], ids[1], ids[2]);
            let a = g.gelu(n);
            let p = g.softmax_rows(a, &AttnMask::Full);
            g.cross_entropy(p, &labels, u32::MAX, 0.0)
        };
        let r = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r.passed(), "max rel err {} {:?}", r.max_rel_err, r.failure_log);
    }

    #[test]
    fn attention_composite_checks_out() {
        let mut params = vec![
            randt(vec![3, 4], 6, "q"),
            randt(vec![5, 4], 7, "k"),
            randt(vec![5, 4], 8, "v"),
        ];
        let labels = vec![0u32, 3, 1];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let o = g.scaled_dot_attention(ids[0], ids[1], ids[2], &AttnMask::Full)?;
            let p = g.softmax_rows(o, &AttnMask::Full);
            g.cross_entropy(p, &labels, u32::MAX, 0.05)
        };
        let r = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r.passed(), "max rel err {} {:?}", r.max_rel_err, r.failure_log);
    }

    #[test]
    fn embedding_select_and_reshape_ops_check_out() {
        let mut params = vec![
            randt(vec![4, 3], 9, "static"),
            randt(vec![2, 3], 10, "dynamic"),
        ];
        let ids_mixed = [0u32, 5, 2, 4];
        let labels = vec![1u32, 0, 2, 1];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let e = g.select_embed(ids[0], Some(ids[1]), &ids_mixed, 4);
            let mean = g.mean_rows(e); // (1, 3)
            let rows = g.concat_rows(&[e, mean]); // (5, 3)
            let sl = g.slice_cols(rows, 0, 3);
            let p = g.softmax_rows(sl, &AttnMask::Full);
            let labels5 = [labels.as_slice(), &[2u32]].concat();
            g.cross_entropy(p, &labels5, u32::MAX, 0.0)
        };
        let r = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r.passed(), "max rel err {} {:?}", r.max_rel_err, r.failure_log);
    }

    #[test]
    fn causal_mask_gradients_check_out() {
        let mut params = vec![randt(vec![3, 3], 11, "scores")];
        let labels = vec![0u32, 1, 2];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let p = g.softmax_rows(ids[0], &AttnMask::Causal);
            g.cross_entropy(p, &labels, u32::MAX, 0.0)
        };
        let r = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r.passed(), "max rel err {} {:?}", r.max_rel_err, r.failure_log);
    }

    #[test]
    fn detects_wrong_gradients() {
        let mut params = vec![randt(vec![2, 2], 12, "w")];
        let labels = vec![0u32, 1];
        // Analytic pass.
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let p = g.softmax_rows(ids[0], &AttnMask::Full);
            g.cross_entropy(p, &labels, u32::MAX, 0.0)
        };
        let mut g: Graph<f64> = Graph::new();
        let id = g.param(&params[0], true);
        let p = g.softmax_rows(id, &AttnMask::Full);
        let loss = g.cross_entropy(p, &labels, u32::MAX, 0.0).unwrap();
        g.backward(loss);
        // Corrupt the analytic gradient by 10x.
        let bad: Vec<Vec<f64>> = vec![g.grad(id).unwrap().iter().map(|v| v * 10.0).collect()];
        let mut loss_fn = |ps: &[Tensor<f64>]| -> Result<f64> {
            let mut g: Graph<f64> = Graph::new();
            let id = g.param(&ps[0], true);
            let p = g.softmax_rows(id, &AttnMask::Full);
            let l = g.cross_entropy(p, &labels, u32::MAX, 0.0)?;
            Ok(g.scalar(l))
        };
        let r = check(&mut params, &bad, &mut loss_fn, &CheckConfig::default()).unwrap();
        assert!(!r.passed(), "corrupted gradients must fail");
        // And the honest one passes.
        let r2 = check_build(&mut params, &mut build, &CheckConfig::default()).unwrap();
        assert!(r2.passed());
    }

    #[test]
    fn stride_subsampling_counts_coords() {
        let mut params = vec![randt(vec![4, 4], 13, "w")];
        let labels = vec![0u32, 1, 2, 3];
        let mut build = |g: &mut Graph<f64>, ids: &[BufId]| {
            let p = g.softmax_rows(ids[0], &AttnMask::Full);
            g.cross_entropy(p, &labels, u32::MAX, 0.0)
        };
        let cfg = CheckConfig {
            stride: 3,
            ..CheckConfig::default()
        };
        let r = check_build(&mut params, &mut build, &cfg).unwrap();
        assert_eq!(r.coords_checked, 6); // ceil(16 / 3)
        assert!(r.passed());
    }
}

//! Training objectives.
//!
//! The generalized-KS generator loss scans a level grid built from the
//! critic values of both batches: at every threshold, the fraction of each
//! batch inside the critic's sublevel set gives a coverage curve, and the
//! loss aggregates the absolute coverage gaps over the grid, once for
//! sublevel sets of the critic and once for sublevel sets of its negation.
//! Indicators go through the straight-through estimator so the whole thing
//! stays differentiable; thresholds are detached (gradients flow only
//! through the critic argument of each indicator).
//!
//! Alongside it: the critic objective and its score penalty (double
//! backprop), the evaluation-only plug-in KS estimate, and the GAN /
//! WGAN-GP baseline losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, indicator_ste, Var};
use crate::error::{Error, Result};
use crate::nn::BoundMlp;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Aggregation over the level grid: the faithful maximum, or the
/// sample-average relaxation used for training by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Max,
    Mean,
}

/// How indicators behave in the backward pass. `Hard` is the pass-through
/// straight-through estimator; `HardClipped` zeroes the surrogate outside a
/// window around the threshold; `Smooth` replaces the indicator with
/// `sigmoid((lambda - c) / tau)` and exists for gradient checking, not
/// training. Smooth mode keeps the thresholds attached to the graph (the
/// sorted union is a fixed permutation of the critic values), so the whole
/// objective is a differentiable function of the critic outputs and finite
/// differences of the loss agree with the recorded gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IndicatorKind {
    Hard,
    HardClipped(f64),
    Smooth(f64),
}

#[derive(Debug)]
pub struct GeneratorLossParts {
    /// Differentiable total, `loss_f + loss_g`.
    pub total: Var,
    pub loss_f: f64,
    pub loss_g: f64,
    /// Grid threshold attaining each part's maximum (max mode only).
    pub argmax_lambda_f: Option<f64>,
    pub argmax_lambda_g: Option<f64>,
}

fn flat_values(v: &Var) -> Vec<f64> {
    v.with_value(|t| t.data().to_vec())
}

/// Coverage-gap column over the level grid: entry i is
/// `|mean(1[cg <= lam_i]) - mean(1[cf <= lam_i])|` under the chosen
/// indicator. `cf`/`cg` come in as (1, n) rows, `lam` as an (m, 1) column.
fn coverage_gap(cf: &Var, cg: &Var, lam: &Var, kind: IndicatorKind) -> Result<Var> {
    let n_f = cf.shape()[1];
    let n_g = cg.shape()[1];
    let indicator = |c: &Var, n: usize| -> Result<Var> {
        let grid = match kind {
            IndicatorKind::Hard => indicator_ste(c, lam, None)?,
            IndicatorKind::HardClipped(r) => indicator_ste(c, lam, Some(r))?,
            IndicatorKind::Smooth(tau) => {
                let m = lam.shape()[0];
                let shape = [m, n];
                let cb = c.broadcast_to(&shape)?;
                let lb = lam.broadcast_to(&shape)?;
                lb.sub(&cb)?.scale(1.0 / tau).sigmoid()
            }
        };
        let m = grid.shape()[0];
        Ok(grid.sum_to(&[m, 1])?.scale(1.0 / n as f64))
    };
    let mean_g = indicator(cg, n_g)?;
    let mean_f = indicator(cf, n_f)?;
    Ok(mean_g.sub(&mean_f)?.abs())
}

/// Aggregate a gap column per the mode; max mode selects the first (smallest
/// lambda) maximizer through a one-hot product so gradients flow only into
/// the attaining row.
fn aggregate(gap: &Var, lambdas: &[f64], mode: Mode) -> Result<(Var, Option<f64>)> {
    match mode {
        Mode::Mean => Ok((gap.mean(), None)),
        Mode::Max => {
            let vals = flat_values(gap);
            let mut best = 0usize;
            for (i, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = i;
                }
            }
            let mut onehot = vec![0.0; vals.len()];
            onehot[best] = 1.0;
            let oh = gap
                .graph()
                .constant(Tensor::new(vec![vals.len(), 1], onehot)?);
            Ok((gap.mul(&oh)?.sum(), Some(lambdas[best])))
        }
    }
}

/// Generalized-KS generator objective over both level-set orientations.
///
/// `c_f` and `c_g` are critic outputs on the target and generated batches
/// (any shape; flattened). The level grid is the sorted union of both value
/// sets and is detached from the graph.
pub fn generator_loss(c_f: &Var, c_g: &Var, mode: Mode, kind: IndicatorKind) -> Result<GeneratorLossParts> {
    let (vf, vg) = (flat_values(c_f), flat_values(c_g));
    let (n_f, n_g) = (vf.len(), vg.len());
    if n_f == 0 || n_g == 0 {
        return Err(Error::EmptyBatch("generator_loss".to_string()));
    }
    let merged: Vec<f64> = vf.iter().chain(&vg).copied().collect();
    let mut order: Vec<usize> = (0..merged.len()).collect();
    order.sort_unstable_by(|&a, &b| merged[a].partial_cmp(&merged[b]).expect("finite critic values"));
    let lambdas: Vec<f64> = order.iter().map(|&i| merged[i]).collect();
    let m = lambdas.len();

    let graph = c_f.graph().clone();
    let cf_row = c_f.reshape(&[1, n_f])?;
    let cg_row = c_g.reshape(&[1, n_g])?;
    let lam = match kind {
        // Thresholds are detached: gradients flow only through the critic
        // argument of each indicator.
        IndicatorKind::Hard | IndicatorKind::HardClipped(_) => {
            graph.constant(Tensor::new(vec![m, 1], lambdas.clone())?)
        }
        // Gradient-check mode: the grid is the sort permutation applied to
        // the live critic values, so it moves with them.
        IndicatorKind::Smooth(_) => {
            let mut perm = vec![0.0f64; m * m];
            for (row, &src) in order.iter().enumerate() {
                perm[row * m + src] = 1.0;
            }
            let p = graph.constant(Tensor::new(vec![m, m], perm)?);
            let all = crate::autodiff::concat(
                &[&c_f.reshape(&[n_f, 1])?, &c_g.reshape(&[n_g, 1])?],
                0,
            )?;
            p.matmul(&all)?
        }
    };

    let gap_f = coverage_gap(&cf_row, &cg_row, &lam, kind)?;
    let (loss_f, argmax_f) = aggregate(&gap_f, &lambdas, mode)?;

    // Second orientation: sublevel sets of the negated critic at negated
    // thresholds, i.e. superlevel sets of the critic.
    let neg_lam = lam.neg();
    let gap_g = coverage_gap(&cf_row.neg(), &cg_row.neg(), &neg_lam, kind)?;
    let (loss_g, argmax_g) = aggregate(&gap_g, &lambdas, mode)?;

    let total = loss_f.add(&loss_g)?;
    Ok(GeneratorLossParts {
        loss_f: loss_f.scalar()?,
        loss_g: loss_g.scalar()?,
        total,
        argmax_lambda_f: argmax_f,
        argmax_lambda_g: argmax_g,
    })
}

/// Critic objective `mean(c_G) - mean(c_F)`, maximized (with the score
/// penalty subtracted) in the adversarial game.
pub fn critic_loss(c_f: &Var, c_g: &Var) -> Result<Var> {
    if c_f.with_value(|t| t.numel()) == 0 || c_g.with_value(|t| t.numel()) == 0 {
        return Err(Error::EmptyBatch("critic_loss".to_string()));
    }
    c_g.mean().sub(&c_f.mean())
}

/// Mean squared input-gradient norm `mean_i ||d sum(c_out) / d x_i||^2`,
/// recorded with `create_graph` so it stays differentiable in whatever
/// `c_out` depends on (double backprop). `x_leaf` must be a grad-enabled
/// leaf whose rows are the batch.
pub fn input_gradient_norm_sq_mean(c_out: &Var, x_leaf: &Var) -> Result<Var> {
    let n = x_leaf.shape()[0];
    if n == 0 {
        return Err(Error::EmptyBatch("input_gradient_norm_sq_mean".to_string()));
    }
    let g = grad(&c_out.sum(), &[x_leaf], true)?;
    Ok(g[0].l2_norm_sq().scale(1.0 / n as f64))
}

/// Score penalty: mean squared input-gradient norm of the critic over the
/// generated batch plus the same over the target batch.
pub fn score_penalty(critic: &BoundMlp, x_f: &Tensor, x_g: &Tensor) -> Result<Var> {
    let (n_f, n_g) = (x_f.shape()[0], x_g.shape()[0]);
    if n_f == 0 || n_g == 0 {
        return Err(Error::EmptyBatch("score_penalty".to_string()));
    }
    let graph = critic.graph();
    let xg = graph.leaf(x_g.clone(), true);
    let xf = graph.leaf(x_f.clone(), true);
    let r_g = input_gradient_norm_sq_mean(&critic.forward(&xg)?, &xg)?;
    let r_f = input_gradient_norm_sq_mean(&critic.forward(&xf)?, &xf)?;
    r_g.add(&r_f)
}

/// Which level-set family attains the plug-in estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Sublevel sets of the critic.
    Sublevel,
    /// Sublevel sets of the negated critic.
    Superlevel,
}

#[derive(Clone, Copy, Debug)]
pub struct GksReport {
    pub value: f64,
    pub lambda: f64,
    pub orientation: Orientation,
}

/// Plug-in generalized-KS estimate: the single supremum of the coverage gap
/// over both orientations and all thresholds. Evaluation only — no graph.
/// Ties resolve to the smallest threshold, sublevel orientation first.
pub fn gks_estimate(
    points_f: &Tensor,
    points_g: &Tensor,
    critic: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
) -> Result<GksReport> {
    if points_f.shape()[0] == 0 || points_g.shape()[0] == 0 {
        return Err(Error::EmptyBatch("gks_estimate".to_string()));
    }
    if points_f.shape()[1] != points_g.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "gks_estimate".to_string(),
            lhs: points_f.shape().to_vec(),
            rhs: points_g.shape().to_vec(),
        });
    }
    let mut cf = critic(points_f)?.into_data();
    let mut cg = critic(points_g)?.into_data();
    cf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite critic values"));
    cg.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite critic values"));
    let mut lambdas: Vec<f64> = cf.iter().chain(&cg).copied().collect();
    lambdas.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite critic values"));

    let (n_f, n_g) = (cf.len() as f64, cg.len() as f64);
    let mut report = GksReport {
        value: -1.0,
        lambda: f64::NAN,
        orientation: Orientation::Sublevel,
    };
    // le_*: values <= lambda (sublevel coverage); lt_*: values < lambda,
    // giving superlevel coverage 1 - lt/n.
    let (mut le_f, mut le_g, mut lt_f, mut lt_g) = (0usize, 0usize, 0usize, 0usize);
    let mut i = 0usize;
    while i < lambdas.len() {
        let lam = lambdas[i];
        while i < lambdas.len() && lambdas[i] == lam {
            i += 1;
        }
        while lt_f < cf.len() && cf[lt_f] < lam {
            lt_f += 1;
        }
        while lt_g < cg.len() && cg[lt_g] < lam {
            lt_g += 1;
        }
        while le_f < cf.len() && cf[le_f] <= lam {
            le_f += 1;
        }
        while le_g < cg.len() && cg[le_g] <= lam {
            le_g += 1;
        }
        let sub = (le_g as f64 / n_g - le_f as f64 / n_f).abs();
        if sub > report.value {
            report = GksReport {
                value: sub,
                lambda: lam,
                orientation: Orientation::Sublevel,
            };
        }
        let sup = ((n_f - lt_f as f64) / n_f - (n_g - lt_g as f64) / n_g).abs();
        if sup > report.value {
            report = GksReport {
                value: sup,
                lambda: lam,
                orientation: Orientation::Superlevel,
            };
        }
    }
    Ok(report)
}

/// Non-saturating GAN generator loss on pre-sigmoid outputs of the
/// generated batch: push them toward the class assigned to target samples.
pub fn gan_generator_loss(d_g: &Var, flip: bool) -> Result<Var> {
    if d_g.with_value(|t| t.numel()) == 0 {
        return Err(Error::EmptyBatch("gan_generator_loss".to_string()));
    }
    let fake = if flip { d_g.neg() } else { d_g.clone() };
    Ok(fake.neg().softplus().mean())
}

/// Binary-cross-entropy GAN losses on pre-sigmoid critic outputs.
///
/// Unflipped labels enforce class 1 for target samples and 0 for generated
/// ones; `flip` swaps the roles. The generator part is the non-saturating
/// form.
pub fn gan_losses(d_f: &Var, d_g: &Var, flip: bool) -> Result<(Var, Var)> {
    if d_f.with_value(|t| t.numel()) == 0 || d_g.with_value(|t| t.numel()) == 0 {
        return Err(Error::EmptyBatch("gan_losses".to_string()));
    }
    let (real, fake) = if flip {
        (d_f.neg(), d_g.neg())
    } else {
        (d_f.clone(), d_g.clone())
    };
    let disc = real.neg().softplus().mean().add(&fake.softplus().mean())?;
    let gen = gan_generator_loss(d_g, flip)?;
    Ok((disc, gen))
}

#[derive(Debug)]
pub struct WganGpParts {
    pub critic_part: Var,
    pub generator_part: Var,
    /// Unweighted gradient-penalty term, for logging.
    pub penalty: f64,
}

/// WGAN-GP parts with caller-provided interpolation draws (one per pair).
///
/// critic part: `mean(c(x_G)) - mean(c(x_F)) + gp * mean((||grad c(xhat)|| - 1)^2)`
/// with `xhat = eps * x_F + (1 - eps) * x_G` on detached values;
/// generator part: `-mean(c(x_G))`.
pub fn wgan_gp_losses_with_eps(
    critic: &BoundMlp,
    x_f: &Var,
    x_g: &Var,
    gp_weight: f64,
    eps: &Tensor,
) -> Result<WganGpParts> {
    let (sf, sg) = (x_f.shape(), x_g.shape());
    if sf != sg {
        return Err(Error::ShapeMismatch {
            op: "wgan_gp pairing".to_string(),
            lhs: sf,
            rhs: sg,
        });
    }
    let n = sf[0];
    let d = sf[1];
    if n == 0 {
        return Err(Error::EmptyBatch("wgan_gp_losses".to_string()));
    }
    if eps.shape() != [n, 1] {
        return Err(Error::ShapeMismatch {
            op: "wgan_gp eps".to_string(),
            lhs: eps.shape().to_vec(),
            rhs: vec![n, 1],
        });
    }

    let c_f = critic.forward(x_f)?;
    let c_g = critic.forward(x_g)?;
    let base = c_g.mean().sub(&c_f.mean())?;
    let gen_part = c_g.mean().neg();

    let graph = critic.graph();
    let eb = eps.broadcast_to(&[n, d])?;
    let xhat_vals = x_f.with_value(|xf| {
        x_g.with_value(|xg| {
            let mut out = Vec::with_capacity(n * d);
            for ((e, f), g) in eb.data().iter().zip(xf.data()).zip(xg.data()) {
                out.push(e * f + (1.0 - e) * g);
            }
            Tensor::new(vec![n, d], out)
        })
    })?;
    let xhat = graph.leaf(xhat_vals, true);
    let c_hat = critic.forward(&xhat)?;
    let g = grad(&c_hat.sum(), &[&xhat], true)?;
    let row_norms = g[0].square().sum_to(&[n, 1])?.sqrt();
    let ones = graph.constant(Tensor::ones(&[n, 1]));
    let penalty = row_norms.sub(&ones)?.square().mean();
    let critic_part = base.add(&penalty.scale(gp_weight))?;
    Ok(WganGpParts {
        critic_part,
        generator_part: gen_part,
        penalty: penalty.scalar()?,
    })
}

/// WGAN-GP parts with `eps ~ U(0, 1)` drawn per pair.
pub fn wgan_gp_losses(
    critic: &BoundMlp,
    x_f: &Var,
    x_g: &Var,
    gp_weight: f64,
    rng: &mut RngState,
) -> Result<WganGpParts> {
    let n = x_f.shape()[0];
    let eps: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    wgan_gp_losses_with_eps(critic, x_f, x_g, gp_weight, &Tensor::new(vec![n, 1], eps)?)
}

#[derive(Clone, Copy, Debug)]
pub struct Example1Stats {
    /// sup over alpha of |P_F(C_G(alpha)) - alpha| with the centered-interval
    /// quantile sets of the Gaussian, i.e. the critic |x|.
    pub one_sided_sup: f64,
    /// Plug-in generalized-KS estimate with the identity critic, whose
    /// sublevel families include the half-line sets of the half-normal.
    pub symmetric_gks: f64,
}

/// The half-normal versus standard-normal statistics: the one-sided coverage
/// discrepancy vanishes (the Gaussian's centered intervals cover the
/// half-normal at exactly their own level) while the symmetric estimate
/// exposes the mismatch at 1/2.
pub fn example1_statistics(half_normal: &[f64], gaussian: &[f64]) -> Result<Example1Stats> {
    if half_normal.is_empty() || gaussian.is_empty() {
        return Err(Error::EmptyBatch("example1_statistics".to_string()));
    }
    // One-sided: sweep alpha over the empirical quantiles of |x| under G and
    // compare the F-coverage of the centered interval [-q_alpha, q_alpha].
    let mut f_abs: Vec<f64> = half_normal.iter().map(|v| v.abs()).collect();
    let mut g_abs: Vec<f64> = gaussian.iter().map(|v| v.abs()).collect();
    f_abs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    g_abs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let (n_f, n_g) = (f_abs.len() as f64, g_abs.len() as f64);
    let mut sup = 0.0f64;
    let mut fi = 0usize;
    for (k, q) in g_abs.iter().enumerate() {
        while fi < f_abs.len() && f_abs[fi] <= *q {
            fi += 1;
        }
        let cover = fi as f64 / n_f;
        let alpha_hi = (k + 1) as f64 / n_g;
        let alpha_lo = k as f64 / n_g;
        sup = sup.max((cover - alpha_hi).abs()).max((cover - alpha_lo).abs());
    }

    let f_pts = Tensor::new(vec![half_normal.len(), 1], half_normal.to_vec())?;
    let g_pts = Tensor::new(vec![gaussian.len(), 1], gaussian.to_vec())?;
    let symmetric = gks_estimate(&f_pts, &g_pts, &mut |t| Ok(t.clone()))?;
    Ok(Example1Stats {
        one_sided_sup: sup,
        symmetric_gks: symmetric.value,
    })
}

//! Training objectives, built on a [`Graph`] so they can be differentiated.
//!
//! All cross-entropies use the standard (negated) sign and are summed over
//! positions.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn check_rows(g: &Graph, x: Var, n: usize, what: &str) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::Contract(format!(
            "{what}: expected {n} rows, got shape {shape:?}"
        )));
    }
    Ok(())
}

/// `Σ_i w[i]·(logsumexp(x_i) − x_i[target_i])` over the rows of `logits`.
pub fn weighted_ce(g: &mut Graph, logits: Var, targets: &[usize], w: &[f64]) -> Result<Var> {
    if targets.len() != w.len() {
        return Err(Error::Contract(format!(
            "{} targets but {} weights",
            targets.len(),
            w.len()
        )));
    }
    if targets.is_empty() {
        return Ok(zero(g));
    }
    check_rows(g, logits, targets.len(), "cross-entropy logits")?;
    let lse = g.logsumexp_rows(logits);
    let at: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = g.pick(logits, &at)?;
    let nll = g.sub(lse, picked)?;
    let wv = g.constant(Tensor::vector(w.to_vec()));
    let wn = g.mul(nll, wv)?;
    Ok(g.sum(wn))
}

/// `−Σ_i w[i]·[y ln σ(z) + (1 − y) ln(1 − σ(z))]` on raw logits `z` (`k × 1`).
pub fn weighted_bce(g: &mut Graph, z: Var, labels: &[f64], w: &[f64]) -> Result<Var> {
    if labels.len() != w.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} weights",
            labels.len(),
            w.len()
        )));
    }
    if labels.is_empty() {
        return Ok(zero(g));
    }
    check_rows(g, z, labels.len(), "score logits")?;
    let k = labels.len();
    let a: Vec<f64> = labels.iter().zip(w).map(|(y, w)| -y * w).collect();
    let b: Vec<f64> = labels.iter().zip(w).map(|(y, w)| -(1.0 - y) * w).collect();
    let a = g.constant(Tensor::matrix(k, 1, a)?);
    let b = g.constant(Tensor::matrix(k, 1, b)?);
    let lp = g.log_sigmoid(z);
    let nz = g.scale(z, -1.0);
    let ln = g.log_sigmoid(nz);
    let ta = g.mul(lp, a)?;
    let tb = g.mul(ln, b)?;
    let t = g.add(ta, tb)?;
    Ok(g.sum(t))
}

/// Weighted masked-LM loss toward the original tokens at the generated
/// positions. `logits` has one row per entry of `original_classes`.
pub fn loss_generator(
    g: &mut Graph,
    logits: Var,
    original_classes: &[usize],
    w_d: &[f64],
) -> Result<Var> {
    if original_classes.is_empty() {
        log::debug!("generator loss over an empty set of generated positions");
    }
    weighted_ce(g, logits, original_classes, w_d)
}

/// `Σ_{i∈C} σ(z_i) / Σ_{j∈R} σ(z_j)`; `None` when `R` is empty.
/// `post_sigmoid` treats `z` as already squashed and applies σ a second time.
pub fn ratio_term(
    g: &mut Graph,
    z: Var,
    r: &[usize],
    c: &[usize],
    post_sigmoid: bool,
) -> Result<Option<Var>> {
    if r.is_empty() {
        log::debug!("ratio term skipped: no generated positions");
        return Ok(None);
    }
    let s = g.sigmoid(z);
    let s = if post_sigmoid { g.sigmoid(s) } else { s };
    let num = if c.is_empty() {
        zero(g)
    } else {
        let sc = g.gather_rows(s, c)?;
        g.sum(sc)
    };
    let sr = g.gather_rows(s, r)?;
    let den = g.sum(sr);
    Ok(Some(g.div(num, den)?))
}

/// Discriminator loss: `W_G`-weighted BCE over all positions plus the
/// original-to-generated score ratio.
pub fn loss_discriminator(
    g: &mut Graph,
    z: Var,
    labels: &[f64],
    w_g: &[f64],
    r: &[usize],
    c: &[usize],
    post_sigmoid: bool,
) -> Result<Var> {
    let bce = weighted_bce(g, z, labels, w_g)?;
    match ratio_term(g, z, r, c, post_sigmoid)? {
        Some(ratio) => g.add(bce, ratio),
        None => Ok(bce),
    }
}

/// Unweighted scoring BCE plus masked-LM cross-entropy.
pub fn loss_mtl(
    g: &mut Graph,
    mlm_logits: Var,
    mlm_targets: &[usize],
    z: Var,
    labels: &[f64],
) -> Result<Var> {
    if mlm_targets.is_empty() {
        log::debug!("multi-task loss without masked positions");
    }
    let ones_t = vec![1.0; mlm_targets.len()];
    let ce = weighted_ce(g, mlm_logits, mlm_targets, &ones_t)?;
    let ones_l = vec![1.0; labels.len()];
    let bce = weighted_bce(g, z, labels, &ones_l)?;
    g.add(ce, bce)
}

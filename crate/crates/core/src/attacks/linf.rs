//! L∞-bounded gradient attacks: FGSM, PGD and APGD.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::image::Image;
use crate::vit::{loss_and_input_gradient, ClassifierModel, LossSpec};

/// Projects `v` onto `[0,1] ∩ {u : |u − x| ≤ ε}` elementwise. The result
/// satisfies `|v − x| ≤ ε` as evaluated in floating point.
pub fn project_linf(x: &Array3<f64>, v: &mut Array3<f64>, eps: f64) {
    Zip::from(v).and(x).for_each(|v, &x| {
        let mut u = v.clamp(x - eps, x + eps).clamp(0.0, 1.0);
        // `x ± ε` may round outward; step back one ulp at a time.
        while (u - x).abs() > eps {
            u = if u > x { u.next_down() } else { u.next_up() };
        }
        *v = u;
    });
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ce_gradient(model: &ClassifierModel, x: &Image, y: usize) -> Result<(f64, Array3<f64>)> {
    loss_and_input_gradient(model, x, y, &LossSpec::CrossEntropy)
}

/// One signed step of size `step` from `cur`, projected around `x`.
fn signed_step(
    x: &Image,
    cur: &Array3<f64>,
    grad: &Array3<f64>,
    step: f64,
    eps: f64,
) -> Array3<f64> {
    let mut next = cur.clone();
    Zip::from(&mut next)
        .and(grad)
        .for_each(|v, &g| *v += step * sign(g));
    project_linf(x.pixels(), &mut next, eps);
    next
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return config_err(format!("ε = {eps} must be finite and non-negative"));
    }
    Ok(())
}

/// `clip(x + ε·sign(∇ₓ CE))`.
pub fn fgsm(model: &ClassifierModel, x: &Image, y: usize, eps: f64) -> Result<Image> {
    check_eps(eps)?;
    let (_, g) = ce_gradient(model, x, y)?;
    Ok(Image::from_trusted(signed_step(
        x,
        x.pixels(),
        &g,
        eps,
        eps,
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdParams {
    pub eps: f64,
    pub step: f64,
    pub steps: usize,
}

impl PgdParams {
    /// ε = 0.03, step 0.003, 10 steps.
    pub fn reference() -> Self {
        Self {
            eps: 0.03,
            step: 0.003,
            steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        if !(self.step > 0.0) || self.steps == 0 {
            return config_err("PGD needs a positive step size and at least one step");
        }
        Ok(())
    }
}

/// PGD from `x` (no random start), calling `observe` on every iterate.
pub fn pgd_with(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    params: &PgdParams,
    mut observe: impl FnMut(&Array3<f64>),
) -> Result<Image> {
    params.validate()?;
    let mut cur = x.pixels().clone();
    for _ in 0..params.steps {
        let (_, g) = ce_gradient(model, &Image::from_trusted(cur.clone()), y)?;
        cur = signed_step(x, &cur, &g, params.step, params.eps);
        observe(&cur);
    }
    Ok(Image::from_trusted(cur))
}

pub fn pgd(model: &ClassifierModel, x: &Image, y: usize, params: &PgdParams) -> Result<Image> {
    pgd_with(model, x, y, params, |_| {})
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApgdParams {
    pub eps: f64,
    pub steps: usize,
    /// Step halves at a checkpoint when fewer than this fraction of the
    /// steps since the previous checkpoint increased the loss.
    pub rho: f64,
    /// Weight of the previous displacement (0 disables momentum).
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Initial step size; `2ε` when absent.
    #[serde(default)]
    pub initial_step: Option<f64>,
}

fn default_momentum() -> f64 {
    0.25
}

impl ApgdParams {
    /// ε = 0.03, 10 steps, ρ = 0.75.
    pub fn reference() -> Self {
        Self {
            eps: 0.03,
            steps: 10,
            rho: 0.75,
            momentum: default_momentum(),
            initial_step: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        if self.steps == 0 {
            return config_err("APGD needs at least one step");
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return config_err(format!("ρ = {} outside [0, 1)", self.rho));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return config_err(format!("momentum {} outside [0, 1]", self.momentum));
        }
        Ok(())
    }
}

/// Iteration counts after which the step size may halve.
pub fn apgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut p: Vec<f64> = vec![0.0, 0.22];
    while *p.last().unwrap() < 1.0 {
        let n = p.len();
        let next = p[n - 1] + (p[n - 1] - p[n - 2] - 0.03).max(0.06);
        p.push(next);
    }
    let mut w: Vec<usize> = p
        .iter()
        .map(|q| (q * steps as f64 - 1e-9).ceil() as usize)
        .filter(|&w| w > 0 && w <= steps)
        .collect();
    w.dedup();
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApgdOutcome {
    /// The highest-loss iterate seen.
    pub x_adv: Image,
    pub best_loss: f64,
    /// Loss of the current iterate at each checkpoint.
    pub checkpoint_losses: Vec<f64>,
    /// Loss of every iterate `x₁ … x_steps`.
    pub losses: Vec<f64>,
}

pub fn apgd(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    params: &ApgdParams,
) -> Result<ApgdOutcome> {
    apgd_with(model, x, y, params, |_| {})
}

pub fn apgd_with(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    params: &ApgdParams,
    mut observe: impl FnMut(&Array3<f64>),
) -> Result<ApgdOutcome> {
    params.validate()?;
    let eps = params.eps;
    let mut eta = params.initial_step.unwrap_or(2.0 * eps);
    let alpha = 1.0 - params.momentum;
    let checkpoints = apgd_checkpoints(params.steps);

    let mut prev = x.pixels().clone();
    let mut cur = prev.clone();
    let (mut f_cur, mut g_cur) = ce_gradient(model, x, y)?;
    let mut best = (cur.clone(), f_cur, g_cur.clone());
    let mut increases = 0usize;
    let mut last_checkpoint = 0usize;
    let mut checkpoint_losses = Vec::new();
    let mut losses = Vec::with_capacity(params.steps);

    for k in 0..params.steps {
        let z = signed_step(x, &cur, &g_cur, eta, eps);
        let next = if k == 0 || params.momentum == 0.0 {
            z
        } else {
            let mut n = &cur + &((&z - &cur) * alpha) + &((&cur - &prev) * (1.0 - alpha));
            project_linf(x.pixels(), &mut n, eps);
            n
        };
        let (f_next, g_next) = ce_gradient(model, &Image::from_trusted(next.clone()), y)?;
        observe(&next);
        losses.push(f_next);
        if f_next > f_cur {
            increases += 1;
        }
        if f_next > best.1 {
            best = (next.clone(), f_next, g_next.clone());
        }
        prev = std::mem::replace(&mut cur, next);
        f_cur = f_next;
        g_cur = g_next;

        let done = k + 1;
        if checkpoints.contains(&done) && done < params.steps {
            checkpoint_losses.push(f_cur);
            let span = (done - last_checkpoint) as f64;
            if (increases as f64) < params.rho * span {
                eta /= 2.0;
                cur = best.0.clone();
                f_cur = best.1;
                g_cur = best.2.clone();
            }
            increases = 0;
            last_checkpoint = done;
        }
    }
    Ok(ApgdOutcome {
        x_adv: Image::from_trusted(best.0),
        best_loss: best.1,
        checkpoint_losses,
        losses,
    })
}

/// PGD against a surrogate; the result is evaluated against the target
/// elsewhere.
pub fn transfer_attack(
    surrogate: &ClassifierModel,
    x: &Image,
    y: usize,
    inner: &PgdParams,
) -> Result<Image> {
    pgd(surrogate, x, y, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(apgd_checkpoints(100), vec![22, 41, 57, 70, 80, 87, 93, 99]);
        let w = apgd_checkpoints(10);
        assert_eq!(w, vec![3, 5, 6, 7, 8, 9, 10]);
    }

    proptest! {
        #[test]
        fn projection_lands_in_the_ball(
            xs in proptest::collection::vec(0.0f64..=1.0, 1..20),
            noise in proptest::collection::vec(-1.0f64..1.0, 20),
            eps in 0.0f64..0.2,
        ) {
            let n = xs.len();
            let x = Array3::from_shape_vec((1, n, 1), xs).unwrap();
            let mut v = Array3::from_shape_fn((1, n, 1), |(_, i, _)| x[[0, i, 0]] + noise[i]);
            project_linf(&x, &mut v, eps);
            for (a, b) in v.iter().zip(x.iter()) {
                prop_assert!((a - b).abs() <= eps);
                prop_assert!((0.0..=1.0).contains(a));
            }
            let before = v.clone();
            project_linf(&x, &mut v, eps);
            prop_assert_eq!(v, before);
        }
    }

    #[test]
    fn rounding_outward_is_pulled_back() {
        let x = Array3::from_elem((1, 1, 1), 0.1);
        let eps = 0.2;
        let mut v = Array3::from_elem((1, 1, 1), 0.1 + 0.2);
        project_linf(&x, &mut v, eps);
        assert!((v[[0, 0, 0]] - 0.1).abs() <= eps);
    }
}

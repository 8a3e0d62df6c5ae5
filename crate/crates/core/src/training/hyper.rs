//! One-step lookahead hypergradient of the DR upper loss with respect to the
//! λ-network parameters ξ.
//!
//! The lookahead chain is λ(ξ) → θ' (pseudo imputation step on a clicked
//! batch) → φ', ζ' (pseudo prediction step on a full batch) → DR loss on a
//! second clicked batch. [`upper_loss`] evaluates the chain with the same
//! first-order gradient code used for real training; [`hypergradient`]
//! differentiates it in closed form.

use crate::error::{Error, Result};
use crate::estimators::{dr_sum, drbias_weight, mrdr_weight, Denominator, ImputationLoss, SampleBundle};
use crate::models::{FactorizationMachine, LambdaNetwork};

use super::config::ImputationHead;
use super::heads::{
    ctcvr_terms, imputation_gradient, imputed_error, prediction_error, prediction_gradient, propensity, Heads, Pair,
    PredictionLoss,
};

/// Models at the start of an outer step.
#[derive(Debug, Clone, Copy)]
pub struct MetaModels<'a> {
    pub cvr: &'a FactorizationMachine,
    pub ctr: &'a FactorizationMachine,
    pub imputation: &'a FactorizationMachine,
    pub num_users: usize,
    pub head: ImputationHead,
    pub floor: f64,
    /// Whether the pseudo prediction step also moves the CTR model.
    pub joint: bool,
    /// Pseudo-step learning rate η.
    pub eta: f64,
}

/// The three batches of an outer step.
#[derive(Debug, Clone, Default)]
pub struct MetaBatch {
    /// Clicked events for the pseudo imputation step.
    pub lower: Vec<Pair>,
    /// Clicked events on which the upper loss is evaluated.
    pub upper: Vec<Pair>,
    /// Clicked and unclicked events for the pseudo prediction step.
    pub full: Vec<Pair>,
}

#[derive(Debug, Clone)]
pub struct Hypergradient {
    pub grad_xi: Vec<f64>,
    pub upper_loss: f64,
    /// dL/dλ_k for each event of the lower batch.
    pub grad_lambda: Vec<f64>,
}

impl<'a> MetaModels<'a> {
    fn heads(
        &self,
        cvr: &'a FactorizationMachine,
        ctr: &'a FactorizationMachine,
        imputation: &'a FactorizationMachine,
    ) -> Heads<'a> {
        Heads {
            cvr,
            ctr: Some(ctr),
            imputation: Some(imputation),
            num_users: self.num_users,
            head: self.head,
            floor: self.floor,
        }
    }
}

fn scale(batch: &[Pair], what: &str) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation(format!("empty {what} meta batch")));
    }
    Ok(1.0 / batch.len() as f64)
}

/// Plain gradient step `p - lr·g` on a copy of the model.
pub fn pseudo_sgd(model: &FactorizationMachine, grad: &[f64], lr: f64, block: &str) -> Result<FactorizationMachine> {
    if let Some(offset) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { block: block.to_string(), offset });
    }
    let mut next = model.clone();
    for (p, g) in next.params_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(next)
}

pub fn lambdas(net: &LambdaNetwork, batch: &[Pair]) -> Vec<f64> {
    batch.iter().map(|p| net.forward_unchecked(p.user, p.item)).collect()
}

/// θ' after one DR-MSE step with the given λ on the lower batch.
pub fn pseudo_imputation(models: &MetaModels, lower: &[Pair], lambdas: &[f64]) -> Result<FactorizationMachine> {
    let s = scale(lower, "lower")?;
    let heads = models.heads(models.cvr, models.ctr, models.imputation);
    let mut grad = vec![0.0; models.imputation.num_params()];
    imputation_gradient(&heads, lower, ImputationLoss::DrMse, Some(lambdas), s, &mut grad);
    pseudo_sgd(models.imputation, &grad, models.eta, "imputation")
}

/// φ' and ζ' after one CTCVR step on the full batch using imputation θ'.
pub fn pseudo_prediction(
    models: &MetaModels,
    theta: &FactorizationMachine,
    full: &[Pair],
) -> Result<(FactorizationMachine, FactorizationMachine)> {
    let s = scale(full, "full")?;
    let heads = models.heads(models.cvr, models.ctr, theta);
    let mut g_cvr = vec![0.0; models.cvr.num_params()];
    let mut g_ctr = vec![0.0; models.ctr.num_params()];
    let ctr_grad = models.joint.then_some(g_ctr.as_mut_slice());
    prediction_gradient(&heads, PredictionLoss::Ctcvr, full, s, &mut g_cvr, ctr_grad);
    let cvr = pseudo_sgd(models.cvr, &g_cvr, models.eta, "cvr")?;
    let ctr = if models.joint { pseudo_sgd(models.ctr, &g_ctr, models.eta, "ctr")? } else { models.ctr.clone() };
    Ok((cvr, ctr))
}

/// DR loss on the upper batch after the lookahead driven by `net`.
pub fn upper_loss(models: &MetaModels, net: &LambdaNetwork, batch: &MetaBatch) -> Result<f64> {
    let lambda = lambdas(net, &batch.lower);
    let theta = pseudo_imputation(models, &batch.lower, &lambda)?;
    let (cvr, ctr) = pseudo_prediction(models, &theta, &batch.full)?;
    evaluate_upper(models, &cvr, &ctr, &batch.upper)
}

fn evaluate_upper(
    models: &MetaModels,
    cvr: &FactorizationMachine,
    ctr: &FactorizationMachine,
    upper: &[Pair],
) -> Result<f64> {
    let s = scale(upper, "upper")?;
    let heads = models.heads(cvr, ctr, models.imputation);
    let bundle = SampleBundle::new(upper.iter().map(|p| heads.sample(p)).collect(), Denominator::Batch)?;
    Ok(s * dr_sum(&bundle))
}

/// β with dθ'/dλ_k = -η/|lower| · β_k · ∇θ g_k for a clicked lower event.
fn lambda_sensitivity(models: &MetaModels, pair: &Pair, converted: bool) -> f64 {
    let x = [pair.user, models.num_users + pair.item];
    let f = models.cvr.score_unchecked(&x);
    let imp = imputed_error(models.head, models.imputation.score_unchecked(&x), f);
    let (e, _) = prediction_error(converted, f);
    let (p_hat, _) = propensity(models.ctr.score_unchecked(&x), models.floor);
    let dc = (drbias_weight(p_hat) - mrdr_weight(p_hat)) / p_hat;
    2.0 * dc * (imp.value - e) * imp.d_g
}

/// Closed-form gradient of [`upper_loss`] with respect to the parameters
/// of `net`.
pub fn hypergradient(models: &MetaModels, net: &LambdaNetwork, batch: &MetaBatch) -> Result<Hypergradient> {
    let s_lower = scale(&batch.lower, "lower")?;
    let s_full = scale(&batch.full, "full")?;
    let s_upper = scale(&batch.upper, "upper")?;
    let eta = models.eta;
    let num_users = models.num_users;
    let features = |p: &Pair| [p.user, num_users + p.item];

    let lambda = lambdas(net, &batch.lower);
    let theta = pseudo_imputation(models, &batch.lower, &lambda)?;
    let (cvr, ctr) = pseudo_prediction(models, &theta, &batch.full)?;
    let upper_loss = evaluate_upper(models, &cvr, &ctr, &batch.upper)?;

    // Upper loss gradient in φ' and ζ'.
    let mut v_cvr = vec![0.0; cvr.num_params()];
    let mut v_ctr = vec![0.0; ctr.num_params()];
    for pair in &batch.upper {
        let Some(converted) = pair.converted else {
            return Err(Error::validation("upper meta batch must hold clicked events only"));
        };
        let x = features(pair);
        let f = cvr.score_unchecked(&x);
        let imp = imputed_error(models.head, models.imputation.score_unchecked(&x), f);
        let (e, de) = prediction_error(converted, f);
        let (p_hat, dp) = propensity(ctr.score_unchecked(&x), models.floor);
        let w = 1.0 / p_hat;
        cvr.accumulate_gradient_unchecked(&x, s_upper * (imp.d_f * (1.0 - w) + de * w), &mut v_cvr);
        if models.joint && dp != 0.0 {
            ctr.accumulate_gradient_unchecked(&x, -s_upper * (e - imp.value) * w * w * dp, &mut v_ctr);
        }
    }

    // Back through the pseudo prediction step into θ'.
    let mut u_theta = vec![0.0; theta.num_params()];
    for pair in &batch.full {
        let x = features(pair);
        let f = models.cvr.score_unchecked(&x);
        let g = theta.score_unchecked(&x);
        let z = models.ctr.score_unchecked(&x);
        let t = ctcvr_terms(models.head, pair, f, g, Some(z), models.floor, models.joint);
        let mut coef = models.cvr.gradient_dot_unchecked(&x, &v_cvr) * t.d_fg;
        if models.joint && t.d_zg != 0.0 {
            coef += models.ctr.gradient_dot_unchecked(&x, &v_ctr) * t.d_zg;
        }
        if coef != 0.0 {
            theta.accumulate_gradient_unchecked(&x, -eta * s_full * coef, &mut u_theta);
        }
    }

    // Back through the pseudo imputation step into λ and ξ.
    let mut grad_xi = vec![0.0; net.num_params()];
    let mut grad_lambda = Vec::with_capacity(batch.lower.len());
    for pair in &batch.lower {
        let Some(converted) = pair.converted else {
            return Err(Error::validation("lower meta batch must hold clicked events only"));
        };
        let x = features(pair);
        let beta = lambda_sensitivity(models, pair, converted);
        let d_lambda = if beta == 0.0 {
            0.0
        } else {
            -eta * s_lower * beta * models.imputation.gradient_dot_unchecked(&x, &u_theta)
        };
        grad_lambda.push(d_lambda);
        net.accumulate_gradient(pair.user, pair.item, d_lambda, &mut grad_xi)?;
    }
    if let Some(offset) = grad_xi.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { block: "lambda".into(), offset });
    }
    Ok(Hypergradient { grad_xi, upper_loss, grad_lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LambdaShape;
    use crate::rng::{stream_rng, Stream};

    const USERS: usize = 5;
    const ITEMS: usize = 6;

    struct Fixture {
        cvr: FactorizationMachine,
        ctr: FactorizationMachine,
        theta: FactorizationMachine,
        net: LambdaNetwork,
        batch: MetaBatch,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = stream_rng(seed, Stream::CvrInit);
        let n = USERS + ITEMS;
        let cvr = FactorizationMachine::init(n, 3, 0.5, &mut rng);
        let mut ctr = FactorizationMachine::init(n, 3, 0.5, &mut rng);
        ctr.params_mut()[0] = -0.8;
        let theta = FactorizationMachine::init(n, 3, 0.5, &mut rng);
        let mut net = LambdaNetwork::init(LambdaShape::new(USERS, ITEMS), 0.3, 0.4, &mut rng).unwrap();
        let len = net.num_params();
        // Give the output layer weight so every ξ coordinate matters.
        for k in 0..16 {
            net.params_mut()[len - 17 + k] = 0.3 * ((k as f64) * 0.7).sin();
        }
        let clicked = |u: usize, i: usize, c: bool| Pair { user: u, item: i, converted: Some(c) };
        let batch = MetaBatch {
            lower: vec![
                clicked(0, 1, true),
                clicked(1, 2, false),
                clicked(2, 3, true),
                clicked(3, 0, false),
                clicked(4, 5, false),
            ],
            upper: vec![
                clicked(0, 2, false),
                clicked(1, 1, true),
                clicked(3, 4, true),
                clicked(4, 0, false),
                clicked(2, 5, true),
            ],
            full: vec![
                clicked(0, 1, true),
                clicked(1, 2, false),
                clicked(2, 3, true),
                Pair { user: 0, item: 4, converted: None },
                Pair { user: 3, item: 3, converted: None },
                Pair { user: 4, item: 1, converted: None },
            ],
        };
        Fixture { cvr, ctr, theta, net, batch }
    }

    fn models<'a>(fx: &'a Fixture, head: ImputationHead, joint: bool) -> MetaModels<'a> {
        MetaModels {
            cvr: &fx.cvr,
            ctr: &fx.ctr,
            imputation: &fx.theta,
            num_users: USERS,
            head,
            floor: 0.03,
            joint,
            eta: 0.1,
        }
    }

    fn finite_difference(m: &MetaModels, net: &LambdaNetwork, batch: &MetaBatch) -> Vec<f64> {
        let h = 1e-4;
        (0..net.num_params())
            .map(|idx| {
                let mut plus = net.clone();
                plus.params_mut()[idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[idx] -= h;
                (upper_loss(m, &plus, batch).unwrap() - upper_loss(m, &minus, batch).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-300)
    }

    #[test]
    fn matches_finite_differences() {
        let fx = fixture(7);
        for head in [ImputationHead::ImputedLabel, ImputationHead::DirectError] {
            for joint in [false, true] {
                let m = models(&fx, head, joint);
                let analytic = hypergradient(&m, &fx.net, &fx.batch).unwrap();
                let fd = finite_difference(&m, &fx.net, &fx.batch);
                if head == ImputationHead::DirectError && !joint {
                    // ê no longer depends on φ, so φ' cannot see θ'.
                    assert!(analytic.grad_xi.iter().all(|&g| g == 0.0));
                    assert!(fd.iter().all(|g| g.abs() < 1e-10));
                    continue;
                }
                let rel = relative_error(&analytic.grad_xi, &fd);
                assert!(fd.iter().any(|g| g.abs() > 1e-8), "{head:?} joint={joint}: degenerate oracle");
                assert!(rel < 1e-3, "{head:?} joint={joint}: rel {rel}");
                assert_eq!(analytic.upper_loss, upper_loss(&m, &fx.net, &fx.batch).unwrap());
            }
        }
    }

    #[test]
    fn pseudo_sgd_examples() {
        let mut model = FactorizationMachine::zeros(3, 1);
        model.params_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0, 0.3, -0.2, 0.1]);
        let same = pseudo_sgd(&model, &[0.0; 7], 0.7, "m").unwrap();
        assert_eq!(same.params(), model.params());
        // ½(θ - c)² has gradient θ - c; one unit step lands on c.
        let target = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let grad: Vec<f64> = model.params().iter().zip(&target).map(|(p, c)| p - c).collect();
        assert_eq!(pseudo_sgd(&model, &grad, 1.0, "m").unwrap().params(), &target);
        let mut bad = grad.clone();
        bad[2] = f64::NAN;
        assert!(matches!(pseudo_sgd(&model, &bad, 1.0, "m"), Err(Error::NonFiniteGradient { offset: 2, .. })));
    }

    #[test]
    fn imputation_step_lambda_derivative() {
        let fx = fixture(11);
        let m = models(&fx, ImputationHead::ImputedLabel, false);
        let lower = &fx.batch.lower;
        let base = lambdas(&fx.net, lower);
        let h = 1e-5;
        for (k, pair) in lower.iter().enumerate() {
            let beta = lambda_sensitivity(&m, pair, pair.converted.unwrap());
            let mut analytic = vec![0.0; fx.theta.num_params()];
            let scale = -m.eta / lower.len() as f64 * beta;
            fx.theta.accumulate_gradient_unchecked(&[pair.user, USERS + pair.item], scale, &mut analytic);
            let (mut up, mut down) = (base.clone(), base.clone());
            up[k] += h;
            down[k] -= h;
            let plus = pseudo_imputation(&m, lower, &up).unwrap();
            let minus = pseudo_imputation(&m, lower, &down).unwrap();
            let fd: Vec<f64> = plus.params().iter().zip(minus.params()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let rel = relative_error(&analytic, &fd);
            assert!(rel < 1e-4, "event {k}: rel {rel}");
        }
    }

    #[test]
    fn sign_agrees_with_grid_scan() {
        // With zero output weights λ = σ(b₂) for every event, so the upper
        // loss is a scalar function of b₂ that a grid scan can slope.
        let mut fx = fixture(12);
        let len = fx.net.num_params();
        fx.net.params_mut()[len - 17..len - 1].fill(0.0);
        let m = models(&fx, ImputationHead::ImputedLabel, true);
        let mut checked = 0;
        for step in -8..=8 {
            let b2 = 0.5 * step as f64;
            let at = |b: f64| {
                let mut net = fx.net.clone();
                net.params_mut()[len - 1] = b;
                net
            };
            let slope = (upper_loss(&m, &at(b2 + 0.05), &fx.batch).unwrap()
                - upper_loss(&m, &at(b2 - 0.05), &fx.batch).unwrap())
                / 0.1;
            let analytic = hypergradient(&m, &at(b2), &fx.batch).unwrap().grad_xi[len - 1];
            if slope.abs() > 1e-9 {
                assert_eq!(analytic > 0.0, slope > 0.0, "b2 = {b2}: slope {slope}, analytic {analytic}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn vanishes_at_half_propensity() {
        let mut fx = fixture(8);
        fx.ctr = FactorizationMachine::zeros(USERS + ITEMS, 3);
        let m = models(&fx, ImputationHead::ImputedLabel, true);
        let g = hypergradient(&m, &fx.net, &fx.batch).unwrap();
        assert!(g.grad_xi.iter().all(|&v| v == 0.0));
        assert_eq!(drbias_weight(0.5), mrdr_weight(0.5));
    }

    #[test]
    fn descent_direction_lowers_upper_loss() {
        let fx = fixture(9);
        let m = models(&fx, ImputationHead::ImputedLabel, true);
        let g = hypergradient(&m, &fx.net, &fx.batch).unwrap();
        let mut stepped = fx.net.clone();
        let norm: f64 = g.grad_xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (p, d) in stepped.params_mut().iter_mut().zip(&g.grad_xi) {
            *p -= 1e-3 * d / norm;
        }
        assert!(upper_loss(&m, &stepped, &fx.batch).unwrap() < g.upper_loss);
    }

    #[test]
    fn rejects_unclicked_upper_events() {
        let mut fx = fixture(10);
        fx.batch.upper.push(Pair { user: 0, item: 0, converted: None });
        let m = models(&fx, ImputationHead::ImputedLabel, false);
        assert!(hypergradient(&m, &fx.net, &fx.batch).is_err());
    }
}

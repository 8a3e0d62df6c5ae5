//! Per-sample quantities of the three FM heads and the analytic gradients of
//! every training loss with respect to their parameters.
//!
//! Notation: `f` is the CVR logit (r̂ = σ(f)), `g` the imputation logit and
//! `z` the CTR logit (p̂ = max(floor, σ(z))).

use crate::estimators::{cross_entropy_error, imputation_coefficient, ImputationLoss, Sample, PROB_EPS};
use crate::models::fm::{sigmoid, FactorizationMachine};

use super::config::{Estimator, ImputationHead};

/// A user-item pair in a batch; `converted` is `Some` exactly when clicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub user: usize,
    pub item: usize,
    pub converted: Option<bool>,
}

impl Pair {
    pub fn clicked(&self) -> bool {
        self.converted.is_some()
    }
}

/// ê and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputedError {
    pub value: f64,
    pub d_g: f64,
    pub d_f: f64,
    /// ∂²ê / ∂g ∂f.
    pub d_gf: f64,
}

fn clipped(r_hat: f64) -> bool {
    !(PROB_EPS..=1.0 - PROB_EPS).contains(&r_hat)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn imputed_error(head: ImputationHead, g: f64, f: f64) -> ImputedError {
    match head {
        ImputationHead::ImputedLabel => {
            let soft = sigmoid(g);
            let r_hat = sigmoid(f);
            let rc = r_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let slope = soft * (1.0 - soft);
            let (d_f, d_gf) = if clipped(r_hat) { (0.0, 0.0) } else { (r_hat - soft, -slope) };
            ImputedError {
                value: cross_entropy_error(soft, r_hat),
                d_g: slope * ((1.0 - rc).ln() - rc.ln()),
                d_f,
                d_gf,
            }
        }
        ImputationHead::DirectError => ImputedError { value: softplus(g), d_g: sigmoid(g), d_f: 0.0, d_gf: 0.0 },
    }
}

/// e = CE(r, σ(f)) and ∂e/∂f.
pub fn prediction_error(converted: bool, f: f64) -> (f64, f64) {
    let r = if converted { 1.0 } else { 0.0 };
    let r_hat = sigmoid(f);
    let d_f = if clipped(r_hat) { 0.0 } else { r_hat - r };
    (cross_entropy_error(r, r_hat), d_f)
}

/// p̂ = max(floor, σ(z)) and dp̂/dz.
pub fn propensity(z: f64, floor: f64) -> (f64, f64) {
    let s = sigmoid(z);
    if s > floor {
        (s, s * (1.0 - s))
    } else {
        (floor, 0.0)
    }
}

/// CTR cross entropy CE(o, σ(z)) and its derivative in z.
pub fn click_loss(clicked: bool, z: f64) -> (f64, f64) {
    let o = if clicked { 1.0 } else { 0.0 };
    let s = sigmoid(z);
    let d_z = if clipped(s) { 0.0 } else { s - o };
    (cross_entropy_error(o, s), d_z)
}

/// Read-only view of the models used to evaluate a batch.
#[derive(Debug, Clone, Copy)]
pub struct Heads<'a> {
    pub cvr: &'a FactorizationMachine,
    pub ctr: Option<&'a FactorizationMachine>,
    pub imputation: Option<&'a FactorizationMachine>,
    pub num_users: usize,
    pub head: ImputationHead,
    pub floor: f64,
}

impl<'a> Heads<'a> {
    pub fn features(&self, pair: &Pair) -> [usize; 2] {
        [pair.user, self.num_users + pair.item]
    }

    pub fn cvr_logit(&self, pair: &Pair) -> f64 {
        self.cvr.score_unchecked(&self.features(pair))
    }

    /// Propensity and its derivative; 1 without a CTR model.
    pub fn propensity(&self, pair: &Pair) -> (f64, f64) {
        match self.ctr {
            Some(ctr) => propensity(ctr.score_unchecked(&self.features(pair)), self.floor),
            None => (1.0, 0.0),
        }
    }

    pub fn imputation_logit(&self, pair: &Pair) -> f64 {
        self.imputation.expect("estimator without imputation model asked for ê").score_unchecked(&self.features(pair))
    }

    /// The pair as an estimator sample. ê is zero without an imputation
    /// model.
    pub fn sample(&self, pair: &Pair) -> Sample {
        let f = self.cvr_logit(pair);
        let imputed_error = match self.imputation {
            Some(_) => imputed_error(self.head, self.imputation_logit(pair), f).value,
            None => 0.0,
        };
        Sample {
            user: pair.user,
            item: pair.item,
            clicked: pair.clicked(),
            converted: pair.converted,
            predicted: sigmoid(f),
            imputed_error,
            propensity: self.propensity(pair).0,
        }
    }
}

/// `scale · Σ_clicked c(p̂, λ) (ê - e)²` and its gradient in θ, added into
/// `grad`. `lambdas` is indexed like `batch`.
pub fn imputation_gradient(
    heads: &Heads,
    batch: &[Pair],
    kind: ImputationLoss,
    lambdas: Option<&[f64]>,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let theta = heads.imputation.expect("imputation model required");
    let mut loss = 0.0;
    for (k, pair) in batch.iter().enumerate() {
        let Some(converted) = pair.converted else { continue };
        let features = heads.features(pair);
        let f = heads.cvr.score_unchecked(&features);
        let g = theta.score_unchecked(&features);
        let imp = imputed_error(heads.head, g, f);
        let (e, _) = prediction_error(converted, f);
        let lambda = lambdas.map_or(0.0, |l| l[k]);
        let c = imputation_coefficient(kind, heads.propensity(pair).0, lambda);
        let d = imp.value - e;
        loss += scale * c * d * d;
        theta.accumulate_gradient_unchecked(&features, scale * 2.0 * c * d * imp.d_g, grad);
    }
    loss
}

/// Objective of the CVR (and, in joint mode, CTR) model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionLoss {
    /// Errors on clicked events.
    Naive,
    /// Propensity-weighted errors on clicked events.
    Ips,
    /// Observed errors on clicked events, imputed errors elsewhere.
    Eib,
    /// Doubly robust sum, plus the click loss when the CTR model trains.
    Ctcvr,
}

impl PredictionLoss {
    pub fn for_estimator(estimator: Estimator) -> Self {
        match estimator {
            Estimator::Naive => PredictionLoss::Naive,
            Estimator::Ips => PredictionLoss::Ips,
            Estimator::Eib => PredictionLoss::Eib,
            _ => PredictionLoss::Ctcvr,
        }
    }

    /// Whether unclicked events enter the batch.
    pub fn uses_unclicked(self) -> bool {
        matches!(self, PredictionLoss::Eib | PredictionLoss::Ctcvr)
    }
}

/// Per-sample derivatives of the CTCVR objective, shared by the gradient
/// and the hypergradient.
#[derive(Debug, Clone, Copy)]
pub struct CtcvrTerms {
    pub loss: f64,
    /// ∂ℓ/∂f.
    pub d_f: f64,
    /// ∂ℓ/∂z including the click loss.
    pub d_z: f64,
    /// ∂²ℓ/∂f∂g.
    pub d_fg: f64,
    /// ∂²ℓ/∂z∂g.
    pub d_zg: f64,
}

/// `ℓ = ê + o (e - ê) / p̂ [+ CE(o, σ(z))]` for one pair, given logits.
pub fn ctcvr_terms(
    head: ImputationHead,
    pair: &Pair,
    f: f64,
    g: f64,
    z: Option<f64>,
    floor: f64,
    with_click_loss: bool,
) -> CtcvrTerms {
    let imp = imputed_error(head, g, f);
    let (p_hat, dp_dz) = z.map_or((1.0, 0.0), |z| propensity(z, floor));
    let mut terms = CtcvrTerms { loss: imp.value, d_f: imp.d_f, d_z: 0.0, d_fg: imp.d_gf, d_zg: 0.0 };
    if let Some(converted) = pair.converted {
        let (e, de) = prediction_error(converted, f);
        let w = 1.0 / p_hat;
        terms.loss += (e - imp.value) * w;
        terms.d_f = imp.d_f * (1.0 - w) + de * w;
        terms.d_fg = imp.d_gf * (1.0 - w);
        terms.d_z = -(e - imp.value) * w * w * dp_dz;
        terms.d_zg = imp.d_g * w * w * dp_dz;
    }
    if with_click_loss {
        if let Some(z) = z {
            let (l, d) = click_loss(pair.clicked(), z);
            terms.loss += l;
            terms.d_z += d;
        }
    }
    terms
}

/// `scale · Σ ℓ_i` for the chosen objective; gradients are added into
/// `grad_cvr` and, when given, `grad_ctr`.
pub fn prediction_gradient(
    heads: &Heads,
    loss: PredictionLoss,
    batch: &[Pair],
    scale: f64,
    grad_cvr: &mut [f64],
    mut grad_ctr: Option<&mut [f64]>,
) -> f64 {
    let mut total = 0.0;
    for pair in batch {
        let features = heads.features(pair);
        let f = heads.cvr.score_unchecked(&features);
        let (value, d_f, d_z) = match loss {
            PredictionLoss::Naive | PredictionLoss::Ips => match pair.converted {
                Some(converted) => {
                    let (e, de) = prediction_error(converted, f);
                    let w = if loss == PredictionLoss::Ips { 1.0 / heads.propensity(pair).0 } else { 1.0 };
                    (e * w, de * w, 0.0)
                }
                None => (0.0, 0.0, 0.0),
            },
            PredictionLoss::Eib => match pair.converted {
                Some(converted) => {
                    let (e, de) = prediction_error(converted, f);
                    (e, de, 0.0)
                }
                None => {
                    let imp = imputed_error(heads.head, heads.imputation_logit(pair), f);
                    (imp.value, imp.d_f, 0.0)
                }
            },
            PredictionLoss::Ctcvr => {
                let g = heads.imputation_logit(pair);
                let z = heads.ctr.map(|m| m.score_unchecked(&features));
                let t = ctcvr_terms(heads.head, pair, f, g, z, heads.floor, grad_ctr.is_some());
                (t.loss, t.d_f, t.d_z)
            }
        };
        total += scale * value;
        heads.cvr.accumulate_gradient_unchecked(&features, scale * d_f, grad_cvr);
        if let (Some(g), Some(ctr)) = (grad_ctr.as_deref_mut(), heads.ctr) {
            ctr.accumulate_gradient_unchecked(&features, scale * d_z, g);
        }
    }
    total
}

/// `scale · Σ CE(o, σ(z))` over the batch with its gradient in ζ.
pub fn click_gradient(
    ctr: &FactorizationMachine,
    num_users: usize,
    batch: &[Pair],
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for pair in batch {
        let features = [pair.user, num_users + pair.item];
        let (l, d) = click_loss(pair.clicked(), ctr.score_unchecked(&features));
        total += scale * l;
        ctr.accumulate_gradient_unchecked(&features, scale * d, grad);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{
        dr_sum, imputation_loss, loss_ctr, loss_eib, loss_ips, loss_naive, Denominator, SampleBundle,
    };
    use crate::rng::{stream_rng, Stream};

    const USERS: usize = 4;
    const ITEMS: usize = 5;

    fn models(seed: u64) -> (FactorizationMachine, FactorizationMachine, FactorizationMachine) {
        let mut rng = stream_rng(seed, Stream::CvrInit);
        let n = USERS + ITEMS;
        let mut cvr = FactorizationMachine::init(n, 3, 0.6, &mut rng);
        let mut ctr = FactorizationMachine::init(n, 3, 0.6, &mut rng);
        let theta = FactorizationMachine::init(n, 3, 0.6, &mut rng);
        cvr.params_mut()[0] = -0.4;
        ctr.params_mut()[0] = -0.7;
        (cvr, ctr, theta)
    }

    fn batch() -> Vec<Pair> {
        vec![
            Pair { user: 0, item: 1, converted: Some(true) },
            Pair { user: 1, item: 2, converted: Some(false) },
            Pair { user: 2, item: 0, converted: None },
            Pair { user: 3, item: 4, converted: Some(true) },
            Pair { user: 0, item: 3, converted: None },
            Pair { user: 2, item: 2, converted: Some(false) },
        ]
    }

    fn heads<'a>(
        cvr: &'a FactorizationMachine,
        ctr: &'a FactorizationMachine,
        theta: &'a FactorizationMachine,
        head: ImputationHead,
    ) -> Heads<'a> {
        Heads { cvr, ctr: Some(ctr), imputation: Some(theta), num_users: USERS, head, floor: 0.03 }
    }

    fn bundle(h: &Heads, pairs: &[Pair]) -> SampleBundle {
        SampleBundle::new(pairs.iter().map(|p| h.sample(p)).collect(), Denominator::Batch).unwrap()
    }

    fn fd_check(params: &FactorizationMachine, analytic: &[f64], loss: impl Fn(&FactorizationMachine) -> f64) {
        let h = 1e-5;
        for (idx, &g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.params_mut()[idx] += h;
            let mut minus = params.clone();
            minus.params_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let scale = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / scale < 1e-4, "param {idx}: fd {fd} vs analytic {}", g);
        }
    }

    #[test]
    fn imputed_error_derivatives() {
        for head in [ImputationHead::ImputedLabel, ImputationHead::DirectError] {
            for (g, f) in [(0.3, -0.7), (-1.2, 2.0), (2.5, 0.1)] {
                let t = imputed_error(head, g, f);
                let h = 1e-6;
                let dg = (imputed_error(head, g + h, f).value - imputed_error(head, g - h, f).value) / (2.0 * h);
                let df = (imputed_error(head, g, f + h).value - imputed_error(head, g, f - h).value) / (2.0 * h);
                let dgf = (imputed_error(head, g + h, f).d_f - imputed_error(head, g - h, f).d_f) / (2.0 * h);
                assert!((t.d_g - dg).abs() < 1e-7 && (t.d_f - df).abs() < 1e-7 && (t.d_gf - dgf).abs() < 1e-7);
                assert!(t.value >= 0.0);
            }
        }
    }

    #[test]
    fn imputation_gradient_matches_estimator_losses() {
        let (cvr, ctr, theta) = models(1);
        let pairs = batch();
        let lambdas = [0.2, 0.9, 0.5, 0.4, 0.1, 0.7];
        for kind in [
            ImputationLoss::Plain,
            ImputationLoss::DrJl,
            ImputationLoss::Mrdr,
            ImputationLoss::DrBias,
            ImputationLoss::DrMse,
        ] {
            let h = heads(&cvr, &ctr, &theta, ImputationHead::ImputedLabel);
            let mut grad = vec![0.0; theta.num_params()];
            let value = imputation_gradient(&h, &pairs, kind, Some(&lambdas), 0.5, &mut grad);
            let reference = |t: &FactorizationMachine| {
                let h = heads(&cvr, &ctr, t, ImputationHead::ImputedLabel);
                0.5 * imputation_loss(&bundle(&h, &pairs), kind, Some(&lambdas)).unwrap()
            };
            assert!((value - reference(&theta)).abs() < 1e-12);
            fd_check(&theta, &grad, reference);
        }
    }

    #[test]
    fn ctcvr_gradient_matches_finite_differences() {
        let (cvr, ctr, theta) = models(2);
        let pairs = batch();
        for head in [ImputationHead::ImputedLabel, ImputationHead::DirectError] {
            let h = heads(&cvr, &ctr, &theta, head);
            let mut g_cvr = vec![0.0; cvr.num_params()];
            let mut g_ctr = vec![0.0; ctr.num_params()];
            let value = prediction_gradient(&h, PredictionLoss::Ctcvr, &pairs, 1.0, &mut g_cvr, Some(&mut g_ctr));
            let total = |c: &FactorizationMachine, z: &FactorizationMachine| {
                let h = heads(c, z, &theta, head);
                let b = bundle(&h, &pairs);
                let raw: Vec<Sample> = pairs
                    .iter()
                    .map(|p| Sample { propensity: sigmoid(z.score_unchecked(&h.features(p))), ..h.sample(p) })
                    .collect();
                dr_sum(&b) + loss_ctr(&SampleBundle::new(raw, Denominator::Batch).unwrap())
            };
            assert!((value - total(&cvr, &ctr)).abs() < 1e-10);
            fd_check(&cvr, &g_cvr, |c| total(c, &ctr));
            fd_check(&ctr, &g_ctr, |z| total(&cvr, z));
        }
    }

    #[test]
    fn other_prediction_losses_match_estimators() {
        let (cvr, ctr, theta) = models(3);
        let pairs = batch();
        let n = pairs.len() as f64;
        let clicked: Vec<Pair> = pairs.iter().copied().filter(Pair::clicked).collect();
        type Reference = fn(&SampleBundle) -> f64;
        let cases: [(PredictionLoss, &[Pair], f64, Reference); 3] = [
            (PredictionLoss::Naive, &clicked, 1.0 / clicked.len() as f64, |b| loss_naive(b).unwrap()),
            (PredictionLoss::Ips, &pairs, 1.0 / n, loss_ips),
            (PredictionLoss::Eib, &pairs, 1.0 / n, loss_eib),
        ];
        for (loss, batch, scale, reference) in cases {
            let h = heads(&cvr, &ctr, &theta, ImputationHead::ImputedLabel);
            let mut grad = vec![0.0; cvr.num_params()];
            let value = prediction_gradient(&h, loss, batch, scale, &mut grad, None);
            let eval = |c: &FactorizationMachine| {
                reference(&bundle(&heads(c, &ctr, &theta, ImputationHead::ImputedLabel), batch))
            };
            assert!((value - eval(&cvr)).abs() < 1e-12, "{loss:?}");
            fd_check(&cvr, &grad, eval);
        }
    }

    #[test]
    fn propensity_floor_stops_gradient() {
        assert_eq!(propensity(-10.0, 0.03), (0.03, 0.0));
        let (p, d) = propensity(0.0, 0.03);
        assert_eq!((p, d), (0.5, 0.25));
    }
}

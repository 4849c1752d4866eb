//! Training objectives: pixel, perceptual and identity reconstruction, the
//! adversarial pair, the residual-feature regularizer and their weighted sum.
//!
//! Distances use the per-element-mean convention `‖d‖₂ / √numel` unless noted,
//! so weights transfer across batch sizes and resolutions.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::attrnet::AttrNet;
use crate::error::{Error, Result};

/// Default perceptual depths (1-based).
pub const PERCEPTUAL_LAYERS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormConvention {
    #[default]
    PerElementMean,
    Plain,
}

/// L2 norm of `d` under the given convention. Uses `norm()` so the gradient
/// at exactly zero is zero rather than NaN.
pub fn l2(d: &Tensor, convention: NormConvention) -> Tensor {
    let n = d.norm();
    match convention {
        NormConvention::Plain => n,
        NormConvention::PerElementMean => n / (d.numel() as f64).sqrt(),
    }
}

fn check_outputs(outputs: &[&Tensor], target: &Tensor) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::validation("outputs", "at least one output is required"));
    }
    for o in outputs {
        if o.size() != target.size() {
            return Err(Error::Shape(format!("output {:?} vs target {:?}", o.size(), target.size())));
        }
    }
    Ok(())
}

/// Σ_o ‖o − x‖₂ (mean convention).
pub fn rec_l2(outputs: &[&Tensor], target: &Tensor) -> Result<Tensor> {
    check_outputs(outputs, target)?;
    Ok(sum(outputs.iter().map(|o| l2(&(*o - target), NormConvention::PerElementMean))))
}

/// Σ_o Σ_j ‖Φ_j(o) − Φ_j(x)‖₂ with the frozen attribute network as Φ.
pub fn rec_perceptual(outputs: &[&Tensor], target: &Tensor, phi: &AttrNet, layers: &[usize]) -> Result<Tensor> {
    check_outputs(outputs, target)?;
    let reference = phi.features(target, layers)?;
    let mut terms = Vec::new();
    for o in outputs {
        for (f, r) in phi.features(o, layers)?.iter().zip(&reference) {
            terms.push(l2(&(f - r), NormConvention::PerElementMean));
        }
    }
    Ok(sum(terms.into_iter()))
}

/// Σ_o mean_b (1 − ⟨A(x_b), A(o_b)⟩).
pub fn rec_identity(outputs: &[&Tensor], target: &Tensor, a: &AttrNet) -> Result<Tensor> {
    check_outputs(outputs, target)?;
    let reference = a.embed(target)?;
    let mut terms = Vec::new();
    for o in outputs {
        let cos = (a.embed(o)? * &reference).sum_dim_intlist(&[1i64][..], false, None);
        terms.push((-&cos + 1.0).mean(cos.kind()));
    }
    Ok(sum(terms.into_iter()))
}

/// Discriminator and encoder adversarial losses from logits. The
/// discriminator term weights the real logit by the number of fakes; both are
/// batch means. Callers detach fakes for the discriminator update.
pub fn adv_loss(d_real: &Tensor, d_fakes: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    if d_fakes.is_empty() {
        return Err(Error::validation("d_fakes", "at least one fake is required"));
    }
    let k = d_fakes.len() as f64;
    let kind = d_real.kind();
    // −log σ(t) = softplus(−t), −log(1 − σ(t)) = softplus(t).
    let real = (-d_real).softplus().mean(kind) * k;
    let loss_d = d_fakes.iter().fold(real, |acc, f| acc + f.softplus().mean(kind));
    let loss_e = sum(d_fakes.iter().map(|f| (-*f).softplus().mean(kind)));
    Ok((loss_d, loss_e))
}

/// Σ ‖F‖₂ over the residual features produced in a step.
pub fn feat_reg(residuals: &[&Tensor], convention: NormConvention) -> Tensor {
    if residuals.is_empty() {
        return Tensor::from(0f32);
    }
    sum(residuals.iter().map(|f| l2(f, convention)))
}

fn sum(mut it: impl Iterator<Item = Tensor>) -> Tensor {
    let first = it.next().unwrap_or_else(|| Tensor::from(0f32));
    it.fold(first, |acc, t| acc + t)
}

/// λ coefficients of the combined objective for one training path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda_r3: f64,
    pub lambda_f: f64,
}

impl LossWeights {
    pub fn no_edit() -> Self {
        Self {
            lambda_a: 0.1,
            lambda_r1: 1.0,
            lambda_r2: 0.001,
            lambda_r3: 0.1,
            lambda_f: 5.0,
        }
    }

    /// Pixel-level cycle consistency is off on this path.
    pub fn cycle() -> Self {
        Self {
            lambda_a: 0.1,
            lambda_r1: 0.0,
            lambda_r2: 0.0001,
            lambda_r3: 0.01,
            lambda_f: 5.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            lambda_a: 0.0,
            lambda_r1: 0.0,
            lambda_r2: 0.0,
            lambda_r3: 0.0,
            lambda_f: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation("loss_weights", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("adv", self.lambda_a),
            ("rec_l2", self.lambda_r1),
            ("rec_p", self.lambda_r2),
            ("rec_id", self.lambda_r3),
            ("feat", self.lambda_f),
        ]
    }
}

/// Loss terms present in a step; absent terms contribute nothing.
#[derive(Default)]
pub struct LossTerms {
    pub adv: Option<Tensor>,
    pub rec_l2: Option<Tensor>,
    pub rec_p: Option<Tensor>,
    pub rec_id: Option<Tensor>,
    pub feat: Option<Tensor>,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, Option<&Tensor>); 5] {
        [
            ("adv", self.adv.as_ref()),
            ("rec_l2", self.rec_l2.as_ref()),
            ("rec_p", self.rec_p.as_ref()),
            ("rec_id", self.rec_id.as_ref()),
            ("feat", self.feat.as_ref()),
        ]
    }
}

/// Weighted objective plus the unweighted value of every present term.
pub fn full_objective(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, BTreeMap<String, f64>)> {
    weights.validate()?;
    let mut values = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    for ((name, term), (_, lambda)) in terms.named().into_iter().zip(weights.named()) {
        let Some(t) = term else { continue };
        let v = f64::try_from(t.detach().to_kind(Kind::Double))?;
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        values.insert(name.to_string(), v);
        let weighted = t * lambda;
        total = Some(match total {
            Some(acc) => acc + weighted,
            None => weighted,
        });
    }
    let total = total.unwrap_or_else(|| Tensor::from(0f32));
    Ok((total, values))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub path: String,
    pub term: String,
    pub value: f64,
}

/// Writes one JSON line per term.
pub fn write_loss_records(out: &mut impl Write, iter: u64, path: &str, values: &BTreeMap<String, f64>) -> Result<()> {
    for (term, &value) in values {
        let rec = LossRecord {
            iter,
            path: path.to_string(),
            term: term.clone(),
            value,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrnet::AttrNetConfig;
    use tch::Device;

    fn t(v: &[f32], shape: &[i64]) -> Tensor {
        Tensor::from_slice(v).view(shape)
    }

    fn scalar(x: &Tensor) -> f64 {
        f64::try_from(x).unwrap()
    }

    #[test]
    fn rec_l2_cases() {
        let x = Tensor::rand([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        assert_eq!(scalar(&rec_l2(&[&x], &x).unwrap()), 0.0);
        let y = &x + 0.1;
        assert!((scalar(&rec_l2(&[&y], &x).unwrap()) - 0.1).abs() < 1e-6);
        let z = &x - 0.3;
        let both = scalar(&rec_l2(&[&y, &z], &x).unwrap());
        let parts = scalar(&rec_l2(&[&y], &x).unwrap()) + scalar(&rec_l2(&[&z], &x).unwrap());
        assert!((both - parts).abs() < 1e-6);
        assert!(rec_l2(&[], &x).is_err());
    }

    #[test]
    fn zero_gradient_at_identity() {
        let x = Tensor::rand([1, 3, 4, 4], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        let target = x.detach();
        rec_l2(&[&x], &target).unwrap().backward();
        let g = x.grad();
        assert_eq!(scalar(&g.abs().sum(Kind::Float)), 0.0);
    }

    #[test]
    fn adv_worked_example() {
        let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
        let real = t(&[logit(0.9)], &[1]);
        let f1 = t(&[logit(0.1)], &[1]);
        let f2 = t(&[logit(0.2)], &[1]);
        let (d, _) = adv_loss(&real, &[&f1, &f2]).unwrap();
        let expected = -(2.0 * 0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln());
        assert!((scalar(&d) - expected).abs() < 1e-3);
        assert!((scalar(&d) - 0.5392).abs() < 1e-3);
        // k = 1: the real term carries weight one.
        let (d1, _) = adv_loss(&real, &[&f1]).unwrap();
        assert!((scalar(&d1) - -(0.9f64.ln() + 0.9f64.ln())).abs() < 1e-5);
        let perfect = adv_loss(&t(&[40.0], &[1]), &[&t(&[-40.0], &[1])]).unwrap().0;
        assert!(scalar(&perfect) < 1e-12);
        assert!(adv_loss(&real, &[]).is_err());
    }

    #[test]
    fn feat_reg_cases() {
        let zero = Tensor::zeros([1, 2, 2, 2], (Kind::Float, Device::Cpu));
        assert_eq!(scalar(&feat_reg(&[&zero], NormConvention::default())), 0.0);
        let threes = t(&[3.0; 4], &[1, 1, 2, 2]);
        assert!((scalar(&feat_reg(&[&threes], NormConvention::Plain)) - 6.0).abs() < 1e-6);
        assert!((scalar(&feat_reg(&[&threes], NormConvention::PerElementMean)) - 3.0).abs() < 1e-6);
        let f = Tensor::randn([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        let doubled = &f * 2.0;
        let a = scalar(&feat_reg(&[&f], NormConvention::Plain));
        assert!((scalar(&feat_reg(&[&doubled], NormConvention::Plain)) - 2.0 * a).abs() < 1e-4 * a);
    }

    #[test]
    fn identity_and_perceptual_zero_at_target() {
        let net = AttrNet::new(&AttrNetConfig::default(), 32, 1).unwrap();
        let x = Tensor::rand([2, 3, 32, 32], (Kind::Float, Device::Cpu)) * 2 - 1;
        assert!(scalar(&rec_identity(&[&x], &x, &net).unwrap()).abs() < 1e-6);
        assert_eq!(scalar(&rec_perceptual(&[&x], &x, &net, &PERCEPTUAL_LAYERS).unwrap()), 0.0);
        let y = Tensor::rand([2, 3, 32, 32], (Kind::Float, Device::Cpu)) * 2 - 1;
        assert!(scalar(&rec_perceptual(&[&y], &x, &net, &PERCEPTUAL_LAYERS).unwrap()) > 0.0);
    }

    #[test]
    fn opposite_embedding_costs_two() {
        // With a single output whose embedding is −A(x) the contribution is 2:
        // check the arithmetic directly on embeddings.
        let e = t(&[0.6, 0.8], &[1, 2]);
        let cos = (&e * -&e).sum_dim_intlist(&[1i64][..], false, None);
        assert!((scalar(&(-&cos + 1.0).mean(Kind::Float)) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn objective_defaults_and_nan() {
        let nw = LossWeights::no_edit();
        assert_eq!((nw.lambda_a, nw.lambda_r1, nw.lambda_r2, nw.lambda_r3, nw.lambda_f), (0.1, 1.0, 0.001, 0.1, 5.0));
        let cw = LossWeights::cycle();
        assert_eq!((cw.lambda_a, cw.lambda_r1, cw.lambda_r2, cw.lambda_r3), (0.1, 0.0, 0.0001, 0.01));
        let terms = LossTerms {
            rec_l2: Some(Tensor::from(2.0f32)),
            feat: Some(Tensor::from(1.0f32)),
            ..Default::default()
        };
        let (zero, _) = full_objective(&terms, &LossWeights::zero()).unwrap();
        assert_eq!(scalar(&zero), 0.0);
        let (total, values) = full_objective(&terms, &nw).unwrap();
        assert!((scalar(&total) - 7.0).abs() < 1e-6);
        assert_eq!(values["rec_l2"], 2.0);
        let bad = LossTerms {
            rec_id: Some(Tensor::from(f32::NAN)),
            ..Default::default()
        };
        match full_objective(&bad, &nw) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "rec_id"),
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn loss_records_are_ndjson() {
        let mut buf = Vec::new();
        let values = BTreeMap::from([("adv".to_string(), 0.5), ("feat".to_string(), 0.25)]);
        write_loss_records(&mut buf, 7, "cycle", &values).unwrap();
        let lines: Vec<LossRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].term, "feat");
        assert_eq!(lines[0].iter, 7);
    }
}

use panfuse_autograd::optim::Adam;
use panfuse_autograd::{Graph, Var};
use serde::{Deserialize, Serialize};

use super::UnfoldingModel;
use crate::batch::GradAccumulator;
use crate::error::{argument, geometry};
use crate::mae::TokenMae;
use crate::wald::SamplePair;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub image: f64,
    pub consistency: f64,
}

/// Mean absolute error between two tensors of equal shape.
pub fn image_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(geometry!("prediction {:?} vs reference {:?}", pred.shape(), gt.shape()));
    }
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// `L_img + lambda * L_ss` for one output/reference pair. Returns the total
/// and its two terms as graph nodes.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: Var,
    gt: Var,
    e_mae: Option<&TokenMae<T>>,
    lambda: f64,
) -> Result<(Var, Var, Option<Var>)> {
    if g.shape(out) != g.shape(gt) {
        return Err(geometry!("output {:?} vs ground truth {:?}", g.shape(out), g.shape(gt)));
    }
    let img = g.mean_abs_diff(out, gt);
    if lambda == 0.0 {
        return Ok((img, img, None));
    }
    let e_mae = e_mae.ok_or_else(|| argument!("consistency weight {lambda} set without a token MAE"))?;
    let ss = e_mae.consistency_loss(g, out, gt)?;
    let weighted = g.scale(ss, lambda);
    Ok((g.add(img, weighted), img, Some(ss)))
}

fn sample_terms<T: Scalar>(
    model: &UnfoldingModel<T>,
    g: &mut Graph<T>,
    pair: &SamplePair<T>,
    e_mae: Option<&TokenMae<T>>,
) -> Result<(Var, LossTerms)> {
    let out = model.forward_graph(g, &pair.lrms, &pair.pan)?;
    let gt = g.input(pair.gt.tensor().clone());
    let (total, img, ss) = composite_loss(g, out, gt, e_mae, model.config.lambda)?;
    let terms = LossTerms {
        total: g.value(total).item().as_f64(),
        image: g.value(img).item().as_f64(),
        consistency: ss.map_or(0.0, |s| g.value(s).item().as_f64()),
    };
    Ok((total, terms))
}

fn mean_terms(sum: LossTerms, n: usize) -> LossTerms {
    let k = n as f64;
    LossTerms {
        total: sum.total / k,
        image: sum.image / k,
        consistency: sum.consistency / k,
    }
}

fn add_terms(a: LossTerms, b: LossTerms) -> LossTerms {
    LossTerms {
        total: a.total + b.total,
        image: a.image + b.image,
        consistency: a.consistency + b.consistency,
    }
}

/// Batch-mean loss without touching the parameters.
pub fn batch_loss<T: Scalar>(model: &UnfoldingModel<T>, batch: &[SamplePair<T>], e_mae: Option<&TokenMae<T>>) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(argument!("empty batch"));
    }
    let mut sum = LossTerms::default();
    for pair in batch {
        let mut g = Graph::new();
        g.freeze(&model.store);
        let (_, terms) = sample_terms(model, &mut g, pair, e_mae)?;
        sum = add_terms(sum, terms);
    }
    Ok(mean_terms(sum, batch.len()))
}

/// One Adam step on the batch-mean composite loss. Samples are processed in
/// order, so a fixed seed and batch order give bit-identical parameters.
pub fn train_step<T: Scalar>(
    model: &mut UnfoldingModel<T>,
    opt: &mut Adam<T>,
    batch: &[SamplePair<T>],
    e_mae: Option<&TokenMae<T>>,
    lr: f64,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(argument!("empty batch"));
    }
    let mut acc = GradAccumulator::new(&model.store);
    let mut sum = LossTerms::default();
    for pair in batch {
        let mut g = Graph::new();
        let (total, terms) = sample_terms(model, &mut g, pair, e_mae)?;
        sum = add_terms(sum, terms);
        acc.add(g.backward(total).for_store(&model.store));
    }
    let terms = mean_terms(sum, batch.len());
    let grads = acc.finish(batch.len());
    let grad_ok = grads.iter().flatten().all(|t| t.is_finite());
    if !terms.total.is_finite() || !grad_ok {
        let stages: Vec<String> = model
            .stage_params
            .iter()
            .map(|p| format!("(delta {:.4e}, eta {:.4e})", p.delta(&model.store), p.eta(&model.store)))
            .collect();
        let worst = model
            .store
            .iter()
            .map(|(_, name, t)| (name, t.max_abs().as_f64()))
            .fold(("", 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a });
        return Err(Error::Divergence {
            step: opt.steps(),
            detail: format!(
                "loss {:?}, finite gradients {grad_ok}, stage params [{}], largest weight {} = {:e}",
                terms,
                stages.join(", "),
                worst.0,
                worst.1
            ),
        });
    }
    opt.step(&mut model.store, &grads, lr);
    Ok(terms)
}

/// Step decay: the rate is multiplied by `factor` after every `every`
/// completed epochs. Epochs are 1-based, so with `every = 200` epochs
/// 1..=200 run at the base rate and epoch 201 at half of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub every: Option<u64>,
    pub factor: f64,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: u64) -> f64 {
        match self.every {
            Some(n) if n > 0 => self.base_lr * self.factor.powi((epoch.saturating_sub(1) / n) as i32),
            _ => self.base_lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::TokenMaeConfig;
    use crate::raster::{MsImage, PanImage};
    use crate::unfolding::UnfoldingConfig;
    use crate::fingerprint::store_fingerprint;
    use panfuse_autograd::optim::AdamConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> SamplePair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(0.1..0.9));
        SamplePair::new(
            MsImage::new(t(&[2, 8, 8])).unwrap(),
            PanImage::new(t(&[1, 16, 16])).unwrap(),
            MsImage::new(t(&[2, 16, 16])).unwrap(),
            2,
        )
        .unwrap()
    }

    fn small_model(lambda: f64) -> UnfoldingModel<f64> {
        UnfoldingModel::new(
            UnfoldingConfig {
                stages: 2,
                width: 4,
                encoder_blocks: 2,
                lambda,
                ..UnfoldingConfig::new(2, 2)
            },
            0,
        )
        .unwrap()
    }

    fn small_token_mae() -> TokenMae<f64> {
        TokenMae::new(
            TokenMaeConfig {
                patch: 8,
                dim: 8,
                encoder_layers: 1,
                decoder_layers: 1,
                heads: 2,
                ..TokenMaeConfig::new(2, 16, 16)
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn uniform_error_gives_that_error() {
        let a = Tensor::<f64>::full(&[2, 4, 4], 0.3);
        let b = Tensor::<f64>::full(&[2, 4, 4], 0.4);
        assert!((image_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_output_scores_zero() {
        let e = small_token_mae();
        let gt = pair(1).gt;
        let mut g = Graph::new();
        let o = g.input(gt.tensor().clone());
        let r = g.input(gt.tensor().clone());
        let (total, img, ss) = composite_loss(&mut g, o, r, Some(&e), 1.0).unwrap();
        assert_eq!(g.value(total).item(), 0.0);
        assert_eq!(g.value(img).item(), 0.0);
        assert_eq!(g.value(ss.unwrap()).item(), 0.0);
    }

    #[test]
    fn lambda_weights_the_consistency_term() {
        let e = small_token_mae();
        let (a, b) = (pair(1).gt, pair(2).gt);
        let run = |lambda: f64| {
            let mut g = Graph::new();
            let o = g.input(a.tensor().clone());
            let r = g.input(b.tensor().clone());
            let (t, i, s) = composite_loss(&mut g, o, r, Some(&e), lambda).unwrap();
            (g.value(t).item(), g.value(i).item(), s.map(|s| g.value(s).item()))
        };
        let (t1, i1, s1) = run(1.0);
        assert!((t1 - (i1 + s1.unwrap())).abs() < 1e-15);
        let (t0, i0, s0) = run(0.0);
        assert_eq!(t0, i0);
        assert!(s0.is_none());
        assert_eq!(i0, i1);
    }

    #[test]
    fn missing_token_mae_rejected() {
        let m = small_model(1.0);
        assert!(matches!(batch_loss(&m, &[pair(1)], None), Err(Error::Argument(_))));
        assert!(matches!(batch_loss(&m, &[], None), Err(Error::Argument(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let e = small_token_mae();
        let batch = vec![pair(1), pair(2)];
        let run = || {
            let mut m = small_model(1.0);
            let mut opt = Adam::new(AdamConfig::default(), &m.store);
            for _ in 0..10 {
                train_step(&mut m, &mut opt, &batch, Some(&e), 5e-4).unwrap();
            }
            store_fingerprint(&m.store)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_params_stay_positive() {
        let batch = vec![pair(3)];
        let mut m = small_model(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &m.store);
        for _ in 0..20 {
            train_step(&mut m, &mut opt, &batch, None, 0.05).unwrap();
        }
        for p in &m.stage_params {
            assert!(p.delta(&m.store) > 0.0 && p.eta(&m.store) > 0.0);
        }
    }

    #[test]
    fn nan_input_is_divergence() {
        let mut m = small_model(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &m.store);
        let w = m.blocks[0].dec_out.weight;
        m.store.get_mut(w).data_mut()[0] = f64::NAN;
        let err = train_step(&mut m, &mut opt, &[pair(1)], None, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn decay_schedule() {
        let s = StepDecay {
            base_lr: 5e-4,
            every: Some(200),
            factor: 0.5,
        };
        assert_eq!(s.lr_at(1), 5e-4);
        assert_eq!(s.lr_at(200), 5e-4);
        assert_eq!(s.lr_at(201), 2.5e-4);
        assert_eq!(s.lr_at(401), 1.25e-4);
        assert_eq!(StepDecay { every: None, ..s }.lr_at(1000), 5e-4);
    }
}

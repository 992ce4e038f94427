use crate::blocks::Mh2fNet;
use crate::datapipe::Batch;
use crate::error::{Error, Result};
use crate::losses::{hybrid_graph, LossBreakdown, SsimParams};
use crate::ops::{Ops, Tape};

use super::adam::Adam;

/// Forward, hybrid loss, backward and one Adam update on `batch`.
/// Returns the loss measured before the update. Nothing is modified when a
/// non-finite value shows up.
pub fn train_step(model: &mut Mh2fNet<f32>, batch: &Batch, opt: &mut Adam<f32>, lambda: f64) -> Result<LossBreakdown> {
    if batch.rainy.shape() != batch.clean.shape() {
        return Err(Error::pre(format!(
            "batch shapes differ: {:?} vs {:?}",
            batch.rainy.shape(),
            batch.clean.shape()
        )));
    }
    let (breakdown, grads) = {
        let mut tape = Tape::new(&model.params);
        let x = tape.constant(batch.rainy.clone());
        let gt = tape.constant(batch.clean.clone());
        let y = model.forward(&mut tape, &x)?;
        if !tape.value(&y).all_finite() {
            return Err(Error::NonFinite("network output".to_string()));
        }
        let (loss, breakdown) = hybrid_graph(&mut tape, &y, &gt, lambda, &SsimParams::default())?;
        for (name, v) in [("l1", breakdown.l1), ("ssim_loss", breakdown.ssim_loss), ("total", breakdown.total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name}")));
            }
        }
        (breakdown, tape.backward(loss).into_params())
    };
    for (id, g) in model.params.ids().zip(&grads) {
        if g.as_ref().is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", model.params.name(id))));
        }
    }
    opt.update(&mut model.params, &grads)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::blocks::ModelConfig;
    use crate::losses::hybrid_loss;
    use crate::Tensor;

    fn setup(lr: f64) -> (Mh2fNet<f32>, Batch, Adam<f32>) {
        let model = Mh2fNet::new(ModelConfig::micro(2, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = Tensor::from_fn([2, 3, 16, 16], |_| rng.gen_range(0.2..0.8f32));
        let rainy = clean.map(|v| (v + 0.15).min(1.0));
        let opt = Adam::new(&model.params, lr, 0.9, 0.999, 1e-8);
        (model, Batch { rainy, clean }, opt)
    }

    fn eval(model: &Mh2fNet<f32>, b: &Batch) -> f64 {
        let mut ops = crate::ops::Eager::new(&model.params);
        let x = ops.constant(b.rainy.clone());
        let y = model.forward(&mut ops, &x).unwrap();
        hybrid_loss(&y, &b.clean, 0.2).unwrap().total
    }

    #[test]
    fn reports_pre_update_loss_and_descends() {
        let (mut model, batch, mut opt) = setup(1e-4);
        let before = eval(&model, &batch);
        let reported = train_step(&mut model, &batch, &mut opt, 0.2).unwrap();
        assert!((reported.total - before).abs() < 1e-5, "{} vs {before}", reported.total);
        assert!((reported.total - (reported.l1 + 0.2 * reported.ssim_loss)).abs() < 1e-12);
        let after = eval(&model, &batch);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (mut model, batch, mut opt) = setup(0.0);
        let before = model.params.clone();
        train_step(&mut model, &batch, &mut opt, 0.2).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn non_finite_parameter_is_named() {
        let (mut model, batch, mut opt) = setup(1e-3);
        let id = model.layout.tail.weight;
        model.params.get_mut(id).data_mut()[0] = f32::NAN;
        let snapshot = model.params.clone();
        let err = train_step(&mut model, &batch, &mut opt, 0.2).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(err.to_string().contains("network output"), "{err}");
        assert_eq!(opt.step, 0);
        assert_eq!(format!("{:?}", model.params), format!("{:?}", snapshot));
    }
}

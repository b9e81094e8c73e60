use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ndtensor::{ops::l1_loss, ParamStore, Tensor4};
use crate::netgen::{generate, GeneratorSpec};
use crate::pipeline::{denormalize, Dataset, KeyedRng, Preprocess};

/// Reported in place of an infinite PSNR (a pixel-exact prediction).
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute error in the normalized `[-1, 1]` space.
    pub mean_l1: f64,
    /// Mean per-pair PSNR over `[0, 255]` pixels, capped at 99 dB.
    pub psnr_db: f64,
    pub pairs: usize,
}

/// PSNR between two `[-1, 1]` images after mapping both back to `[0, 255]`.
pub fn psnr_db(prediction: &Tensor4, truth: &Tensor4) -> Result<f64> {
    let (p, t) = (denormalize(prediction), denormalize(truth));
    let se: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let mse = se / p.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Scores `predict` over every pair of `dataset`, preprocessed without
/// augmentation.
pub fn evaluate_with(
    dataset: &Dataset,
    pre: &Preprocess,
    mut predict: impl FnMut(&Tensor4) -> Result<Tensor4>,
) -> Result<EvalReport> {
    let pre = Preprocess { augment: false, ..*pre };
    let unused = KeyedRng::new(0);
    let (mut l1, mut psnr) = (0.0, 0.0);
    for i in 0..dataset.len() {
        let pair = dataset.sample_at(i, &pre, &unused, i as u64)?;
        let pred = predict(&pair.input_map)?;
        l1 += l1_loss(&pred, &pair.target_truth)?;
        psnr += psnr_db(&pred, &pair.target_truth)?;
    }
    let n = dataset.len();
    Ok(EvalReport {
        mean_l1: l1 / n as f64,
        psnr_db: psnr / n as f64,
        pairs: n,
    })
}

/// Scores a generator (dropout off) over `dataset`.
pub fn evaluate(
    generator: &ParamStore,
    spec: &GeneratorSpec,
    dataset: &Dataset,
    pre: &Preprocess,
) -> Result<EvalReport> {
    evaluate_with(dataset, pre, |x| generate(generator, spec, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::ImagePair;
    use crate::ndtensor::Shape;
    use crate::pipeline::{normalize, DataSource, JitterSpec};
    use rand::{Rng, SeedableRng};

    fn all_levels() -> Tensor4 {
        Tensor4::from_fn(Shape::new(1, 16, 16, 3), |_, y, x, _| (y * 16 + x) as f64)
    }

    fn eval_pre() -> Preprocess {
        Preprocess::eval(JitterSpec::scaled(16))
    }

    #[test]
    fn identity_on_identical_pairs_is_perfect() {
        let t = all_levels();
        let ds = Dataset::open(DataSource::Pairs(vec![ImagePair::new(t.clone(), t, "same").unwrap()])).unwrap();
        let r = evaluate_with(&ds, &eval_pre(), |x| Ok(x.clone())).unwrap();
        assert_eq!(
            r,
            EvalReport {
                mean_l1: 0.0,
                psnr_db: PSNR_CAP_DB,
                pairs: 1
            }
        );
    }

    #[test]
    fn identity_on_inverted_levels_has_closed_form_l1() {
        // Truth is 255 − k for every level k once; predicting the map costs
        // mean |2k − 255| / 127.5 = 2 · 64 / 127.5.
        let map = all_levels();
        let ds = Dataset::open(DataSource::Pairs(vec![ImagePair::new(
            map.clone(),
            map.map(|v| 255.0 - v),
            "inv",
        )
        .unwrap()]))
        .unwrap();
        let r = evaluate_with(&ds, &eval_pre(), |x| Ok(x.clone())).unwrap();
        assert!((r.mean_l1 - 128.0 / 127.5).abs() < 1e-6, "{}", r.mean_l1);
        // The all-zero prediction costs mean |k − 127.5| / 127.5 = 64 / 127.5.
        let r = evaluate_with(&ds, &eval_pre(), |x| Ok(Tensor4::zeros(x.shape()))).unwrap();
        assert!((r.mean_l1 - 64.0 / 127.5).abs() < 1e-6, "{}", r.mean_l1);
    }

    #[test]
    fn psnr_matches_analytic_value() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let truth = Tensor4::from_fn(Shape::new(1, 8, 8, 3), |_, _, _, _| {
            rng.random_range(10..=245u32) as f64
        });
        let delta = 5.0;
        let off = truth.map(|v| v + delta);
        let got = psnr_db(&normalize(&off), &normalize(&truth)).unwrap();
        let want = 20.0 * (255.0f64 / delta).log10();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

use calibra_core::scaling::{argmax, softmax_temp, weighted_avg_logit};
use calibra_core::{Grid, LogitMap};
use proptest::prelude::*;

fn logits_strategy() -> impl Strategy<Value = LogitMap> {
    (2usize..7, 1usize..9, 1usize..9).prop_flat_map(|(l, h, w)| {
        prop::collection::vec(-50f32..50.0, l * h * w).prop_map(move |v| LogitMap::new(l, h, w, v).unwrap())
    })
}

fn raw_argmax(z: &LogitMap, p: usize) -> u32 {
    argmax((0..z.classes()).map(|l| z.at(l, p))) as u32
}

fn check_output(z: &LogitMap, out: &calibra_core::scaling::CalibratedOutput) -> Result<(), TestCaseError> {
    for p in 0..z.pixels() {
        prop_assert_eq!(out.pred_labels.at(p), raw_argmax(z, p));
        let sum: f64 = (0..z.classes()).map(|l| out.probs.at(l, p) as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5, "sum {}", sum);
        let best = out.pred_labels.at(p) as usize;
        prop_assert_eq!(out.confidence.as_slice()[p], out.probs.at(best, p));
    }
    Ok(())
}

proptest! {
    #[test]
    fn argmax_survives_global_temperature(z in logits_strategy(), t in 1e-3f64..1e3) {
        check_output(&z, &softmax_temp(&z, t).unwrap())?;
    }

    #[test]
    fn argmax_survives_local_temperature(z in logits_strategy(), seed in any::<u64>()) {
        let (h, w) = z.dims();
        let mut s = seed;
        let grid = Grid::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // log-uniform over [1e-3, 1e3]
            10f32.powf(((s >> 40) as f32 / (1u64 << 24) as f32) * 6.0 - 3.0)
        });
        check_output(&z, &softmax_temp(&z, &grid).unwrap())?;
    }

    #[test]
    fn extreme_logits_stay_finite(v in prop::collection::vec(-1e30f32..1e30, 4), t in 1e-6f64..1e6) {
        let z = LogitMap::new(4, 1, 1, v).unwrap();
        let out = softmax_temp(&z, t).unwrap();
        prop_assert!(out.probs.as_slice().iter().all(|p| p.is_finite() && *p >= 0.0));
        check_output(&z, &out)?;
    }

    /// The softmax-weighted logit average is non-increasing in temperature,
    /// tends to the plain mean as T grows and to the max as T shrinks.
    #[test]
    fn weighted_logit_is_monotone_in_temperature(v in prop::collection::vec(-10f32..10.0, 2..8)) {
        let z = LogitMap::new(v.len(), 1, 1, v.clone()).unwrap();
        let ts: Vec<f64> = (0..=40).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 40.0)).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| weighted_avg_logit(&z, t, None).unwrap()).collect();
        for pair in vals.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9, "{:?}", pair);
        }
        let max = v.iter().copied().fold(f32::MIN, f32::max) as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        prop_assert!(vals[0] <= max + 1e-9);
        prop_assert!((weighted_avg_logit(&z, 1e6, None).unwrap() - mean).abs() < 1e-3);
    }

    #[test]
    fn temperature_one_is_plain_softmax(v in prop::collection::vec(-20f32..20.0, 3)) {
        let z = LogitMap::new(3, 1, 1, v.clone()).unwrap();
        let out = softmax_temp(&z, 1.0).unwrap();
        let e: Vec<f64> = v.iter().map(|&x| (x as f64).exp()).collect();
        let s: f64 = e.iter().sum();
        for l in 0..3 {
            prop_assert!((out.probs.at(l, 0) as f64 - e[l] / s).abs() < 1e-6);
        }
    }
}

#[test]
fn ties_resolve_to_lowest_index() {
    let z = LogitMap::new(3, 1, 1, vec![2.0, 5.0, 5.0]).unwrap();
    assert_eq!(softmax_temp(&z, 0.01).unwrap().pred_labels.at(0), 1);
}

#[test]
fn non_positive_temperature_is_rejected() {
    let z = LogitMap::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
    assert!(softmax_temp(&z, 0.0).is_err());
    assert!(softmax_temp(&z, -1.0).is_err());
    assert!(softmax_temp(&z, f64::NAN).is_err());
}

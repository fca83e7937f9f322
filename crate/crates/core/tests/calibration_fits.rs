use calibra_core::metrics::{all_region, bin_predictions, ece, pool_bins, BinScheme, MaskPolicy, ReliabilityBins};
use calibra_core::scaling::softmax_temp;
use calibra_core::synthgen::{generate, Miscalibration, SynthSpec};
use calibra_core::ts_opt::{fit_ibts_per_image, fit_ts_bisection, fit_ts_gradient, GradientConfig};
use calibra_core::verify::{run_suite, Suite, VerifyConfig};
use calibra_core::Split;

fn spec(miscalibration: Miscalibration, seed: u64) -> SynthSpec {
    SynthSpec {
        miscalibration,
        seed,
        train: 0,
        val: 10,
        test: 0,
        ..SynthSpec::default()
    }
}

#[test]
fn calibrated_data_needs_no_scaling() {
    let gen = generate(&spec(Miscalibration::None, 1)).unwrap();
    let val = &gen.split(Split::Val).unwrap().dataset;
    let fit = fit_ts_bisection(val, MaskPolicy::default()).unwrap();
    assert!((fit.temperature - 1.0).abs() < 0.05, "T = {}", fit.temperature);

    let per_sample: Vec<_> = val
        .samples()
        .iter()
        .map(|s| {
            let out = softmax_temp(&s.logits, 1.0).unwrap();
            let region = all_region(&s.labels, 2, 0);
            bin_predictions(&out, &s.labels, Some(&region.mask), BinScheme::EqualWidth(10)).unwrap().bins
        })
        .collect();
    let bins = ReliabilityBins {
        scheme: BinScheme::EqualWidth(10),
        bins: pool_bins(per_sample.iter().map(Vec::as_slice)),
    };
    let pooled = ece(&bins).unwrap();
    assert!(pooled < 0.02, "ECE {pooled}");
}

#[test]
fn global_scale_is_recovered_by_both_solvers() {
    let gen = generate(&spec(Miscalibration::Global { k: 3.0 }, 2)).unwrap();
    let val = &gen.split(Split::Val).unwrap().dataset;
    let bis = fit_ts_bisection(val, MaskPolicy::Full).unwrap();
    let grad = fit_ts_gradient(val, MaskPolicy::Full, GradientConfig::default()).unwrap();
    assert!(bis.converged && grad.converged);
    assert!((bis.temperature - 3.0).abs() / 3.0 < 0.05, "bisection {}", bis.temperature);
    assert!((grad.temperature - bis.temperature).abs() / bis.temperature < 1e-3);
}

#[test]
fn per_image_fit_tracks_each_scale() {
    let gen = generate(&spec(Miscalibration::PerImage { lo: 0.5, hi: 4.0 }, 3)).unwrap();
    let split = gen.split(Split::Val).unwrap();
    let fit = fit_ibts_per_image(&split.dataset, MaskPolicy::Full).unwrap();
    for (f, truth) in fit.fits.iter().zip(&split.truth) {
        let t = f.temperature;
        let k = truth.k.as_slice()[0] as f64;
        assert!((t - k).abs() / k < 0.1, "fitted {t}, true {k}");
    }
}

#[test]
fn verification_suites_pass_and_detect_corruption() {
    for suite in [Suite::Lemma1, Suite::Thm3, Suite::Gradcheck] {
        let ok = run_suite(suite, &VerifyConfig { seed: 1, corrupt: false }).unwrap();
        assert!(ok.passed, "{suite}: {:?}", ok.checks);
        let bad = run_suite(suite, &VerifyConfig { seed: 1, corrupt: true }).unwrap();
        assert!(!bad.passed, "{suite} missed corruption");
    }
}

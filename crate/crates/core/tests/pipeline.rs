use iwavb_core::estimators::{fit, heldout_loglik, substream, EstimatorKind, FitConfig, FitOutcome, Stream, Structure};
use iwavb_core::simlab::{simulate, SimDesign};
use iwavb_core::Real;

fn short_fit<T: Real>(kind: EstimatorKind) -> (FitOutcome<T>, SimDesign) {
    let design = SimDesign::confirmatory(300, 2, 3, 11);
    let truth = simulate(&design, 0).unwrap();
    let cfg = FitConfig {
        structure: Structure::Simple,
        free_corr: true,
        batch_size: 32,
        max_iterations: 600,
        window: 100,
        encoder_hidden: Some(vec![32]),
        disc_hidden: vec![32, 16],
        seed: 3,
        ..FitConfig::new(kind, 2)
    };
    (fit::<T>(&truth.responses, &cfg, |_| {}).unwrap(), design)
}

#[test]
fn every_estimator_improves_its_objective_in_both_precisions() {
    for kind in [EstimatorKind::Vae, EstimatorKind::Iwae, EstimatorKind::Avb, EstimatorKind::Iwavb] {
        let (f64_fit, _) = short_fit::<f64>(kind);
        let w = &f64_fit.windows;
        assert!(w.last().unwrap().average > w[0].average, "{kind} f64: {w:?}");
        let (f32_fit, _) = short_fit::<f32>(kind);
        let w = &f32_fit.windows;
        assert!(w.last().unwrap().average > w[0].average, "{kind} f32: {w:?}");
        assert!(f32_fit.trace.iter().all(|r| r.objective.is_finite()));
    }
}

#[test]
fn fitted_model_respects_structure_and_scores_new_respondents() {
    let (out, design) = short_fit::<f64>(EstimatorKind::Iwae);
    let dec = &out.model.decoder;
    let l = dec.loadings();
    for j in 0..l.rows() {
        for p in 0..l.cols() {
            let free = dec.pattern().is_free(j, p);
            assert_eq!(free, l.row(j)[p] > 0.0, "item {j} factor {p}");
        }
        let a = &dec.intercepts()[j];
        assert!(a.windows(2).all(|w| w[0] > w[1]));
    }
    let corr = dec.factor_corr();
    assert!((corr.row(0)[0] - 1.0).abs() < 1e-12 && corr.row(0)[1].abs() < 1.0);

    let fresh = simulate(&design, 1).unwrap().responses;
    let ll = heldout_loglik(&out.model, &fresh, EstimatorKind::Iwae, 200, &mut substream(1, Stream::Noise)).unwrap();
    assert_eq!(ll.len(), 300);
    assert!(ll.iter().all(|v| v.is_finite() && *v < 0.0));
}

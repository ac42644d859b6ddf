use nrcomp::compressor::unconstrain;
use nrcomp::metrics::esr_preemph;
use nrcomp::optim::{fit, FitStatus, NROptions};
use nrcomp::param_map::{interpolate, load_map, save_map, Interp, MapEntry, ParameterMap};
use nrcomp::signal::{plan_chunks, DEFAULT_CHUNK_SEC, DEFAULT_OVERLAP_SEC};
use nrcomp::synth::{generate, CorpusSpec, Manifest, MANIFEST_FILE};
use nrcomp::{compress, CompressorParams, Objective, ThetaRaw};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn assert_params_close(got: &CompressorParams, want: &CompressorParams, tol: f64) {
    let pairs = [
        (got.ct_db, want.ct_db),
        (got.ratio, want.ratio),
        (got.attack_ms, want.attack_ms),
        (got.release_ms, want.release_ms),
        (got.makeup_db, want.makeup_db),
    ];
    for (g, w) in pairs {
        assert!(rel(g, w) < tol, "{got:?} vs {want:?}");
    }
}

#[test]
fn manifest_settings_survive_the_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = CorpusSpec::example(11, 8000);
    spec.labels = vec![60.0, 90.0];
    generate(&spec, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let manifest = Manifest::load(&path).unwrap();
    let pairs = manifest.load_pairs(&path).unwrap();

    for ((label, pair), entry) in pairs.iter().zip(&manifest.entries) {
        assert_eq!(*label, entry.label);
        let plan = plan_chunks(pair.len(), pair.sample_rate(), DEFAULT_CHUNK_SEC, DEFAULT_OVERLAP_SEC).unwrap();
        let objective = Objective::new(pair, &plan, manifest.bounds, true).unwrap();
        let truth = entry.theta.expect("settings lie inside the bounds");
        let start = ThetaRaw::from_array(truth.to_array().map(|v| v + 0.2));
        let r = fit(&objective, &start, &NROptions::default()).unwrap();
        assert_eq!(r.status, FitStatus::Converged);
        // The written target is rounded to float32, so recovery is limited by
        // that rounding rather than by the optimiser.
        assert_params_close(&r.params, &entry.params, 1e-4);
        let (y_hat, _) = compress(&pair.input, &r.theta, &manifest.bounds, 1.0);
        assert!(esr_preemph(&pair.target.samples, &y_hat.samples).unwrap() < 1e-10);
    }
}

#[test]
fn fitted_map_reloads_identically() {
    let mut spec = CorpusSpec::example(12, 8000);
    spec.labels = vec![70.0, 85.0, 100.0];
    let mut map = ParameterMap::new(8000, spec.bounds, Interp::CubicSpline);
    for (i, &label) in spec.labels.iter().enumerate() {
        let (truth, pair) = spec.pair(i).unwrap();
        let objective = Objective::whole(&pair, spec.bounds, true).unwrap();
        let raw = unconstrain(&truth, &spec.bounds, 8000).unwrap();
        let start = ThetaRaw::from_array(raw.to_array().map(|v| v - 0.1));
        let r = fit(&objective, &start, &NROptions::default()).unwrap();
        assert_params_close(&r.params, &truth, 1e-4);
        map.insert(MapEntry {
            label,
            mode: spec.mode.clone(),
            fit_loss: r.loss,
            fit_esr: 0.0,
            params: r.params,
        });
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.toml");
    save_map(&path, &map).unwrap();
    let loaded = load_map(&path).unwrap();
    assert_eq!(loaded, map);
    for e in &map.entries {
        assert_eq!(interpolate(&loaded, &spec.mode, e.label).unwrap(), e.params);
    }
    let mid = interpolate(&loaded, &spec.mode, 77.5).unwrap();
    assert!(mid.ratio > map.entries[0].params.ratio && mid.ratio < map.entries[1].params.ratio);
}

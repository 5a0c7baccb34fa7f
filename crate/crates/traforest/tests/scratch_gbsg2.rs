use traforest::basis::{default_support, Basis};
use traforest::likelihood::{Subject, SurvResponse};
use traforest::optim::{fit_unconditional, FitConfig};

fn load() -> Vec<Subject> {
    let data = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/gbsg2_raw.csv"
    ))
    .unwrap();
    let mut out = Vec::new();
    for line in data.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let lower: f64 = fields[0].parse().unwrap();
        let resp = if fields[1] == "inf" {
            SurvResponse::Right(lower)
        } else {
            SurvResponse::Exact(lower)
        };
        out.push(Subject::new(resp, vec![]));
    }
    out
}

#[test]
fn gbsg2_order6_reaches_oracle_optimum() {
    let subjects = load();
    assert_eq!(subjects.len(), 686);
    let logs: Vec<f64> = subjects
        .iter()
        .map(|s| match s.response {
            SurvResponse::Exact(t) | SurvResponse::Right(t) => t.ln(),
            _ => unreachable!(),
        })
        .collect();
    let support = default_support(&logs).unwrap();
    println!("support = {support:?}");
    let b = Basis::bernstein(6, support).unwrap();
    let t0 = std::time::Instant::now();
    let fit = fit_unconditional(&b, &subjects, &FitConfig::default()).unwrap();
    println!(
        "loglik = {:.6} converged = {} active = {:?} elapsed = {:?} theta = {:?}",
        fit.loglik, fit.converged, fit.active_constraints, t0.elapsed(), fit.params.theta
    );
    // independent scipy oracle: -2611.326932
    assert!((fit.loglik - (-2611.326932)).abs() < 0.5, "loglik {}", fit.loglik);

    let w = fit_unconditional(&Basis::weibull(), &subjects, &FitConfig::default()).unwrap();
    println!("weibull loglik = {:.6} theta = {:?}", w.loglik, w.params.theta);
    assert!((w.loglik - (-2637.276364)).abs() < 1e-3);
}

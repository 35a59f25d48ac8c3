use proci::bench::{generate_twins_style, BenchmarkDataset, SelectionBiasParams, SelectionSource, TwinsStyleSpec};
use proci::oracle::scripted::{ConfounderRule, CounterfactualRule, ReplayOracle, RuleOracle, RuleSpec};
use proci::oracle::{OracleSession, PromptKind};
use proci::pipeline::{run_proci, GateMode, GenerationMode, ProciConfig, Termination, ValueMode};

fn twins(n: usize, seed: u64) -> BenchmarkDataset {
    generate_twins_style(&TwinsStyleSpec::standard(n, 4, seed)).unwrap()
}

fn randomized(n: usize, seed: u64) -> BenchmarkDataset {
    let mut spec = TwinsStyleSpec::standard(n, 4, seed);
    spec.selection = SelectionSource::Fixed(SelectionBiasParams {
        w_o: vec![0.0; 4],
        w_h: 0.0,
    });
    generate_twins_style(&spec).unwrap()
}

fn session(b: &BenchmarkDataset, confounder: ConfounderRule, counterfactual: CounterfactualRule) -> OracleSession {
    let spec = RuleSpec {
        confounder,
        counterfactual,
        seed: 1,
    };
    OracleSession::new(Box::new(RuleOracle::new(b.clone(), spec).unwrap()), 50).unwrap()
}

fn cfg(seed: u64) -> ProciConfig {
    let mut c = ProciConfig {
        seed,
        ..Default::default()
    };
    c.kcit.seed = seed;
    c
}

fn assert_factual_preserved(b: &BenchmarkDataset, r: &proci::pipeline::ProciResult) {
    let po = r.potential_outcomes.as_ref().unwrap();
    for i in 0..b.n() {
        assert_eq!(po.factual(i).to_bits(), b.base.outcomes()[i].to_bits());
    }
}

#[test]
fn truth_revealing_passes_at_first_iteration() {
    let b = twins(300, 5);
    let mut s = session(&b, ConfounderRule::TruthRevealing, CounterfactualRule::TruthRevealing);
    let r = run_proci(&b.base, &cfg(5), &mut s).unwrap();
    assert_eq!(r.termination, Termination::Passed { iteration: 1 });
    assert_eq!(r.augmented.d(), b.base.d() + 1);
    assert_eq!(r.confounders[0].name, "gestat");
    let po = r.potential_outcomes.as_ref().unwrap();
    assert_eq!(&po.y0_hat, b.true_y0.as_ref().unwrap());
    assert_eq!(&po.y1_hat, b.true_y1.as_ref().unwrap());
    assert_factual_preserved(&b, &r);
}

#[test]
fn noise_oracle_reaches_the_cap() {
    let b = twins(300, 6);
    let mut s = session(&b, ConfounderRule::RandomNoise, CounterfactualRule::RandomNoise);
    let c = ProciConfig {
        max_iterations: 3,
        ..cfg(6)
    };
    let r = run_proci(&b.base, &c, &mut s).unwrap();
    assert_eq!(r.termination, Termination::MaxIterationsReached);
    assert_eq!(r.iteration_log.len(), 3);
    for (k, rec) in r.iteration_log.iter().enumerate() {
        assert_eq!(rec.covariates, b.base.d() + k + 1);
        assert!(!rec.kcit.as_ref().unwrap().pass);
    }
    assert_factual_preserved(&b, &r);
}

#[test]
fn randomized_treatment_passes_immediately() {
    let b = randomized(300, 7);
    let mut s = session(&b, ConfounderRule::RandomNoise, CounterfactualRule::TruthRevealing);
    let r = run_proci(&b.base, &cfg(7), &mut s).unwrap();
    assert_eq!(r.termination, Termination::Passed { iteration: 1 });
    assert!(r.iteration_log[0].kcit.as_ref().unwrap().p_value > 0.05);
}

#[test]
fn precheck_separates_randomized_from_confounded() {
    let c = ProciConfig {
        precheck: true,
        ..cfg(3)
    };
    let b = randomized(300, 8);
    let mut s = session(&b, ConfounderRule::RandomNoise, CounterfactualRule::TruthRevealing);
    let r = run_proci(&b.base, &c, &mut s).unwrap();
    assert_eq!(r.termination, Termination::Passed { iteration: 0 });
    assert_eq!(r.augmented.d(), b.base.d());

    let mut fails = 0;
    for seed in 0..10 {
        let b = twins(300, 100 + seed);
        let mut s = session(&b, ConfounderRule::TruthRevealing, CounterfactualRule::TruthRevealing);
        let r = run_proci(&b.base, &ProciConfig { precheck: true, ..cfg(seed) }, &mut s).unwrap();
        let pre = r.iteration_log[0].kcit.as_ref().unwrap();
        assert_eq!(r.iteration_log[0].iteration, 0);
        fails += usize::from(!pre.pass);
    }
    assert!(fails >= 9, "hidden confounding detected in {fails}/10 seeds");
}

#[test]
fn runs_are_deterministic() {
    let b = twins(200, 9);
    let run = || {
        let mut s = session(&b, ConfounderRule::RandomNoise, CounterfactualRule::RandomNoise);
        let c = ProciConfig {
            max_iterations: 2,
            ..cfg(9)
        };
        let r = run_proci(&b.base, &c, &mut s).unwrap();
        (r, s.transcript().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn fixed_gate_matches_kcit_run_without_the_test() {
    let b = twins(300, 10);
    let mut s = session(&b, ConfounderRule::TruthRevealing, CounterfactualRule::TruthRevealing);
    let gated = run_proci(&b.base, &cfg(10), &mut s).unwrap();
    let k = gated.passed().unwrap();
    let mut s = session(&b, ConfounderRule::TruthRevealing, CounterfactualRule::TruthRevealing);
    let fixed = run_proci(
        &b.base,
        &ProciConfig {
            gate: GateMode::Fixed(k),
            ..cfg(10)
        },
        &mut s,
    )
    .unwrap();
    assert_eq!(fixed.augmented, gated.augmented);
    assert_eq!(fixed.termination, Termination::FixedIterations { iterations: k });
    assert!(fixed.iteration_log.iter().all(|r| r.kcit.is_none()));
}

#[test]
fn constant_direct_values_cannot_pass_on_confounded_data() {
    let b = twins(300, 11);
    let mut s = session(&b, ConfounderRule::Constant { value: 2.0 }, CounterfactualRule::TruthRevealing);
    let c = ProciConfig {
        values: ValueMode::Direct,
        max_iterations: 2,
        ..cfg(11)
    };
    let r = run_proci(&b.base, &c, &mut s).unwrap();
    assert_eq!(r.termination, Termination::MaxIterationsReached);
    assert!(r.confounders.iter().all(|c| c.family.is_none() && c.sd == 0.0));
}

#[test]
fn all_at_once_runs_a_single_test() {
    let b = twins(200, 12);
    let mut s = session(&b, ConfounderRule::RandomNoise, CounterfactualRule::RandomNoise);
    let c = ProciConfig {
        generation: GenerationMode::AllAtOnce(3),
        ..cfg(12)
    };
    let r = run_proci(&b.base, &c, &mut s).unwrap();
    assert_eq!(r.iteration_log.len(), 1);
    assert_eq!(r.augmented.d(), b.base.d() + 3);
}

#[test]
fn oracle_failure_rolls_back_the_partial_iteration() {
    let b = twins(100, 13);
    let replies = vec![
        (PromptKind::Var, r#"{"name": "u1", "explanation": "e"}"#.to_owned()),
        (PromptKind::Dist, r#"{"distribution": "Poisson"}"#.to_owned()),
        (PromptKind::Dist, r#"{"distribution": "Poisson"}"#.to_owned()),
    ];
    let mut s = OracleSession::new(Box::new(ReplayOracle::new(replies)), 50).unwrap();
    let r = run_proci(&b.base, &cfg(13), &mut s).unwrap();
    match &r.termination {
        Termination::OracleFailure { iteration, operation, .. } => {
            assert_eq!(*iteration, 1);
            assert_eq!(operation, "identify_distribution");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(r.augmented, b.base);
    assert!(r.confounders.is_empty());
}

#[test]
fn run_directory_layout() {
    let b = twins(120, 14);
    let mut s = session(&b, ConfounderRule::TruthRevealing, CounterfactualRule::TruthRevealing);
    let r = run_proci(&b.base, &cfg(14), &mut s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_run_dir(dir.path(), Some(&s)).unwrap();
    for f in ["augmented.csv", "confounders.json", "po_table.csv", "iterations.json", "transcript.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let conf: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("confounders.json")).unwrap()).unwrap();
    assert_eq!(conf[0]["params_digest"].as_str().unwrap().len(), 64);
}

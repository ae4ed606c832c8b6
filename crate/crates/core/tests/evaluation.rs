use fedprompt::cli::eval_checkpoint;
use fedprompt::config::ExperimentConfig;
use fedprompt::eval::{classify, evaluate, test_set, EvalSpec, Split, TextSource};
use fedprompt::federation::{run_training, Simulation};
use fedprompt::report::{emit_charts, error_rate_svg, gap_svg, ReferenceFixture, ERROR_CHART, GAP_CHART};
use fedprompt::seed;
use fedprompt::tensor::Tensor;
use fedprompt::translator::{FFN_OUT, QUERIES, W_O};

fn config(overrides: &[&str]) -> ExperimentConfig {
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse("", &sets).unwrap()
}

fn spec<'a>(cfg: &'a ExperimentConfig, sim: &'a Simulation) -> EvalSpec<'a> {
    EvalSpec {
        world: &sim.world,
        head: &sim.head,
        translator: &cfg.translator,
        n_test: cfg.eval.n_test,
        temperature: cfg.optimizer.temperature,
        seed: cfg.derived_seed(seed::stream::EVAL),
    }
}

#[test]
fn noiseless_aligned_world_is_solved_by_zero_context() {
    let cfg = config(&["world.sigma_img=0", "world.sigma_text=0", "world.text_misalign=0"]);
    let sim = Simulation::new(&cfg).unwrap();
    let s = spec(&cfg, &sim);
    assert_eq!(evaluate(TextSource::ZeroContext, Split::Base, &s).unwrap(), 100.0);
    assert_eq!(evaluate(TextSource::ZeroContext, Split::New, &s).unwrap(), 100.0);
}

#[test]
fn default_world_leaves_room_for_learning() {
    let cfg = config(&[]);
    let sim = Simulation::new(&cfg).unwrap();
    let base = evaluate(TextSource::ZeroContext, Split::Base, &spec(&cfg, &sim)).unwrap();
    assert!(base > 100.0 / 60.0 && base < 60.0, "{base}");
}

#[test]
fn all_zero_context_from_translator_matches_zero_context_source() {
    let cfg = config(&[]);
    let sim = Simulation::new(&cfg).unwrap();
    let mut params = sim.initial_params(&cfg).unwrap();
    for name in [QUERIES, W_O, FFN_OUT] {
        params.get_mut(name).unwrap().value.data_mut().fill(0.0);
    }
    let s = spec(&cfg, &sim);
    for split in [Split::Base, Split::New] {
        assert_eq!(
            evaluate(TextSource::Translator(&params), split, &s).unwrap(),
            evaluate(TextSource::ZeroContext, split, &s).unwrap()
        );
    }
}

#[test]
fn untrained_run_stays_at_zero_context_baseline() {
    // Fresh parameters emit their queries as context, which is small but
    // not zero, so accuracy matches the baseline up to a few test images.
    let cfg = config(&["optimizer.lr0=0", "federation.rounds=1"]);
    let out = run_training(&cfg).unwrap();
    let sim = Simulation::new(&cfg).unwrap();
    assert!(out.params.bit_eq(&sim.initial_params(&cfg).unwrap()));
    let report = eval_checkpoint(&cfg, &out.params).unwrap();
    assert!((report.result.base_acc - report.zero_context.base_acc).abs() <= 0.5);
    assert!((report.result.new_acc - report.zero_context.new_acc).abs() <= 0.5);
}

#[test]
fn test_sets_are_seeded_and_balanced() {
    let cfg = config(&[]);
    let sim = Simulation::new(&cfg).unwrap();
    let (a, la) = test_set(&sim.world, Split::New, 5, 3).unwrap();
    let (b, lb) = test_set(&sim.world, Split::New, 5, 3).unwrap();
    let (c, _) = test_set(&sim.world, Split::New, 5, 4).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(la, lb);
    assert!(!a.bit_eq(&c));
    assert_eq!(a.shape(), &[100, 32]);
    for k in 0..20 {
        assert_eq!(la.iter().filter(|&&l| l == k).count(), 5);
    }
}

#[test]
fn classification_ignores_positive_rescaling() {
    let text = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8], vec![-0.6, 0.8, 0.0]]).unwrap();
    let feats = Tensor::from_rows(&[vec![0.2, 0.5, 0.5], vec![-1.0, 0.9, 0.1], vec![3.0, 0.1, 0.0]]).unwrap();
    let reference = classify(&feats, &text, 0.01).unwrap();
    assert_eq!(reference, vec![1, 2, 0]);
    assert_eq!(classify(&feats.map(|v| 7.5 * v), &text, 0.01).unwrap(), reference);
    assert_eq!(classify(&feats, &text, 3.0).unwrap(), reference);
    assert!(classify(&feats, &text, 0.0).is_err());
}

#[test]
fn aircraft_has_the_tallest_error_bars() {
    let results = ReferenceFixture::published().ours_results().unwrap();
    let svg = error_rate_svg(&results).unwrap();
    let errors: Vec<f64> = svg
        .split("data-error=\"")
        .skip(1)
        .map(|s| s[..s.find('"').unwrap()].parse().unwrap())
        .collect();
    assert_eq!(errors.len(), 12);
    let max = errors.iter().cloned().fold(f64::MIN, f64::max);
    let aircraft = results.iter().position(|r| r.dataset == "FGVC Aircraft").unwrap();
    assert!(errors[2 * aircraft] == max || errors[2 * aircraft + 1] == max);
    assert!((65.0..=70.0).contains(&max), "{max}");
}

#[test]
fn charts_are_byte_identical_across_runs() {
    let results = ReferenceFixture::published().ours_results().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_charts(&results, a.path()).unwrap();
    emit_charts(&results, b.path()).unwrap();
    for name in [ERROR_CHART, GAP_CHART] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let gaps = gap_svg(&results).unwrap();
    assert_eq!(gaps.matches("class=\"positive\"").count(), 3);
    assert_eq!(gaps.matches("class=\"negative\"").count(), 3);
}

use super::*;
use crate::episode::replay;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.grid.width = 16;
    c.grid.height = 16;
    c.grid.n_targets = (2, 4);
    c.scenario_count = 3;
    c.episode.budget = 600.0;
    c.planners = vec!["greedy".into(), "coverage".into(), "pcoverage".into()];
    c
}

#[test]
fn derived_seeds_are_stable_and_distinct() {
    assert_eq!(derive_seed(7, 1, 3), derive_seed(7, 1, 3));
    assert_ne!(derive_seed(7, 1, 3), derive_seed(7, 1, 4));
    assert_ne!(derive_seed(7, 1, 3), derive_seed(7, 2, 3));
    assert_ne!(derive_seed(7, 1, 3), derive_seed(8, 1, 3));
    let s = scenario_seed(5, 2);
    assert_eq!(scenario_seed_of(episode_seed_for(s)), s);
}

#[test]
fn config_round_trips_through_toml() {
    let c = ExperimentConfig::desk();
    let text = c.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    let partial = ExperimentConfig::from_toml("seed = 9\n[grid]\nwidth = 20\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.grid.width, 20);
    assert_eq!(partial.grid.height, 32);
}

#[test]
fn config_errors() {
    for bad in ["sead = 1\n", "[grid]\nwidht = 3\n", "[learning]\nlamda = 0.5\n", "seed = \"x\"\n"] {
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
    let c = ExperimentConfig::from_toml("[learning]\ngamma = 0.9\n[episode]\nstart_cell = [3, 4]\n").unwrap();
    assert_eq!(c.learning.loss.gamma, 0.9);
    assert_eq!(c.episode.start_cell, Some((3, 4)));
    let mut c = small();
    c.planners.push("astar".into());
    assert!(matches!(c.validate(), Err(Error::UnknownPlanner(_))));
    assert!(matches!(run_matrix(&c, 1), Err(Error::UnknownPlanner(_))));

    let mut c = small();
    c.planners.push("rl".into());
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    let mut c = small();
    c.planners.push("greedy".into());
    assert!(c.validate().is_err());

    let mut c = small();
    c.scenario_count = 0;
    assert!(c.validate().is_err());

    let mut c = small();
    c.kl.edges = vec![0.0, 0.02, 0.01];
    assert!(c.validate().is_err());

    let mut c = small();
    c.graph.cell_size = 2.0;
    assert!(c.validate().is_err());

    let mut c = small();
    c.checkpoint = Some("/nonexistent/policy.ckpt".into());
    c.planners = vec!["rl".into()];
    assert!(matches!(run_matrix(&c, 1), Err(Error::Config(_))));
}

#[test]
fn single_cell_matrix_has_zero_std() {
    let mut c = small();
    c.scenario_count = 1;
    c.planners = vec!["greedy".into()];
    let out = run_matrix(&c, 1).unwrap();
    assert_eq!(out.rows.len(), 1);
    let m = &out.rows[0].metrics;
    assert_eq!(m.episodes, 1);
    assert_eq!(m.coverage.std, 0.0);
    assert_eq!(m.entropy_reduction.std, 0.0);
    assert_eq!(m.search_efficiency.std, 0.0);
    assert_eq!(out.results_csv().lines().count(), 2);
    assert!(out.results_csv().starts_with(RESULTS_HEADER));
}

#[test]
fn matrix_is_paired_deterministic_and_consistent() {
    let c = small();
    let a = run_matrix(&c, 1).unwrap();
    let b = run_matrix(&c, 3).unwrap();
    assert_eq!(a.results_csv(), b.results_csv());
    assert_eq!(a.episodes_csv(), b.episodes_csv());
    for (x, y) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(x.log.to_jsonl(), y.log.to_jsonl());
    }

    let n = c.scenario_count;
    assert_eq!(a.episodes.len(), n * c.planners.len());
    for s in 0..n {
        let seeds: Vec<u64> = (0..c.planners.len())
            .map(|p| a.episodes[p * n + s].log.header.seed)
            .collect();
        assert!(seeds.iter().all(|&x| x == seeds[0]));
        assert_eq!(scenario_seed_of(seeds[0]), scenario_seed(c.seed, s));
    }

    // aggregates match metrics recomputed from the logs alone
    let cfg = c.episode_config().unwrap();
    for (p, row) in a.rows.iter().enumerate() {
        let ms: Vec<Metrics> = (0..n)
            .map(|s| {
                let e = &a.episodes[p * n + s];
                let sc = c.scenario(s).unwrap();
                replay(&cfg, &sc.world, &sc.prior, &sc.obstacles, e.log.header.seed, &e.log.actions())
                    .unwrap()
                    .metrics()
                    .unwrap()
            })
            .collect();
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n as f64;
        assert!((row.metrics.coverage.mean - mean(|m| m.coverage)).abs() < 1e-12);
        assert!((row.metrics.entropy_reduction.mean - mean(|m| m.entropy_reduction)).abs() < 1e-12);
        assert!((row.metrics.search_efficiency.mean - mean(|m| m.search_efficiency)).abs() < 1e-12);
    }
}

#[test]
fn matrix_files_are_reproducible() {
    let c = small();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_matrix(&c, 1).unwrap().write(d1.path(), "results").unwrap();
    run_matrix(&c, 2).unwrap().write(d2.path(), "results").unwrap();
    for name in ["results.csv", "episodes.csv", "logs/greedy_000.jsonl", "logs/pcoverage_002.jsonl"] {
        let a = fs::read(d1.path().join(name)).unwrap();
        let b = fs::read(d2.path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn quartile_oracle() {
    let b = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    assert_eq!(b.mean, 2.5);
    let one = quartiles(&[7.0]).unwrap();
    assert_eq!((one.min, one.q1, one.median, one.q3, one.max), (7.0, 7.0, 7.0, 7.0, 7.0));
    assert!(quartiles(&[]).is_none());
}

#[test]
fn buckets() {
    let k = KlSweepConfig::default();
    assert_eq!(k.bucket_count(), 8);
    assert_eq!(k.bucket_of(0.0), Some(0));
    assert_eq!(k.bucket_of(0.004999), Some(0));
    assert_eq!(k.bucket_of(0.005), Some(1));
    assert_eq!(k.bucket_of(0.04), Some(7));
    assert_eq!(k.bucket_of(0.0401), None);
    assert_eq!(k.bucket_of(-1e-9), None);
}

#[test]
fn unperturbed_sweep_fills_only_the_first_bucket() {
    let mut c = small();
    c.kl.shift_max = 0.0;
    c.kl.mix_weight_max = 0.0;
    c.kl.cell_sigma_max = 0.0;
    c.kl.per_bucket = 2;
    c.kl.max_attempts = 10;
    c.kl.planners = vec!["greedy".into()];
    let out = kl_sweep(&c, 1).unwrap();
    assert_eq!(out.attempts, 10);
    assert_eq!(out.buckets[0].scenarios.len(), 2);
    assert_eq!(out.populated_buckets(), 1);
    assert!(out.buckets[0].scenarios.iter().all(|s| s.kl.abs() < 1e-12));
    assert_eq!(out.rows.len(), 8);
    assert!(out.rows[0].stats.is_some());
    assert!(out.rows[1..].iter().all(|r| r.stats.is_none() && r.episodes == 0));
    let csv = out.to_csv();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().nth(2).unwrap().ends_with(",,,,,,"));
}

#[test]
fn sweep_is_deterministic() {
    let mut c = small();
    c.kl.per_bucket = 1;
    c.kl.max_attempts = 40;
    c.kl.planners = vec!["greedy".into()];
    let a = kl_sweep(&c, 1).unwrap();
    let b = kl_sweep(&c, 2).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.scenarios_csv(), b.scenarios_csv());
    assert!(a.populated_buckets() >= 2, "{}", a.scenarios_csv());
}

fn render_setup() -> (ExperimentConfig, EpisodeConfig, Scenario, EpisodeLog) {
    let mut c = small();
    c.scenario_count = 1;
    c.planners = vec!["coverage".into()];
    let cfg = c.episode_config().unwrap();
    let out = run_matrix(&c, 1).unwrap();
    (c.clone(), cfg, c.scenario(0).unwrap(), out.episodes[0].log.clone())
}

fn circle(svg: &str, class: &str) -> Vec<(String, String)> {
    svg.lines()
        .filter(|l| l.contains(&format!(r#"class="{class}""#)))
        .map(|l| {
            let attr = |k: &str| {
                let start = l.find(&format!(r#"{k}=""#)).unwrap() + k.len() + 2;
                l[start..start + l[start..].find('"').unwrap()].to_string()
            };
            (attr("cx"), attr("cy"))
        })
        .collect()
}

#[test]
fn empty_log_renders_coincident_dots() {
    let (_, cfg, sc, mut log) = render_setup();
    log.steps.clear();
    let svg = render_trajectory(&cfg, &sc, &log, &RenderOptions::default()).unwrap();
    let starts = circle(&svg, "start");
    let ends = circle(&svg, "end");
    assert_eq!(starts.len(), 4);
    assert_eq!(ends.len(), 3);
    assert!(ends.iter().all(|e| *e == starts[0]));
    assert!(!svg.contains("polyline"));
}

#[test]
fn snapshots_grow_monotonically() {
    let (_, cfg, sc, log) = render_setup();
    assert!(log.steps.len() > 3);
    let svg = render_trajectory(&cfg, &sc, &log, &RenderOptions::default()).unwrap();
    let paths: Vec<&str> = svg
        .lines()
        .filter(|l| l.contains(r#"class="path""#))
        .map(|l| {
            let s = l.find("points=\"").unwrap() + 8;
            &l[s..s + l[s..].find('"').unwrap()]
        })
        .collect();
    assert!(!paths.is_empty());
    for w in paths.windows(2) {
        assert!(w[1].starts_with(w[0]));
    }
    // the last snapshot holds the whole flown path
    let expected = 1 + log.steps.len() * RenderOptions::default().curve_samples;
    assert_eq!(paths.last().unwrap().split(' ').count(), expected);
    assert_eq!(svg, render_trajectory(&cfg, &sc, &log, &RenderOptions::default()).unwrap());
}

#[test]
fn image_size_follows_grid() {
    let (_, cfg, sc, log) = render_setup();
    let opts = RenderOptions {
        scale: 10,
        snapshots: vec![0.0],
        curve_samples: 4,
    };
    let svg = render_trajectory(&cfg, &sc, &log, &opts).unwrap();
    assert!(svg.contains(r#"<rect class="frame" width="160" height="160""#));
    // two panels of 160 px plus three gaps
    assert!(svg.starts_with(r#"<svg xmlns="http://www.w3.org/2000/svg" width="350" height="198""#));
}

#[test]
fn render_rejects_mismatched_logs() {
    let (c, cfg, sc, log) = render_setup();
    let mut bad = log.clone();
    bad.steps[2].agent_cell = (0, 0);
    match render_trajectory(&cfg, &sc, &bad, &RenderOptions::default()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let mut bad = log.clone();
    bad.header.config_hash = "0".into();
    assert!(matches!(
        render_trajectory(&cfg, &sc, &bad, &RenderOptions::default()),
        Err(Error::Config(_))
    ));
    let mut other = c.clone();
    other.episode.budget = 601.0;
    let cfg2 = other.episode_config().unwrap();
    assert!(render_trajectory(&cfg2, &sc, &log, &RenderOptions::default()).is_err());
}

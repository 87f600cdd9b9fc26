use bmrs::criteria::{self, CriterionConfig, CriterionKind, ReducedLogNormalPrior};
use bmrs::distkit::TruncatedLogNormal;
use bmrs::experiment::{self, DatasetKind, ExperimentConfig, ModelConfig, SynthConfig};
use bmrs::nn::{checkpoint, Dense, Layer, Network, StructureId};
use bmrs::prune::{compression_percent, continuous_prune, post_training_prune, TrainOptions, TrainSchedule};
use bmrs::report::{self, Manifest};
use bmrs::tensor::Tensor;
use bmrs::verify::{self, ClosedForms, VerifyProfile};
use bmrs::gate::{GateInit, NoiseGate};
use bmrs::nn::Relu;

fn synth_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::mnist_mlp();
    c.model = ModelConfig::Mlp { layers: 2, hidden: 12 };
    c.dataset = DatasetKind::Synth;
    c.synth = SynthConfig { n_train: 400, n_test: 200, n_classes: 3, dim: 6, separation: 8.0 };
    c.schedule = TrainSchedule { epochs_train: 4, fine_tune_epochs: 1, prune_interval: 1 };
    c.optimizer.lr = Some(1e-2);
    c.optimizer.batch_size = 32;
    c.chunk_fraction = 0.25;
    c.seed = 3;
    c
}

#[test]
fn compression_counts_incoming_outgoing_and_biases() {
    let dense = |i: usize, o: usize| Layer::Dense(Dense::from_parts(Tensor::zeros(vec![o, i]), Tensor::zeros(vec![o])).unwrap());
    let layers = vec![dense(3, 4), Layer::Gate(NoiseGate::new(4, GateInit::default()).unwrap()), Layer::Relu(Relu::default()), dense(4, 2)];
    let before = Network::new(layers, vec![3]).unwrap();
    assert_eq!(before.weight_count(), 26);
    let mut after = before.clone();
    assert_eq!(compression_percent(&before, &after).unwrap(), 0.0);
    after.prune(&[StructureId { layer: 1, index: 0 }, StructureId { layer: 1, index: 2 }]).unwrap();
    // 2·(3 + 1) incoming weights and biases plus 2·2 outgoing weights of 26.
    let c = compression_percent(&before, &after).unwrap();
    assert!((c - 1200.0 / 26.0).abs() < 1e-12, "{c}");
}

#[test]
fn prune_everything_at_first_epoch() {
    let cfg = synth_config();
    let data = cfg.load_data(None).unwrap();
    let net = cfg.build_network().unwrap();
    let all = CriterionConfig::new(CriterionKind::MeanTheta).with_threshold(10.0);
    let (shrunk, recs) = continuous_prune(net.clone(), &data.train, &data.test, &all, &cfg.schedule, cfg.train_options()).unwrap();
    let first = &recs[0];
    assert_eq!(first.alive_counts, vec![0, 0]);
    assert_eq!(first.degenerate_layers.len(), 2);
    // Only the classifier bias survives.
    let expected = 100.0 * (net.weight_count() - 3) as f64 / net.weight_count() as f64;
    assert!((first.compression - expected).abs() < 1e-9);
    assert!(recs.windows(2).all(|w| w[1].compression >= w[0].compression));
    assert!((recs.last().unwrap().test_accuracy - 100.0 / 3.0).abs() < 6.0);
    assert_eq!(shrunk.weight_count(), 3);
}

#[test]
fn train_checkpoint_and_post_training_curve() {
    let cfg = synth_config();
    let data = cfg.load_data(None).unwrap();
    let run = experiment::run_train(&cfg, &data).unwrap();
    assert!(run.final_record().test_accuracy > 90.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&run.net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let x = data.test.batch(&[0, 1, 2, 3]).0;
    assert_eq!(back.predict(&x).unwrap().data(), run.net.predict(&x).unwrap().data());

    let post = experiment::run_prune_post(&cfg, &back, &data).unwrap();
    let n = back.alive_structures().len();
    let last = post.curve.points.last().unwrap();
    assert_eq!(last.structures_removed, n);
    assert!(post.curve.points.windows(2).all(|w| w[1].compression >= w[0].compression));
    assert_eq!(post.curve.points.iter().filter(|p| p.stop).count(), usize::from(post.curve.stop_after.is_some_and(|s| s > 0)));
    for (i, row) in post.spearman.iter().enumerate() {
        assert_eq!(row[i], Some(1.0), "{}", post.labels[i]);
    }

    let csv = dir.path().join("curve.csv");
    report::write_curve_csv(&csv, post.origin_accuracy, &back.n_alive_per_gate(), &post.curve.points, "bmrs_n", cfg.seed).unwrap();
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let first = rdr.records().next().unwrap().unwrap();
    assert_eq!(&first[0], "0");
    assert_eq!(first[1].parse::<f64>().unwrap(), post.origin_accuracy);
    assert_eq!(first[2].parse::<f64>().unwrap(), 0.0);

    let mut other = cfg.clone();
    other.model = ModelConfig::Mlp { layers: 3, hidden: 12 };
    assert!(matches!(experiment::run_prune_post(&other, &back, &data), Err(bmrs::Error::Config(_))));
}

#[test]
fn single_chunk_curve_has_one_point() {
    let cfg = synth_config();
    let data = cfg.load_data(None).unwrap();
    let run = experiment::run_train(&cfg, &data).unwrap();
    let curve = post_training_prune(&run.net, &data.train, &data.test, &CriterionConfig::new(CriterionKind::Snr), 1.0, cfg.train_options()).unwrap();
    assert_eq!(curve.points.len(), 1);
    assert_eq!(curve.points[0].structures_removed, run.net.alive_structures().len());
}

#[test]
fn manifest_reingest_reproduces_the_run() {
    let cfg = synth_config();
    let data = cfg.load_data(None).unwrap();
    let a = experiment::run_train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    Manifest::new("train", &cfg, serde_json::json!({}), &[]).write(&path).unwrap();
    let again = ExperimentConfig::from_path(&path).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.config_hash(), cfg.config_hash());
    let b = experiment::run_train(&again, &again.load_data(None).unwrap()).unwrap();
    assert_eq!(a.records, b.records);

    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    report::write_run_csv(&pa, &a.records, "bmrs_n", 3).unwrap();
    report::write_run_csv(&pb, &b.records, "bmrs_n", 3).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn sweep_with_single_p1_matches_a_train_run() {
    let mut cfg = synth_config();
    cfg.criterion = CriterionConfig::bmrs_u(6, 23);
    let rows = experiment::run_sweep(&cfg, &[6], None).unwrap();
    assert_eq!(rows.len(), 1);
    let run = experiment::run_train(&cfg, &cfg.load_data(None).unwrap()).unwrap();
    assert_eq!(rows[0].compression, run.final_record().compression);
    assert_eq!(rows[0].accuracy, run.final_record().test_accuracy);

    let mut bad = cfg.clone();
    bad.criterion.p2 = 6;
    assert!(experiment::run_sweep(&bad, &[6], None).is_err());
}

/// The BMRS_N closed form with the sign of its final quadratic term flipped.
fn flipped_last_term(q: &TruncatedLogNormal, p: &ReducedLogNormalPrior) -> bmrs::Result<f64> {
    let total = q.sigma * q.sigma + p.sigma2_tilde_p;
    Ok(criteria::delta_f_lognormal(q, p)? + (q.mu - p.mu_tilde_p).powi(2) / total)
}

#[test]
fn verify_catches_a_sign_flip_in_the_normal_criterion() {
    let forms = ClosedForms { delta_f_lognormal: flipped_last_term, ..ClosedForms::default() };
    let rep = verify::run(&VerifyProfile::quick(), &forms);
    assert!(!rep.all_passed);
    let s = rep.suite("bmrs_n_quadrature").unwrap();
    assert!(s.failed > 0 && !s.failures.is_empty());
    assert!(rep.suite("bmrs_u_quadrature").unwrap().ok());
    assert!(rep.suites.iter().all(|s| s.checks == s.passed + s.failed));
}

#[test]
fn continuous_runs_keep_masked_and_shrunk_logits_equal() {
    let cfg = synth_config();
    let data = cfg.load_data(None).unwrap();
    let crit = CriterionConfig::new(CriterionKind::Snr);
    let opts = TrainOptions { kl_scale: 50.0, ..cfg.train_options() };
    let (net, recs) = continuous_prune(cfg.build_network().unwrap(), &data.train, &data.test, &crit, &cfg.schedule, opts).unwrap();
    let alive: usize = recs.last().unwrap().alive_counts.iter().sum();
    assert_eq!(alive, net.alive_structures().len());
    let x = data.test.batch(&(0..20).collect::<Vec<_>>()).0;
    let mut c = net.clone();
    c.compact().unwrap();
    for (a, b) in net.predict(&x).unwrap().data().iter().zip(c.predict(&x).unwrap().data()) {
        assert!((a - b).abs() <= 1e-10);
    }
}

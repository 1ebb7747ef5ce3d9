mod common;

use common::{run_epochs, toy_partial};
use pllforge_autodiff::Tape;
use pllforge_core::harness::{train, BackboneSpec, OptimizerConfig};
use pllforge_core::model::{BackboneConfig, BackboneVariant};
use pllforge_core::pll::{build_learner, Algorithm, AlgorithmConfig, Batch, Comic, Learner, Pico, TrainSet};

fn linear(ds: &pllforge_core::data::PartialDataset) -> BackboneConfig {
    BackboneConfig {
        variant: BackboneVariant::Linear,
        leads: ds.leads,
        length: ds.length,
        embed_dim: 8,
        num_classes: ds.num_classes(),
    }
}

fn opt(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        lr: 5e-3,
        batch_size: 16,
        epochs,
        ..OptimizerConfig::default()
    }
}

fn assert_rows_on_candidates(table: &[Vec<f64>], data: &TrainSet, tol: f64) {
    assert_eq!(table.len(), data.len());
    for (row, cand) in table.iter().zip(&data.candidates) {
        let inside: f64 = cand.iter().map(|&k| row[k]).sum();
        assert!((inside - 1.0).abs() <= tol, "{row:?}");
        for (k, &v) in row.iter().enumerate() {
            assert!(v >= 0.0);
            if !cand.contains(&k) {
                assert_eq!(v, 0.0, "{row:?} outside {cand:?}");
            }
        }
    }
}

#[test]
fn disambiguation_tables_stay_on_candidates() {
    let ds = toy_partial(4, 120, 0.7, 3);
    let data = TrainSet::from_dataset(&ds);
    let mut hp = AlgorithmConfig::default();
    hp.pico_queue = 40;
    for alg in [Algorithm::Proden, Algorithm::Cr, Algorithm::Pico] {
        let mut learner = build_learner(alg, &hp, &linear(&ds), 1).unwrap();
        let mut epochs_seen = 0;
        run_epochs(learner.as_mut(), &data, &opt(20), 1, |_, l| {
            assert_rows_on_candidates(l.label_table().unwrap(), &data, 1e-12);
            epochs_seen += 1;
        });
        assert_eq!(epochs_seen, 20);
    }
}

#[test]
fn pico_queue_is_bounded_and_soft_labels_start_uniform() {
    let ds = toy_partial(4, 100, 0.8, 5);
    let data = TrainSet::from_dataset(&ds);
    let hp = AlgorithmConfig {
        pico_queue: 24,
        ..AlgorithmConfig::default()
    };
    let mut pico = Pico::new(&linear(&ds), &hp, &mut pllforge_core::rng::keyed(0, "init")).unwrap();
    pico.begin(&data, 3).unwrap();
    for (row, cand) in pico.soft_labels().iter().zip(&data.candidates) {
        for &k in cand {
            assert!((row[k] - 1.0 / cand.len() as f64).abs() < 1e-15);
        }
    }
    run_epochs(&mut pico, &data, &opt(3), 0, |_, l| {
        assert_rows_on_candidates(l.label_table().unwrap(), &data, 1e-12);
    });
    assert_eq!(pico.queue_len(), 24);

    let frozen = AlgorithmConfig {
        pico_alpha: 1.0,
        ..hp
    };
    let mut pico = Pico::new(&linear(&ds), &frozen, &mut pllforge_core::rng::keyed(0, "init")).unwrap();
    pico.begin(&data, 2).unwrap();
    let start = pico.soft_labels().to_vec();
    run_epochs(&mut pico, &data, &opt(2), 0, |_, _| {});
    assert_eq!(pico.soft_labels(), &start[..]);
}

#[test]
fn semantic_thresholds_stay_in_the_open_unit_interval() {
    let ds = toy_partial(3, 60, 0.6, 7);
    let data = TrainSet::from_dataset(&ds);
    let hp = AlgorithmConfig {
        sst_rank: 4,
        sst_dim: 4,
        ist_hidden: 4,
        ..AlgorithmConfig::default()
    };
    let mut learner = build_learner(Algorithm::Hst, &hp, &linear(&ds), 2).unwrap();
    let initial: Vec<f64> = thresholds(learner.as_ref());
    assert_eq!(initial.len(), 6);
    run_epochs(learner.as_mut(), &data, &opt(3), 2, |_, l| {
        for th in thresholds(l) {
            assert!(th > 0.0 && th < 1.0);
        }
    });
    assert_ne!(thresholds(learner.as_ref()), initial);
}

fn thresholds(l: &dyn Learner) -> Vec<f64> {
    l.store()
        .params()
        .iter()
        .filter(|p| p.name.starts_with("hst.theta"))
        .flat_map(|p| p.value.data().to_vec())
        .collect()
}

fn comic_batch(data: &TrainSet, idx: &[usize], number: usize) -> Batch {
    Batch {
        indices: idx.to_vec(),
        x: data.inputs(idx),
        mask: data.mask(idx),
        epoch: 0,
        epochs: 1,
        number,
        seed: 0,
    }
}

fn comic_pass(c: &mut Comic, batch: &Batch) {
    let mut tape = Tape::new();
    let vars = c.store().bind_all(&mut tape);
    let step = c.loss(&mut tape, &vars, batch).unwrap();
    let grads = tape.backward(step.loss).unwrap();
    c.after_backward(&grads, batch).unwrap();
}

#[test]
fn comic_gradient_bias_follows_its_recurrence() {
    let ds = toy_partial(4, 40, 0.5, 9);
    let data = TrainSet::from_dataset(&ds);
    let build = |mu: f64| {
        let hp = AlgorithmConfig {
            grad_momentum: mu,
            comic_att_dim: 4,
            ..AlgorithmConfig::default()
        };
        let mut c = Comic::new(&linear(&ds), &hp, &mut pllforge_core::rng::keyed(4, "init")).unwrap();
        c.begin(&data, 1).unwrap();
        c
    };
    let b1 = comic_batch(&data, &[0, 1, 2, 3, 4], 0);
    let b2 = comic_batch(&data, &[5, 6, 7, 8], 1);
    let (mut plain, mut heavy) = (build(0.0), build(0.9));
    comic_pass(&mut plain, &b1);
    comic_pass(&mut heavy, &b1);
    let e1 = heavy.grad_bias().to_vec();
    assert_eq!(plain.grad_bias(), &e1[..]);
    assert!(e1.iter().any(|&v| v != 0.0));
    comic_pass(&mut plain, &b2);
    comic_pass(&mut heavy, &b2);
    for ((p, h), o) in plain.grad_bias().iter().zip(heavy.grad_bias()).zip(&e1) {
        assert!((p - (h - 0.9 * o)).abs() < 1e-12);
    }
    let (kh, kt) = heavy.last_kappa();
    assert!((kh + kt - 1.0).abs() < 1e-12);
    assert!(heavy.focal().ht.iter().all(|&v| v >= 1.0));
}

#[test]
fn every_learner_trains_and_reloads() {
    let ds = toy_partial(3, 48, 0.5, 11);
    let hp = AlgorithmConfig {
        sst_rank: 4,
        sst_dim: 4,
        ist_hidden: 4,
        comic_att_dim: 4,
        pico_queue: 16,
        ..AlgorithmConfig::default()
    };
    let backbone = BackboneSpec {
        embed_dim: 8,
        ..BackboneSpec::linear()
    };
    let idx: Vec<usize> = (0..ds.records.len()).collect();
    for alg in Algorithm::ALL {
        let model = train(&ds, alg, &hp, &backbone, &opt(2), 3).unwrap();
        assert_eq!(model.history.len(), 2);
        assert!(model.history.iter().all(|h| h.loss.is_finite()), "{alg}");
        let scores = pllforge_core::harness::predict_scores(model.learner.as_ref(), &ds, &idx).unwrap();
        assert!(scores.iter().flatten().all(|s| (0.0..=1.0).contains(s)), "{alg}");

        let dir = tempfile::tempdir().unwrap();
        pllforge_core::harness::save_model(dir.path(), &model).unwrap();
        let (meta, back) = pllforge_core::harness::load_model(dir.path()).unwrap();
        assert_eq!(meta, model.meta);
        let again = pllforge_core::harness::predict_scores(back.as_ref(), &ds, &idx).unwrap();
        assert_eq!(again, scores, "{alg}");
    }
}

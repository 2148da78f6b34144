use std::collections::BTreeSet;

use duet::kernel::Rng;
use duet::pipeline::*;
use duet::synth::SynthConfig;
use proptest::prelude::*;

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_genes: 140,
        n_target_genes: 20,
        n_cells_per_type: 30,
        n_spots: 96,
        feature_dim: 12,
        n_slides: 8,
        ..SynthConfig::default()
    }
}

fn small_config() -> DuetConfig {
    let mut cfg = DuetConfig {
        synth: small_synth(),
        ..DuetConfig::default()
    };
    cfg.scprior.signature_epochs = 10;
    cfg.scprior.deconv.epochs = 100;
    cfg.align.epochs = 5;
    cfg.align.batch_size = 32;
    cfg.retrieval.n_candidates = 40;
    cfg.retrieval.top_k = 10;
    cfg.regress.hidden = vec![16];
    cfg.regress.epochs = 8;
    cfg.regress.anneal.e_d = 4;
    cfg.fuse.epochs = 10;
    cfg
}

#[test]
fn bundle_round_trip() {
    let (ds, _) = Dataset::from_synth(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.gene_ids, ds.gene_ids);
    assert_eq!(back.spot_ids, ds.spot_ids);
    assert_eq!(back.cell_ids, ds.cell_ids);
    assert_eq!(back.type_ids, ds.type_ids);
    assert_eq!(back.targets, ds.targets);
    assert_eq!(back.sc.counts, ds.sc.counts);
    assert_eq!(back.sc.cell_type, ds.sc.cell_type);
    assert_eq!(back.sc.batch, ds.sc.batch);
    assert_eq!(back.st_counts, ds.st_counts);
    assert_eq!(back.img_features, ds.img_features);
    assert_eq!(back.fm_features, ds.fm_features);
    assert_eq!(back.cell_count, ds.cell_count);
    assert_eq!(back.slide, ds.slide);
}

#[test]
fn mismatched_bundle_rejected() {
    let (ds, _) = Dataset::from_synth(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join(files::IMG_FEATURES);
    let text = std::fs::read_to_string(&path).unwrap();
    let dropped: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, dropped).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(files::IMG_FEATURES), "{err}");

    ds.save(dir.path()).unwrap();
    std::fs::write(dir.path().join(files::TARGETS), "not_a_gene\n").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn in_memory_run_is_deterministic() {
    let cfg = small_config();
    let (ds, _) = Dataset::from_synth(&cfg.synth).unwrap();
    let a = run(&ds, &cfg).unwrap();
    let b = run(&ds, &cfg).unwrap();
    assert_eq!(a.test, b.test);
    assert_eq!(a.models.reg.model, b.models.reg.model);
    let n_test = a.split.test.len();
    assert_eq!(a.test.duet.shape(), (n_test, cfg.synth.n_target_genes));
    assert!(a.test.alpha.iter().all(|&x| x > 0.0 && x < 1.0));
    let other = run(
        &ds,
        &DuetConfig {
            seed: 99,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_ne!(other.test.duet, a.test.duet);
}

#[test]
fn prior_gating_rows_sum_to_cell_count() {
    let cfg = small_config();
    let (ds, _) = Dataset::from_synth(&cfg.synth).unwrap();
    let prior = run_prior(&ds, &cfg.scprior, &Rng::new(1)).unwrap();
    let panel: BTreeSet<&String> = prior.panel.iter().collect();
    assert!(ds.targets.iter().all(|t| !panel.contains(t)));
    for s in 0..ds.n_spots() {
        let total: f64 = prior.gating.g.row(s).iter().sum();
        assert!((total - ds.cell_count[s]).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn split_partitions_slides(n_slides in 3usize..30, per in 1usize..5, seed in 0u64..1000) {
        let slide: Vec<usize> = (0..n_slides * per).map(|s| s / per).collect();
        let sp = split_slides(&slide, &SplitConfig::default(), &Rng::new(seed)).unwrap();
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.heldout).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..slide.len()).collect::<Vec<_>>());
        prop_assert!(!sp.train.is_empty() && !sp.heldout.is_empty() && !sp.test.is_empty());
        let of = |r: &[usize]| r.iter().map(|&s| slide[s]).collect::<BTreeSet<_>>();
        prop_assert!(of(&sp.train).is_disjoint(&of(&sp.test)));
        prop_assert!(of(&sp.train).is_disjoint(&of(&sp.heldout)));
        prop_assert!(of(&sp.heldout).is_disjoint(&of(&sp.test)));
    }
}

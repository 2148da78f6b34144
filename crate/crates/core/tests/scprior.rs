use duet::kernel::Rng;
use duet::scprior::fit_signatures;
use duet::synth::{gen_sc, SynthConfig};

/// Σ|M − μ| / Σμ over all (type, gene) entries.
fn aggregate_rel_err(fit: &duet::kernel::Matrix, mu: &duet::kernel::Matrix) -> f64 {
    let (mut abs, mut tot) = (0.0, 0.0);
    for t in 0..mu.rows() {
        for g in 0..mu.cols() {
            abs += (fit.get(g, t) - mu.get(t, g)).abs();
            tot += mu.get(t, g);
        }
    }
    abs / tot
}

#[test]
fn signatures_recovered_from_generative_model() {
    let cfg = SynthConfig {
        n_genes: 150,
        n_target_genes: 20,
        n_cells_per_type: 200,
        seed: 21,
        ..Default::default()
    };
    let (sc, truth) = gen_sc(&cfg).unwrap();
    let model = fit_signatures(&sc, 100, &Rng::new(3)).unwrap();
    let err = aggregate_rel_err(&model.signature(), &truth.mu_true);

    // oracle: per-type means of counts rescaled by the true cell and batch factors
    let mut oracle = duet::kernel::Matrix::zeros(cfg.n_genes, cfg.n_types);
    let mut n = vec![0.0; cfg.n_types];
    for c in 0..sc.n_cells() {
        let t = sc.cell_type[c];
        n[t] += 1.0;
        for g in 0..cfg.n_genes {
            let f = truth.cell_scale[c] * truth.batch_true.get(sc.batch[c], g).exp();
            oracle.set(g, t, oracle.get(g, t) + sc.counts.get(c, g) as f64 / f);
        }
    }
    for g in 0..cfg.n_genes {
        for (t, &nt) in n.iter().enumerate() {
            oracle.set(g, t, oracle.get(g, t) / nt);
        }
    }
    let floor = aggregate_rel_err(&oracle, &truth.mu_true);
    assert!(err < 0.15, "relative error {err}");
    assert!(err < floor + 0.05, "relative error {err} vs oracle {floor}");
}

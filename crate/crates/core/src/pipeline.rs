//! End-to-end orchestration: data bundle, slide split, cell-composition
//! prior, both branches, fusion and evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{train_align, AlignConfig, AlignFit, AlignModel, PairedBatch};
use crate::data::{index_of, CountMatrix};
use crate::error::{DuetError, Result};
use crate::eval::{metrics, variance_curve, MetricsReport, VarianceCurve};
use crate::fuse::{fuse_batch, train_fuse, FuseAdapter, FuseConfig, FuseData, FuseFit};
use crate::io::{self, CountTable, Table};
use crate::kernel::{Matrix, Rng, SgdState};
use crate::regress::{train_regress, Consistency, RegConfig, RegFit, RegModel};
use crate::retrieval::{rebuild_db, retrieve_all, EmbeddingDB, RetrievalConfig};
use crate::scprior::{
    build_gating, deconvolve, fit_signatures, select_panel, DeconvConfig, DeconvPosterior, GatingSignal, ScDataset,
};
use crate::synth::{gen_sc, gen_spots, SynthConfig, SynthTruth};

pub mod files {
    pub const SC_COUNTS: &str = "sc_counts.tsv";
    pub const SC_META: &str = "sc_meta.tsv";
    pub const TYPES: &str = "types.txt";
    pub const ST_COUNTS: &str = "st_counts.tsv";
    pub const IMG_FEATURES: &str = "img_features.tsv";
    pub const FM_FEATURES: &str = "fm_features.tsv";
    pub const SPOT_META: &str = "spot_meta.tsv";
    pub const TARGETS: &str = "targets.txt";
    pub const TRUTH_W: &str = "truth_w.tsv";
    pub const TRUTH_MU: &str = "truth_mu.tsv";
    pub const SIGNATURE: &str = "signature.tsv";
    pub const PANEL: &str = "panel.txt";
    pub const PROPORTIONS: &str = "proportions.tsv";
    pub const Q05: &str = "q05.tsv";
    pub const GATING: &str = "gating.tsv";
    pub const SPLIT: &str = "split.json";
    pub const ALIGN: &str = "align.bin";
    pub const REGRESS: &str = "regress.bin";
    pub const FUSE: &str = "fuse.bin";
    pub const PRED_REG: &str = "pred_reg.tsv";
    pub const PRED_RET: &str = "pred_ret.tsv";
    pub const PRED_DUET: &str = "pred_duet.tsv";
    pub const ALPHA: &str = "alpha.tsv";
    pub const TRUTH_TEST: &str = "truth_test.tsv";
    pub const METRICS: &str = "metrics.json";
    pub const CURVE: &str = "variance_curve.tsv";
    pub const MANIFEST: &str = "manifest.json";
    pub const TIMINGS: &str = "timings.json";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of slides held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining slides used to train the fusion adapter.
    pub heldout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScPriorConfig {
    pub signature_epochs: usize,
    pub panel_size: usize,
    pub deconv: DeconvConfig,
}

impl Default for ScPriorConfig {
    fn default() -> Self {
        Self {
            signature_epochs: 100,
            panel_size: 100,
            deconv: DeconvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DuetConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub scprior: ScPriorConfig,
    pub align: AlignConfig,
    pub retrieval: RetrievalConfig,
    pub regress: RegConfig,
    pub fuse: FuseConfig,
}

/// Everything the model consumes, aligned by spot and gene ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub gene_ids: Vec<String>,
    pub type_ids: Vec<String>,
    pub cell_ids: Vec<String>,
    pub sc: ScDataset,
    pub spot_ids: Vec<String>,
    pub st_counts: CountMatrix,
    pub img_features: Matrix,
    pub fm_features: Matrix,
    pub cell_count: Vec<f64>,
    pub slide: Vec<usize>,
    pub targets: Vec<String>,
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(4);
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

impl Dataset {
    pub fn from_synth(cfg: &SynthConfig) -> Result<(Self, SynthTruth)> {
        let (sc, mut truth) = gen_sc(cfg)?;
        let spots = gen_spots(cfg, &mut truth)?;
        let gene_ids = cfg.gene_ids();
        let targets = truth.target_genes.iter().map(|&g| gene_ids[g].clone()).collect();
        let ds = Dataset {
            type_ids: cfg.type_ids(),
            cell_ids: numbered("cell", sc.n_cells()),
            spot_ids: numbered("spot", cfg.n_spots),
            gene_ids,
            sc,
            st_counts: spots.counts,
            img_features: spots.img_features,
            fm_features: spots.fm_features,
            cell_count: spots.cell_count,
            slide: spots.slide,
            targets,
        };
        Ok((ds, truth))
    }

    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn target_index(&self) -> Result<Vec<usize>> {
        index_of(&self.gene_ids, &self.targets)
    }

    /// log1p expression of the target genes, spots × targets.
    pub fn target_expression(&self) -> Result<Matrix> {
        Ok(self.st_counts.select_cols(&self.target_index()?).log1p())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_spots();
        let rows_ok = self.st_counts.rows() == s
            && self.img_features.rows() == s
            && self.fm_features.rows() == s
            && self.cell_count.len() == s
            && self.slide.len() == s;
        if !rows_ok {
            return Err(DuetError::input("spot-level inputs do not share the same spots"));
        }
        if self.st_counts.cols() != self.gene_ids.len() || self.sc.n_genes() != self.gene_ids.len() {
            return Err(DuetError::input("single-cell and spot counts must share the gene list"));
        }
        if self.targets.is_empty() {
            return Err(DuetError::input("no target genes"));
        }
        self.target_index()?;
        self.sc.validate()
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            io::write_text(&p, &text)?;
            written.push(p);
            Ok(())
        };
        put(
            files::SC_COUNTS,
            io::counts_to_string(&CountTable::new(
                self.cell_ids.clone(),
                self.gene_ids.clone(),
                self.sc.counts.clone(),
            )?),
        )?;
        let meta = Matrix::from_fn(self.sc.n_cells(), 2, |c, j| {
            if j == 0 {
                self.sc.cell_type[c] as f64
            } else {
                self.sc.batch[c] as f64
            }
        });
        put(
            files::SC_META,
            io::table_to_string(&Table::new(
                self.cell_ids.clone(),
                vec!["type".into(), "batch".into()],
                meta,
            )?),
        )?;
        put(files::TYPES, lines(&self.type_ids))?;
        put(
            files::ST_COUNTS,
            io::counts_to_string(&CountTable::new(
                self.spot_ids.clone(),
                self.gene_ids.clone(),
                self.st_counts.clone(),
            )?),
        )?;
        let fcols = |m: &Matrix| numbered("f", m.cols());
        put(
            files::IMG_FEATURES,
            io::table_to_string(&Table::new(
                self.spot_ids.clone(),
                fcols(&self.img_features),
                self.img_features.clone(),
            )?),
        )?;
        put(
            files::FM_FEATURES,
            io::table_to_string(&Table::new(
                self.spot_ids.clone(),
                fcols(&self.fm_features),
                self.fm_features.clone(),
            )?),
        )?;
        let smeta = Matrix::from_fn(self.n_spots(), 2, |s, j| {
            if j == 0 {
                self.cell_count[s]
            } else {
                self.slide[s] as f64
            }
        });
        put(
            files::SPOT_META,
            io::table_to_string(&Table::new(
                self.spot_ids.clone(),
                vec!["cell_count".into(), "slide".into()],
                smeta,
            )?),
        )?;
        put(files::TARGETS, lines(&self.targets))?;
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sc_counts = io::read_counts(&dir.join(files::SC_COUNTS))?;
        let meta_path = dir.join(files::SC_META);
        let meta = io::read_table(&meta_path)?;
        if meta.row_ids != sc_counts.row_ids || meta.col_ids.len() != 2 {
            return Err(DuetError::parse(
                &meta_path,
                "expected type and batch columns for every cell",
            ));
        }
        let label = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(DuetError::parse(
                    &meta_path,
                    format!("label {v} is not a non-negative integer"),
                ))
            }
        };
        let cell_type = meta.values.col(0).into_iter().map(label).collect::<Result<Vec<_>>>()?;
        let batch = meta.values.col(1).into_iter().map(label).collect::<Result<Vec<_>>>()?;
        let type_ids = read_lines(&dir.join(files::TYPES))?;
        let n_batches = batch.iter().max().map_or(0, |b| b + 1);
        let sc = ScDataset::new(sc_counts.counts, cell_type, batch, type_ids.len(), n_batches)?;

        let st = io::read_counts(&dir.join(files::ST_COUNTS))?;
        let img = io::read_table(&dir.join(files::IMG_FEATURES))?;
        let fm = io::read_table(&dir.join(files::FM_FEATURES))?;
        let smeta_path = dir.join(files::SPOT_META);
        let smeta = io::read_table(&smeta_path)?;
        for (t, name) in [
            (&img.row_ids, files::IMG_FEATURES),
            (&fm.row_ids, files::FM_FEATURES),
            (&smeta.row_ids, files::SPOT_META),
        ] {
            if *t != st.row_ids {
                return Err(DuetError::parse(
                    dir.join(name),
                    "spot ids differ from the spot count table",
                ));
            }
        }
        if sc_counts.col_ids != st.col_ids {
            return Err(DuetError::parse(
                dir.join(files::ST_COUNTS),
                "gene ids differ from the single-cell table",
            ));
        }
        if smeta.col_ids.len() != 2 {
            return Err(DuetError::parse(&smeta_path, "expected cell_count and slide columns"));
        }
        let slide = smeta
            .values
            .col(1)
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(DuetError::parse(
                        &smeta_path,
                        format!("slide {v} is not a non-negative integer"),
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            gene_ids: st.col_ids,
            type_ids,
            cell_ids: sc_counts.row_ids,
            sc,
            spot_ids: st.row_ids,
            st_counts: st.counts,
            img_features: img.values,
            fm_features: fm.values,
            cell_count: smeta.values.col(0),
            slide,
            targets: read_lines(&dir.join(files::TARGETS))?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn lines(items: &[String]) -> String {
    let mut s = items.join("\n");
    s.push('\n');
    s
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(io::read_text(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Spot indices of the three slide-level partitions, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_slides(slide: &[usize], cfg: &SplitConfig, rng: &Rng) -> Result<Split> {
    let slides: Vec<usize> = slide.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = slides.len();
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).max(1);
    let n_held = ((cfg.heldout_fraction * n.saturating_sub(n_test) as f64).round() as usize).max(1);
    if n_test + n_held >= n {
        return Err(DuetError::input(format!(
            "{n} slides cannot provide test ({n_test}), held-out ({n_held}) and training slides"
        )));
    }
    let perm = rng.clone().permutation(n);
    let test: BTreeSet<usize> = perm[..n_test].iter().map(|&i| slides[i]).collect();
    let held: BTreeSet<usize> = perm[n_test..n_test + n_held].iter().map(|&i| slides[i]).collect();
    let mut out = Split {
        train: Vec::new(),
        heldout: Vec::new(),
        test: Vec::new(),
    };
    for (s, sl) in slide.iter().enumerate() {
        if test.contains(sl) {
            out.test.push(s);
        } else if held.contains(sl) {
            out.heldout.push(s);
        } else {
            out.train.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<String>,
    heldout: Vec<String>,
    test: Vec<String>,
}

/// Cell-composition prior for every spot.
#[derive(Debug, Clone)]
pub struct Prior {
    /// G×T signature over all genes.
    pub signature: Matrix,
    pub panel: Vec<String>,
    pub posterior: DeconvPosterior,
    pub gating: GatingSignal,
}

pub fn run_prior(ds: &Dataset, cfg: &ScPriorConfig, rng: &Rng) -> Result<Prior> {
    let model = fit_signatures(&ds.sc, cfg.signature_epochs, &rng.named("signature"))?;
    let signature = model.signature();
    let panel = select_panel(&ds.gene_ids, &ds.targets, cfg.panel_size, &rng.named("panel"))?;
    let idx = index_of(&ds.gene_ids, &panel)?;
    let posterior = deconvolve(
        &ds.st_counts.select_cols(&idx),
        &signature.select_rows(&idx),
        &cfg.deconv,
        &rng.named("deconv"),
    )?;
    let gating = build_gating(&posterior, &ds.cell_count)?;
    Ok(Prior {
        signature,
        panel,
        posterior,
        gating,
    })
}

/// Branch predictions and fused output for a set of spots.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub reg: Matrix,
    pub ret: Matrix,
    pub duet: Matrix,
    pub alpha: Vec<f64>,
}

/// Trained models plus their training traces.
#[derive(Debug, Clone)]
pub struct Models {
    pub align: AlignFit,
    pub reg: RegFit,
    pub fuse: FuseFit,
}

pub fn train_align_stage(ds: &Dataset, y: &Matrix, split: &Split, cfg: &AlignConfig, rng: &Rng) -> Result<AlignFit> {
    let rows = &split.train;
    let batch = PairedBatch::new(
        ds.img_features.select_rows(rows),
        y.select_rows(rows),
        rows.iter().map(|&i| ds.spot_ids[i].clone()).collect(),
    )?;
    train_align(&batch, cfg, &mut SgdState::new(cfg.sgd), &rng.named("align"))
}

/// Retrieval database over the training spots.
pub fn training_db(
    ds: &Dataset,
    y: &Matrix,
    gating: &GatingSignal,
    split: &Split,
    align: &AlignModel,
) -> Result<EmbeddingDB> {
    let rows = &split.train;
    let ids: Vec<String> = rows.iter().map(|&i| ds.spot_ids[i].clone()).collect();
    rebuild_db(align, &y.select_rows(rows), &gating.g.select_rows(rows), &ids)
}

/// `p_ret` for spots outside the database.
pub fn retrieve_rows(
    ds: &Dataset,
    db: &EmbeddingDB,
    align: &AlignModel,
    gating: &GatingSignal,
    rows: &[usize],
    cfg: &RetrievalConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    let v = align.embed_images(&ds.img_features.select_rows(rows))?;
    retrieve_all(db, &v, &gating.g.select_rows(rows), cfg, false)
}

pub fn train_regress_stage(
    ds: &Dataset,
    y: &Matrix,
    split: &Split,
    gating: &GatingSignal,
    align: &AlignModel,
    cfg: &DuetConfig,
    rng: &Rng,
) -> Result<RegFit> {
    let rows = &split.train;
    let img = ds.img_features.select_rows(rows);
    let g = gating.g.select_rows(rows);
    let ids: Vec<String> = rows.iter().map(|&i| ds.spot_ids[i].clone()).collect();
    let consistency = Consistency {
        align,
        img_features: &img,
        gating: &g,
        spot_ids: &ids,
        retrieval: &cfg.retrieval,
    };
    train_regress(
        &ds.fm_features.select_rows(rows),
        &y.select_rows(rows),
        Some(consistency),
        &cfg.regress,
        &mut SgdState::new(cfg.regress.sgd),
        &rng.named("regress"),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_fuse_stage(
    ds: &Dataset,
    y: &Matrix,
    split: &Split,
    gating: &GatingSignal,
    align: &AlignModel,
    reg: &RegModel,
    cfg: &DuetConfig,
    rng: &Rng,
) -> Result<FuseFit> {
    let rows = &split.heldout;
    let db = training_db(ds, y, gating, split, align)?;
    let features = ds.fm_features.select_rows(rows);
    let data = FuseData::new(
        features.clone(),
        retrieve_rows(ds, &db, align, gating, rows, &cfg.retrieval)?,
        reg.predict(&features)?,
        y.select_rows(rows),
    )?;
    let rng = rng.named("fuse");
    let adapter = FuseAdapter::new(features.cols(), cfg.fuse.hidden, cfg.fuse.reg_coef, &rng)?;
    train_fuse(adapter, &data, &cfg.fuse, &mut SgdState::new(cfg.fuse.sgd), &rng)
}

#[allow(clippy::too_many_arguments)]
pub fn predict_rows(
    ds: &Dataset,
    y: &Matrix,
    split: &Split,
    gating: &GatingSignal,
    align: &AlignModel,
    reg: &RegModel,
    adapter: &FuseAdapter,
    rows: &[usize],
    retrieval: &RetrievalConfig,
) -> Result<Predictions> {
    let db = training_db(ds, y, gating, split, align)?;
    let features = ds.fm_features.select_rows(rows);
    let ret = retrieve_rows(ds, &db, align, gating, rows, retrieval)?;
    let reg_pred = reg.predict(&features)?;
    let (duet, alpha) = fuse_batch(adapter, &features, &ret, &reg_pred)?;
    Ok(Predictions {
        rows: rows.to_vec(),
        reg: reg_pred,
        ret,
        duet,
        alpha,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub duet: MetricsReport,
    pub regression: MetricsReport,
    pub retrieval: MetricsReport,
    /// Fixed equal weighting of the two branches.
    pub average: MetricsReport,
    pub variance_mad_duet: f64,
    pub variance_mad_regression: f64,
    pub variance_mad_retrieval: f64,
}

pub fn evaluate(pred: &Predictions, truth: &Matrix) -> Result<EvalSummary> {
    let avg = Matrix::from_fn(truth.rows(), truth.cols(), |i, j| {
        0.5 * (pred.reg.get(i, j) + pred.ret.get(i, j))
    });
    let mad = |p: &Matrix| -> Result<f64> { Ok(variance_curve(p, truth)?.mean_abs_deviation()) };
    Ok(EvalSummary {
        duet: metrics(&pred.duet, truth)?,
        regression: metrics(&pred.reg, truth)?,
        retrieval: metrics(&pred.ret, truth)?,
        average: metrics(&avg, truth)?,
        variance_mad_duet: mad(&pred.duet)?,
        variance_mad_regression: mad(&pred.reg)?,
        variance_mad_retrieval: mad(&pred.ret)?,
    })
}

/// In-memory result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub split: Split,
    pub prior: Prior,
    pub y: Matrix,
    pub models: Models,
    pub test: Predictions,
    pub summary: EvalSummary,
}

/// Train everything after the prior. Split, prior and seed are inputs so
/// ablations can share them.
pub fn run_with_prior(ds: &Dataset, split: Split, prior: Prior, cfg: &DuetConfig, rng: &Rng) -> Result<RunOutput> {
    let y = ds.target_expression()?;
    let align = train_align_stage(ds, &y, &split, &cfg.align, rng)?;
    let reg = train_regress_stage(ds, &y, &split, &prior.gating, &align.model, cfg, rng)?;
    let fuse = train_fuse_stage(ds, &y, &split, &prior.gating, &align.model, &reg.model, cfg, rng)?;
    let test = predict_rows(
        ds,
        &y,
        &split,
        &prior.gating,
        &align.model,
        &reg.model,
        &fuse.adapter,
        &split.test,
        &cfg.retrieval,
    )?;
    let summary = evaluate(&test, &y.select_rows(&split.test))?;
    Ok(RunOutput {
        split,
        prior,
        y,
        models: Models { align, reg, fuse },
        test,
        summary,
    })
}

pub fn run(ds: &Dataset, cfg: &DuetConfig) -> Result<RunOutput> {
    ds.validate()?;
    let rng = Rng::new(cfg.seed);
    let split = split_slides(&ds.slide, &cfg.split, &rng.named("split"))?;
    let prior = run_prior(ds, &cfg.scprior, &rng)?;
    run_with_prior(ds, split, prior, cfg, &rng)
}

// ---- file-backed stages -------------------------------------------------

fn spot_table(ds: &Dataset, rows: &[usize], cols: Vec<String>, values: Matrix) -> Result<Table> {
    Table::new(rows.iter().map(|&i| ds.spot_ids[i].clone()).collect(), cols, values)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DuetError::io(dir, e))
}

/// Generate a synthetic bundle (plus truth files) into `out`.
pub fn stage_synth(cfg: &DuetConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (ds, truth) = Dataset::from_synth(&cfg.synth)?;
    ds.save(out)?;
    let st = truth.spots.as_ref().expect("spots generated");
    io::write_table(
        &out.join(files::TRUTH_W),
        &Table::new(ds.spot_ids.clone(), ds.type_ids.clone(), st.w_true.clone())?,
    )?;
    io::write_table(
        &out.join(files::TRUTH_MU),
        &Table::new(ds.type_ids.clone(), ds.gene_ids.clone(), truth.mu_true.clone())?,
    )?;
    Ok(())
}

pub fn stage_deconv(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let prior = run_prior(&ds, &cfg.scprior, &Rng::new(cfg.seed))?;
    let all: Vec<usize> = (0..ds.n_spots()).collect();
    io::write_table(
        &out.join(files::SIGNATURE),
        &Table::new(ds.gene_ids.clone(), ds.type_ids.clone(), prior.signature.clone())?,
    )?;
    io::write_text(&out.join(files::PANEL), &lines(&prior.panel))?;
    io::write_table(
        &out.join(files::PROPORTIONS),
        &spot_table(&ds, &all, ds.type_ids.clone(), prior.posterior.proportions())?,
    )?;
    io::write_table(
        &out.join(files::Q05),
        &spot_table(&ds, &all, ds.type_ids.clone(), prior.posterior.w_q05.clone())?,
    )?;
    io::write_table(
        &out.join(files::GATING),
        &spot_table(&ds, &all, ds.type_ids.clone(), prior.gating.g.clone())?,
    )?;
    Ok(())
}

fn load_gating(ds: &Dataset, dir: &Path) -> Result<GatingSignal> {
    let path = dir.join(files::GATING);
    let t = io::read_table(&path)?;
    if t.row_ids != ds.spot_ids {
        return Err(DuetError::parse(&path, "spot ids differ from the data bundle"));
    }
    Ok(GatingSignal {
        g: t.values,
        cell_count: ds.cell_count.clone(),
    })
}

fn load_split(ds: &Dataset, cfg: &DuetConfig, dir: &Path) -> Result<Split> {
    let path = dir.join(files::SPLIT);
    if !path.exists() {
        return split_slides(&ds.slide, &cfg.split, &Rng::new(cfg.seed).named("split"));
    }
    let f: SplitFile = io::read_json(&path)?;
    Ok(Split {
        train: index_of(&ds.spot_ids, &f.train)?,
        heldout: index_of(&ds.spot_ids, &f.heldout)?,
        test: index_of(&ds.spot_ids, &f.test)?,
    })
}

fn save_split(ds: &Dataset, split: &Split, out: &Path) -> Result<()> {
    let ids = |r: &[usize]| r.iter().map(|&i| ds.spot_ids[i].clone()).collect();
    io::write_json(
        &out.join(files::SPLIT),
        &SplitFile {
            train: ids(&split.train),
            heldout: ids(&split.heldout),
            test: ids(&split.test),
        },
    )
}

fn load_align(dir: &Path) -> Result<AlignModel> {
    AlignModel::from_bytes(&crate::checkpoint::read_file(&dir.join(files::ALIGN))?)
}

fn load_reg(dir: &Path) -> Result<RegModel> {
    RegModel::from_bytes(&crate::checkpoint::read_file(&dir.join(files::REGRESS))?)
}

fn load_fuse(dir: &Path) -> Result<FuseAdapter> {
    FuseAdapter::from_bytes(&crate::checkpoint::read_file(&dir.join(files::FUSE))?)
}

pub fn stage_align(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let split = load_split(&ds, cfg, data)?;
    let y = ds.target_expression()?;
    let fit = train_align_stage(&ds, &y, &split, &cfg.align, &Rng::new(cfg.seed))?;
    save_split(&ds, &split, out)?;
    crate::checkpoint::write_file(&out.join(files::ALIGN), &fit.model.to_bytes())
}

pub fn stage_retrieve(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let split = load_split(&ds, cfg, data)?;
    let y = ds.target_expression()?;
    let gating = load_gating(&ds, data)?;
    let align = load_align(data)?;
    let db = training_db(&ds, &y, &gating, &split, &align)?;
    let ret = retrieve_rows(&ds, &db, &align, &gating, &split.test, &cfg.retrieval)?;
    io::write_table(
        &out.join(files::PRED_RET),
        &spot_table(&ds, &split.test, ds.targets.clone(), ret)?,
    )
}

pub fn stage_regress(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let split = load_split(&ds, cfg, data)?;
    let y = ds.target_expression()?;
    let gating = load_gating(&ds, data)?;
    let align = load_align(data)?;
    let fit = train_regress_stage(&ds, &y, &split, &gating, &align, cfg, &Rng::new(cfg.seed))?;
    crate::checkpoint::write_file(&out.join(files::REGRESS), &fit.model.to_bytes())
}

pub fn stage_fuse(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let split = load_split(&ds, cfg, data)?;
    let y = ds.target_expression()?;
    let gating = load_gating(&ds, data)?;
    let fit = train_fuse_stage(
        &ds,
        &y,
        &split,
        &gating,
        &load_align(data)?,
        &load_reg(data)?,
        cfg,
        &Rng::new(cfg.seed),
    )?;
    crate::checkpoint::write_file(&out.join(files::FUSE), &fit.adapter.to_bytes())
}

pub fn stage_predict(cfg: &DuetConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = Dataset::load(data)?;
    let split = load_split(&ds, cfg, data)?;
    let y = ds.target_expression()?;
    let gating = load_gating(&ds, data)?;
    let p = predict_rows(
        &ds,
        &y,
        &split,
        &gating,
        &load_align(data)?,
        &load_reg(data)?,
        &load_fuse(data)?,
        &split.test,
        &cfg.retrieval,
    )?;
    let t = |m: Matrix| spot_table(&ds, &split.test, ds.targets.clone(), m);
    io::write_table(&out.join(files::PRED_REG), &t(p.reg.clone())?)?;
    io::write_table(&out.join(files::PRED_RET), &t(p.ret.clone())?)?;
    io::write_table(&out.join(files::PRED_DUET), &t(p.duet.clone())?)?;
    io::write_table(&out.join(files::TRUTH_TEST), &t(y.select_rows(&split.test))?)?;
    let alpha = Matrix::from_vec(p.alpha.len(), 1, p.alpha.clone())?;
    io::write_table(
        &out.join(files::ALPHA),
        &spot_table(&ds, &split.test, vec!["alpha".into()], alpha)?,
    )
}

fn read_aligned(pred: &Path, truth: &Path) -> Result<(Table, Table)> {
    let p = io::read_table(pred)?;
    let t = io::read_table(truth)?;
    if p.row_ids != t.row_ids || p.col_ids != t.col_ids {
        return Err(DuetError::input(format!(
            "{} and {} do not share row and column ids",
            pred.display(),
            truth.display()
        )));
    }
    Ok((p, t))
}

/// Metrics of one prediction table against one truth table.
pub fn eval_files(pred: &Path, truth: &Path) -> Result<MetricsReport> {
    let (p, t) = read_aligned(pred, truth)?;
    metrics(&p.values, &t.values)
}

pub fn curve_table(curve: &VarianceCurve, gene_ids: &[String]) -> Result<Table> {
    let rows = curve.order.iter().map(|&j| gene_ids[j].clone()).collect();
    let vals = Matrix::from_fn(curve.order.len(), 2, |i, j| {
        if j == 0 {
            curve.truth_var_norm[i]
        } else {
            curve.pred_var_norm[i]
        }
    });
    Table::new(rows, vec!["truth".into(), "pred".into()], vals)
}

/// Evaluate the branch and fused predictions written by [`stage_predict`].
pub fn stage_eval(data: &Path, out: &Path) -> Result<EvalSummary> {
    ensure_dir(out)?;
    let truth_path = data.join(files::TRUTH_TEST);
    let (duet, truth) = read_aligned(&data.join(files::PRED_DUET), &truth_path)?;
    let (reg, _) = read_aligned(&data.join(files::PRED_REG), &truth_path)?;
    let (ret, _) = read_aligned(&data.join(files::PRED_RET), &truth_path)?;
    let alpha = io::read_table(&data.join(files::ALPHA))?;
    let preds = Predictions {
        rows: Vec::new(),
        reg: reg.values,
        ret: ret.values,
        duet: duet.values,
        alpha: alpha.values.into_data(),
    };
    let summary = evaluate(&preds, &truth.values)?;
    io::write_json(&out.join(files::METRICS), &summary)?;
    let curve = variance_curve(&preds.duet, &truth.values)?;
    io::write_table(&out.join(files::CURVE), &curve_table(&curve, &truth.col_ids)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: DuetConfig,
    /// Content hashes of inputs that came from outside the output directory.
    pub inputs: std::collections::BTreeMap<String, String>,
    /// Content hashes of every output file.
    pub outputs: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Every stage in order, writing into `out`. The manifest hashes all outputs;
/// wall-clock times go to a separate file so the manifest stays reproducible.
pub fn stage_pipeline(cfg: &DuetConfig, out: &Path, config_path: Option<&Path>) -> Result<EvalSummary> {
    ensure_dir(out)?;
    let mut timings = Vec::new();
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let started = now_ms();
        f()?;
        timings.push(StageTiming {
            stage: name.to_string(),
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        });
        Ok(())
    };
    timed("synth", &mut || stage_synth(cfg, out))?;
    timed("deconv", &mut || stage_deconv(cfg, out, out))?;
    timed("align", &mut || stage_align(cfg, out, out))?;
    timed("regress", &mut || stage_regress(cfg, out, out))?;
    timed("fuse", &mut || stage_fuse(cfg, out, out))?;
    timed("predict", &mut || stage_predict(cfg, out, out))?;
    let mut summary = None;
    timed("eval", &mut || {
        summary = Some(stage_eval(out, out)?);
        Ok(())
    })?;

    let mut inputs = std::collections::BTreeMap::new();
    if let Some(p) = config_path {
        inputs.insert("config".to_string(), io::file_hash(p)?);
    }
    let mut outputs = std::collections::BTreeMap::new();
    let entries = std::fs::read_dir(out).map_err(|e| DuetError::io(out, e))?;
    for e in entries {
        let e = e.map_err(|e| DuetError::io(out, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name == files::MANIFEST || name == files::TIMINGS || !e.path().is_file() {
            continue;
        }
        outputs.insert(name, io::file_hash(&e.path())?);
    }
    io::write_json(
        &out.join(files::MANIFEST),
        &RunManifest {
            seed: cfg.seed,
            config: cfg.clone(),
            inputs,
            outputs,
        },
    )?;
    io::write_json(&out.join(files::TIMINGS), &timings)?;
    Ok(summary.expect("eval stage ran"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_slide_level_and_disjoint() {
        let slide: Vec<usize> = (0..120).map(|s| s / 10).collect();
        let sp = split_slides(&slide, &SplitConfig::default(), &Rng::new(3)).unwrap();
        assert_eq!(sp.train.len() + sp.heldout.len() + sp.test.len(), 120);
        let slides_of = |r: &[usize]| r.iter().map(|&s| slide[s]).collect::<BTreeSet<_>>();
        let (a, b, c) = (slides_of(&sp.train), slides_of(&sp.heldout), slides_of(&sp.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(c.len(), 3);
        assert_eq!(b.len(), 1);
        assert_eq!(sp, split_slides(&slide, &SplitConfig::default(), &Rng::new(3)).unwrap());
    }

    #[test]
    fn too_few_slides() {
        let slide = vec![0, 0, 1, 1];
        assert!(split_slides(&slide, &SplitConfig::default(), &Rng::new(1)).is_err());
    }

    #[test]
    fn numbered_ids_sort_lexically() {
        let ids = numbered("spot", 12_000);
        assert_eq!(ids[7], "spot00007");
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, SplitName};
use super::render::render_grid;
use super::write_atomic;
use crate::attacks::{derive_seed, run_sweep_with, AttackResult, StopReason, SweepCase, SweepOutcome, Variant};
use crate::data::{load_mnist, sample_victims, synthetic, write_victim_manifest, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::fedsim::fed_train;
use crate::masks::{mmd, trd, MaskSet};
use crate::metrics::{MetricReport, SampleMetrics};
use crate::nn::{load_checkpoint, save_checkpoint, ModelSpec, ParameterSet};

// Stream tags for derive_seed.
const SEED_PARAMS: u64 = 1;
const SEED_VICTIMS: u64 = 2;
const SEED_CLIENT: u64 = 3;
const SEED_ATTACK: u64 = 4;
const SEED_FED: u64 = 5;
const SEED_SYNTH_TRAIN: u64 = 6;
const SEED_SYNTH_TEST: u64 = 7;

/// Train and test splits with the normalization fitted on the training split.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

impl Data {
    pub fn split(&self, split: SplitName) -> &Dataset {
        match split {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
        }
    }
}

pub fn load_data(config: &ExperimentConfig) -> Result<Data> {
    let (train, test) = match config.data.source {
        DataSource::Mnist => {
            let dir = config.data_dir();
            (load_mnist(&dir, Split::Train)?, load_mnist(&dir, Split::Test)?)
        }
        DataSource::Synthetic => {
            let d = &config.data;
            let make = |tag| {
                synthetic(
                    d.synthetic_classes,
                    d.synthetic_size,
                    d.synthetic_side,
                    d.synthetic_side,
                    derive_seed(config.seed, &[tag]),
                )
            };
            (make(SEED_SYNTH_TRAIN)?, make(SEED_SYNTH_TEST)?)
        }
    };
    let norm = Normalization::from_dataset(&train)?;
    Ok(Data { train, test, norm })
}

/// Model parameters: the configured checkpoint, or a seeded random initialization
/// shared by every dropout rate.
pub fn model_params(config: &ExperimentConfig, spec: &ModelSpec) -> Result<ParameterSet> {
    match &config.model.checkpoint {
        Some(path) => Ok(load_checkpoint(path, spec)?.0),
        None => Ok(ParameterSet::init(
            spec,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SEED_PARAMS])),
        )),
    }
}

/// One reconstructed batch scored against its originals.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    /// Per original sample, in victim order.
    pub metrics: Vec<SampleMetrics>,
    /// Originals in [0, 1].
    pub originals: Vec<Vec<f64>>,
    /// The reconstruction paired with each original, in [0, 1].
    pub reconstructions: Vec<Vec<f64>>,
}

/// Pairs reconstructions with originals and scores them.
///
/// Reconstructions are denormalized first. Pairing is greedy: pairs with matching
/// labels come before mismatched ones, higher SSIM first within each group. When
/// the attack produced masks, each sample also gets its MMD against the client's
/// row and the TRD of its own row. Sample ids start at `first_id`.
#[allow(clippy::too_many_arguments)]
pub fn score_outcome(
    result: &AttackResult,
    originals: &[f64],
    labels: &[usize],
    shape: [usize; 3],
    norm: &Normalization,
    client_masks: Option<&MaskSet>,
    p: f64,
    first_id: usize,
) -> Result<ScoredBatch> {
    let numel: usize = shape.iter().product();
    let batch = labels.len();
    if originals.len() != batch * numel || result.x.len() != batch * numel {
        return Err(Error::shape("score_outcome", "batch does not match the reconstruction"));
    }
    let recon = norm.denormalize(&result.x);
    let orig: Vec<&[f64]> = originals.chunks(numel).collect();
    let rec: Vec<&[f64]> = recon.chunks(numel).collect();

    let mut candidates = Vec::with_capacity(batch * batch);
    for (i, o) in orig.iter().enumerate() {
        for (j, r) in rec.iter().enumerate() {
            let m = SampleMetrics::compare(0, o, r, shape)?;
            candidates.push((labels[i] == result.labels[j], m.ssim, i, j, m));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    let mut pair: Vec<Option<(usize, SampleMetrics)>> = vec![None; batch];
    let mut taken = vec![false; batch];
    for (_, _, i, j, m) in candidates {
        if pair[i].is_none() && !taken[j] {
            taken[j] = true;
            pair[i] = Some((j, m));
        }
    }

    let mut metrics = Vec::with_capacity(batch);
    let mut reconstructions = Vec::with_capacity(batch);
    for (i, slot) in pair.into_iter().enumerate() {
        let (j, mut m) = slot.expect("every original is paired");
        m.sample_id = first_id + i;
        if let Some(att) = &result.masks {
            let row = att.samples(j, j + 1)?;
            if let Some(client) = client_masks {
                m.mmd = Some(mmd(&row, &client.samples(i, i + 1)?)?);
            }
            m.trd = Some(trd(&row, p));
        }
        metrics.push(m);
        reconstructions.push(rec[j].to_vec());
    }
    Ok(ScoredBatch {
        metrics,
        originals: orig.iter().map(|o| o.to_vec()).collect(),
        reconstructions,
    })
}

fn images_csv(first_id: usize, images: &[Vec<f64>]) -> String {
    let numel = images.first().map_or(0, Vec::len);
    let mut out = String::from("sample_id");
    for k in 0..numel {
        let _ = write!(out, ",px{k}");
    }
    out.push('\n');
    for (i, img) in images.iter().enumerate() {
        let _ = write!(out, "{}", first_id + i);
        for v in img {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Reads an image CSV written by the runner (`sample_id,px0,...`).
pub fn read_images_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Config(format!("{}: malformed row {line}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1))?;
    let cols = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != cols {
                return Err(bad(n + 2));
            }
            fields[1..].iter().map(|f| f.parse::<f64>().map_err(|_| bad(n + 2))).collect()
        })
        .collect()
}

/// One (variant, p) cell of an attack sweep.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub variant: Variant,
    pub p: f64,
    pub dir: PathBuf,
    pub report: MetricReport,
    pub diverged: usize,
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub cells: Vec<CellSummary>,
}

impl AttackRun {
    pub fn cell(&self, variant: Variant, p: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.variant == variant && c.p == p)
    }

    /// `variant,p,batch_size,samples,ssim_mean,ssim_std,psnr_mean,mse_mean,mmd_mean,trd_mean,diverged`
    pub fn summary_csv(&self, batch_size: usize) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out =
            String::from("variant,p,batch_size,samples,ssim_mean,ssim_std,psnr_mean,mse_mean,mmd_mean,trd_mean,diverged\n");
        for c in &self.cells {
            let r = &c.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.variant.name(),
                c.p,
                batch_size,
                r.len(),
                opt(r.ssim().map(|s| s.mean)),
                opt(r.ssim().map(|s| s.std)),
                opt(r.psnr().map(|s| s.mean)),
                opt(r.mse().map(|s| s.mean)),
                opt(r.mmd().map(|s| s.mean)),
                opt(r.trd().map(|s| s.mean)),
                c.diverged
            );
        }
        out
    }
}

/// Everything a worker needs to score and persist one finished case.
struct CaseContext<'a> {
    config: &'a ExperimentConfig,
    shape: [usize; 3],
    norm: &'a Normalization,
    /// Per victim: originals in [0, 1] and labels.
    victims: Vec<(Vec<f64>, Vec<usize>)>,
    /// `config_id -> (variant, p)`
    cells: Vec<(Variant, f64)>,
}

impl CaseContext<'_> {
    fn score(&self, o: &SweepOutcome) -> Result<ScoredBatch> {
        let (_, p) = self.cells[o.config_id];
        let (x, labels) = &self.victims[o.victim];
        score_outcome(
            &o.result,
            x,
            labels,
            self.shape,
            self.norm,
            Some(&o.client_masks),
            p,
            o.victim * labels.len(),
        )
    }

    /// Per-run artifacts, written by the worker that ran the case.
    fn persist(&self, o: &SweepOutcome) -> Result<()> {
        let (variant, p) = self.cells[o.config_id];
        let dir = self.config.attack_dir(variant, p);
        let k = o.victim;
        let scored = self.score(o)?;
        o.result.write_trace_csv(&dir.join(format!("loss_trace_v{k}.csv")))?;
        if o.client_masks.num_layers() > 0 {
            o.client_masks.write_csv(&dir, &format!("client_masks_v{k}"))?;
        }
        if let Some(m) = &o.result.masks {
            m.write_csv(&dir, &format!("attacker_masks_v{k}"))?;
        }
        render_grid(
            &scored.originals,
            &scored.reconstructions,
            self.shape,
            &dir.join(format!("grid_v{k}.ppm")),
        )
    }
}

/// `run-attack`: every victim batch against every (variant, p) pair.
///
/// Workers write each run's loss trace, mask CSVs and image grid as soon as the
/// run finishes. The coordinator then writes `metrics.csv`, the combined image
/// CSVs and `grid.ppm` per (variant, p), plus `victims.csv` and `summary.csv` at
/// the seed level. Fails with [`Error::Divergence`] after writing everything if
/// any run diverged.
pub fn run_attack_cmd(config: &ExperimentConfig) -> Result<AttackRun> {
    config.validate()?;
    let data = load_data(config)?;
    let ds = data.split(config.data.split);
    let shape = ds.shape();
    let batch = config.data.batch_size;
    let victims = sample_victims(
        ds,
        config.data.victims,
        batch,
        config.data.distinct_labels,
        derive_seed(config.seed, &[SEED_VICTIMS]),
    )?;
    write_victim_manifest(&config.seed_dir().join("victims.csv"), &victims)?;

    let rates = config.rates();
    let variants = config.variants();
    let mut cells = Vec::new();
    let mut models = Vec::new();
    for &p in &rates {
        let spec = config.model.spec(shape, ds.num_classes(), p)?;
        let params = Arc::new(model_params(config, &spec)?);
        models.push((spec, params));
        for &v in &variants {
            cells.push((v, p));
        }
    }

    let victim_data: Vec<(Vec<f64>, Vec<usize>)> = victims.iter().map(|v| ds.gather(&v.indices)).collect();
    let mut cases = Vec::new();
    for (k, (x, labels)) in victim_data.iter().enumerate() {
        let xn = data.norm.normalize(x);
        for (config_id, &(variant, p)) in cells.iter().enumerate() {
            let (spec, params) = &models[config_id / variants.len()];
            // keyed on the rate itself so a cell's draws do not depend on the sweep
            let at = |tag| derive_seed(config.seed, &[tag, k as u64, p.to_bits()]);
            cases.push(SweepCase {
                victim: k,
                config_id,
                spec: spec.clone(),
                params: Arc::clone(params),
                x: xn.clone(),
                labels: labels.clone(),
                client_seed: at(SEED_CLIENT),
                config: config.attack.config(variant, config.model.architecture, spec.input_shape(), at(SEED_ATTACK)),
            });
        }
    }

    let ctx = CaseContext {
        config,
        shape,
        norm: &data.norm,
        victims: victim_data,
        cells: cells.clone(),
    };
    let outcomes = run_sweep_with(cases, config.jobs, |o| ctx.persist(o))?;

    let mut summaries = Vec::with_capacity(cells.len());
    for (config_id, &(variant, p)) in cells.iter().enumerate() {
        let dir = config.attack_dir(variant, p);
        let mut metrics = Vec::new();
        let mut originals = Vec::new();
        let mut reconstructions = Vec::new();
        let mut diverged = 0;
        for o in outcomes.iter().filter(|o| o.config_id == config_id) {
            let scored = ctx.score(o)?;
            metrics.extend(scored.metrics);
            originals.extend(scored.originals);
            reconstructions.extend(scored.reconstructions);
            diverged += usize::from(o.result.stop_reason == StopReason::Diverged);
        }
        let report = MetricReport::new(metrics);
        report.write_csv(&dir.join("metrics.csv"))?;
        write_atomic(&dir.join("originals.csv"), images_csv(0, &originals).as_bytes())?;
        write_atomic(&dir.join("reconstructions.csv"), images_csv(0, &reconstructions).as_bytes())?;
        render_grid(&originals, &reconstructions, shape, &dir.join("grid.ppm"))?;
        summaries.push(CellSummary {
            variant,
            p,
            dir,
            report,
            diverged,
        });
    }
    let run = AttackRun { cells: summaries };
    write_atomic(
        &config.seed_dir().join("summary.csv"),
        run.summary_csv(batch).as_bytes(),
    )?;
    let diverged: usize = run.cells.iter().map(|c| c.diverged).sum();
    if diverged > 0 {
        return Err(Error::Divergence(format!("{diverged} attack run(s) diverged")));
    }
    Ok(run)
}

/// Final accuracy of one `fed-train` rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FedSummary {
    pub p: f64,
    pub dir: PathBuf,
    pub final_accuracy: f64,
}

/// `fed-train`: one FedAvg run per dropout rate, all from the same initial
/// parameters and client shards. Each run writes `rounds.csv` and `model.ckpt`
/// under its `fed_p<p>` directory; the coordinator writes `fed_summary.csv`.
pub fn fed_train_cmd(config: &ExperimentConfig) -> Result<Vec<FedSummary>> {
    config.validate()?;
    let data = load_data(config)?;
    let n = config.data.train_subset.min(data.train.len());
    let train = data.train.subset(&(0..n).collect::<Vec<_>>());
    let shape = train.shape();
    let classes = train.num_classes().max(data.test.num_classes());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rates = config.rates();
    let out = pool.install(|| {
        rates
            .par_iter()
            .map(|&p| {
                let spec = config.model.spec(shape, classes, p)?;
                let init = model_params(config, &spec)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SEED_FED]));
                let outcome = fed_train(&spec, &config.fed, init, &train, &data.test, &data.norm, &mut rng)?;
                let dir = config.fed_dir(p);
                outcome.write_csv(&dir.join("rounds.csv"))?;
                save_checkpoint(&dir.join("model.ckpt"), &spec, config.seed, outcome.final_params())?;
                Ok(FedSummary {
                    p,
                    final_accuracy: outcome.rounds.last().map_or(f64::NAN, |r| r.accuracy),
                    dir,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("p,rounds,final_accuracy\n");
    for s in &out {
        let _ = writeln!(csv, "{},{},{}", s.p, config.fed.rounds, s.final_accuracy);
    }
    write_atomic(&config.seed_dir().join("fed_summary.csv"), csv.as_bytes())?;
    Ok(out)
}

/// `render`: grid from two image CSVs written by `run-attack`.
pub fn render_cmd(originals: &Path, reconstructions: &Path, shape: Option<[usize; 3]>, out: &Path) -> Result<()> {
    let a = read_images_csv(originals)?;
    let b = read_images_csv(reconstructions)?;
    let shape = match shape {
        Some(s) => s,
        None => {
            let n = a.first().map_or(0, Vec::len);
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n || n == 0 {
                return Err(Error::Config(format!("cannot infer a square shape for {n} pixels; pass --shape")));
            }
            [1, side, side]
        }
    };
    render_grid(&a, &b, shape, out)
}

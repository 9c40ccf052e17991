//! Runners behind each subcommand. They take a [`RunConfig`], write their
//! artifacts under `cfg.out`, and return what they wrote.

use std::path::{Path, PathBuf};

use crossloc_core::dataset::{Sample, Split};
use crossloc_core::detection::{cluster_anchors, AnchorSet, BBox, NUM_ANCHORS};
use crossloc_core::eval::{iou, EvalReport};
use crossloc_core::model::{pipeline_grad_check, Model, ModelConfig, Prepared, Variant};
use crossloc_core::synth::generate;
use crossloc_core::train::{train_with, EpochSummary, TrainLog};
use serde::{Deserialize, Serialize};

use crate::anchors_file::{read_anchors, write_anchors};
use crate::annotations::load_annotations;
use crate::checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::imageio::{to_rgb8, write_image};
use crate::render::{draw_box, heatmap_image};
use crate::report::{accuracy_cells, format_table, write_json, write_report, write_text, ACCU_HEADERS};
use crate::synthetic::generate_synthetic;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ANCHORS_FILE: &str = "anchors.txt";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Data {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Data {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Validation split when it has samples, otherwise test.
    pub fn selection_split(&self) -> Split {
        if self.val.is_empty() {
            Split::Test
        } else {
            Split::Val
        }
    }
}

/// Reads the annotation file, or renders the synthetic splits in memory
/// with the same indices `gen-data` would write.
pub fn load_data(cfg: &DataConfig) -> Result<Data> {
    let mut data = Data::default();
    if let Some(path) = &cfg.annotations {
        for s in load_annotations(path)? {
            match s.split {
                Split::Train => data.train.push(s),
                Split::Val => data.val.push(s),
                Split::Test => data.test.push(s),
            }
        }
        return Ok(data);
    }
    let sizes = cfg.sizes();
    let render = |start: usize, n: usize, split| {
        let spec = crossloc_core::synth::SyntheticSpec {
            n_samples: n,
            ..cfg.synthetic.clone()
        };
        generate(&spec, start as u64, split)
    };
    data.train = render(0, sizes.train, Split::Train)?;
    data.val = render(sizes.train, sizes.val, Split::Val)?;
    data.test = render(sizes.train + sizes.val, sizes.test, Split::Test)?;
    Ok(data)
}

/// Nine anchors clustered from the box sizes of `samples`.
pub fn fit_anchors(samples: &[Sample], iters: usize, seed: u64) -> Result<AnchorSet> {
    let boxes: Vec<(f64, f64)> = samples.iter().map(|s| (s.gt.w, s.gt.h)).collect();
    Ok(cluster_anchors(&boxes, NUM_ANCHORS, iters, seed)?)
}

/// The anchor file named in the config, or a fresh clustering of `train`.
pub fn resolve_anchors(cfg: &RunConfig, train: &[Sample]) -> Result<AnchorSet> {
    match &cfg.data.anchors {
        Some(path) => read_anchors(path),
        None => fit_anchors(train, cfg.data.anchor_iters, cfg.model.seed),
    }
}

pub fn prepare_all(model: &Model, samples: &[Sample]) -> Result<Vec<Prepared>> {
    Ok(samples.iter().map(|s| model.prepare(s)).collect::<Result<_, _>>()?)
}

/// Builds a model from `model_cfg` and trains it on `train`.
pub fn train_model(
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    anchors: AnchorSet,
    train: &[Sample],
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(model_cfg.clone(), anchors)?;
    let inputs = prepare_all(&model, train)?;
    let log = if cfg.train.epochs == 0 {
        TrainLog::default()
    } else {
        train_with(&mut model, &inputs, &cfg.train, on_epoch)?
    };
    Ok((model, log))
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    Ok(model.evaluate(&prepare_all(model, samples)?)?)
}

/// `epoch,lr,loss` with full-precision floats.
pub fn loss_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for (e, (lr, loss)) in log.lr.iter().zip(&log.epoch_loss).enumerate() {
        out += &format!("{e},{lr},{loss}\n");
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn print_epoch(s: &EpochSummary) {
    eprintln!(
        "epoch {:>3}  lr {:.1e}  loss {:.4}  (conf {:.4}, loc {:.4})",
        s.epoch, s.lr, s.loss, s.conf, s.loc
    );
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub anchors: PathBuf,
    pub loss: PathBuf,
    pub log: TrainLog,
}

/// Trains on the training split and writes `config.json`, `anchors.txt`,
/// `loss.csv` and `model.ckpt`. Zero epochs saves the initial weights.
pub fn run_train(cfg: &RunConfig, verbose: bool) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let anchors = resolve_anchors(cfg, &data.train)?;
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    cfg.write_echo(&dir)?;
    let anchors_path = dir.join(ANCHORS_FILE);
    write_anchors(&anchors_path, &anchors)?;
    let (model, log) = train_model(&cfg.model, cfg, anchors, &data.train, |s| {
        if verbose {
            print_epoch(s)
        }
    })?;
    let loss = dir.join(LOSS_FILE);
    write_text(&loss, &loss_csv(&log))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &model, &cfg.echo())?;
    Ok(TrainArtifacts {
        dir,
        checkpoint: ckpt,
        anchors: anchors_path,
        loss,
        log,
    })
}

/// Evaluates a checkpoint on one split; writes `report.json` and `report.txt`.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<EvalReport> {
    let (model, _) = checkpoint::load(ckpt)?;
    let data = load_data(&cfg.data)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.as_str())));
    }
    let report = evaluate(&model, samples)?;
    create_dir(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    write_report(&report, &cfg.out, "report")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub cell: (usize, usize),
    pub anchor: usize,
    pub gt: BBox,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferArtifacts {
    pub prediction: Prediction,
    pub boxes: PathBuf,
    pub heatmap: PathBuf,
    pub json: PathBuf,
}

/// Predicts one sample and writes `<id>_box.png` (prediction in green,
/// ground truth in blue), `<id>_heatmap.png` and `<id>_prediction.json`.
pub fn run_infer(ckpt: &Path, sample: &Sample, out: &Path) -> Result<InferArtifacts> {
    let (model, _) = checkpoint::load(ckpt)?;
    let inf = model.infer(&model.prepare(sample)?)?;
    let sel = inf.selection;
    let prediction = Prediction {
        id: sample.id.clone(),
        bbox: sel.bbox,
        confidence: sel.confidence,
        cell: sel.cell,
        anchor: sel.anchor,
        gt: sample.gt,
        iou: iou(&sel.bbox, &sample.gt)?,
    };
    let (h, w) = sample.reference_size();
    let mut img = to_rgb8(&sample.reference)?;
    draw_box(&mut img, &sample.gt, [0, 0, 255]);
    draw_box(&mut img, &sel.bbox, [0, 255, 0]);
    let boxes = out.join(format!("{}_box.png", sample.id));
    write_image(&boxes, &img)?;
    let heatmap = out.join(format!("{}_heatmap.png", sample.id));
    write_image(&heatmap, &heatmap_image(&inf.heatmap, h, w))?;
    let json = out.join(format!("{}_prediction.json", sample.id));
    write_json(&json, &prediction)?;
    Ok(InferArtifacts {
        prediction,
        boxes,
        heatmap,
        json,
    })
}

/// Finds `id` in any split.
pub fn find_sample(data: &Data, id: &str) -> Result<Sample> {
    [&data.train, &data.val, &data.test]
        .into_iter()
        .flatten()
        .find(|s| s.id == id)
        .cloned()
        .ok_or_else(|| Error::Config(format!("no sample with id {id:?}")))
}

/// Relative error tolerance of the pipeline gradient check.
pub const PIPELINE_GRAD_TOL: f64 = 1e-3;

/// Finite-difference check of the micro configuration on one rendered
/// sample. Returns the largest relative error over the probed weights.
pub fn run_gradcheck(variant: Variant, seed: u64, per_tensor: usize) -> Result<f64> {
    let cfg = ModelConfig {
        variant,
        seed,
        ..ModelConfig::micro()
    };
    let spec = micro_spec(seed);
    let sample = crossloc_core::synth::render_sample(&spec, 0, Split::Train)?;
    let anchors = AnchorSet::new(vec![
        (2.0, 2.0),
        (3.0, 2.0),
        (2.0, 3.0),
        (3.0, 3.0),
        (4.0, 3.0),
        (3.0, 4.0),
        (4.0, 4.0),
        (5.0, 5.0),
        (6.0, 6.0),
    ])?;
    let model = Model::new(cfg, anchors)?;
    let input = model.prepare(&sample)?;
    Ok(pipeline_grad_check(&model, &input, 1e-5, per_tensor, seed)?)
}

/// 16×16 query and reference scenes for the micro configuration.
pub fn micro_spec(seed: u64) -> crossloc_core::synth::SyntheticSpec {
    crossloc_core::synth::SyntheticSpec {
        n_samples: 1,
        query_size: 16,
        reference_size: 16,
        base_size: (0.3, 0.4),
        distractors: 1,
        scale: (0.8, 1.2),
        clutter: 1,
        border_band: 0.0,
        seed,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub report: EvalReport,
}

/// One full-model training per `k`, evaluated on the selection split.
/// Writes `sweep_k.json` and `sweep_k.txt`.
pub fn run_sweep_k(cfg: &RunConfig, ks: &[usize], verbose: bool) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(Error::Config("no k values to sweep".into()));
    }
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    let anchors = resolve_anchors(cfg, &data.train)?;
    let eval_set = data.split(data.selection_split());
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let model_cfg = ModelConfig { k, ..cfg.model.clone() };
        model_cfg.validate()?;
        if verbose {
            eprintln!("k = {k}");
        }
        let (model, _) = train_model(&model_cfg, cfg, anchors.clone(), &data.train, |s| {
            if verbose {
                print_epoch(s)
            }
        })?;
        rows.push(SweepRow {
            k,
            report: evaluate(&model, eval_set)?,
        });
    }
    create_dir(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    write_json(&cfg.out.join("sweep_k.json"), &rows)?;
    write_text(&cfg.out.join("sweep_k.txt"), &sweep_table(&rows))?;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.k.to_string()];
            row.extend(accuracy_cells(&r.report));
            row
        })
        .collect();
    format_table(&["k", ACCU_HEADERS[0], ACCU_HEADERS[1]], &body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub epoch_loss: Vec<f64>,
}

/// Trains baseline, +CVCAM and +CVCAM+MHSAM with the same seed, data and
/// budget; evaluates each on the test split. Writes `ablation.json` and
/// `ablation.txt`.
pub fn run_ablate(cfg: &RunConfig, verbose: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    if data.test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let anchors = resolve_anchors(cfg, &data.train)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        if verbose {
            eprintln!("{}", variant.label());
        }
        let model_cfg = ModelConfig {
            variant,
            ..cfg.model.clone()
        };
        let (model, log) = train_model(&model_cfg, cfg, anchors.clone(), &data.train, |s| {
            if verbose {
                print_epoch(s)
            }
        })?;
        rows.push(AblationRow {
            variant,
            report: evaluate(&model, &data.test)?,
            epoch_loss: log.epoch_loss,
        });
    }
    create_dir(&cfg.out)?;
    cfg.write_echo(&cfg.out)?;
    write_json(&cfg.out.join("ablation.json"), &rows)?;
    write_text(&cfg.out.join("ablation.txt"), &ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.variant.label().to_owned()];
            row.extend(accuracy_cells(&r.report));
            row
        })
        .collect();
    format_table(&["model", ACCU_HEADERS[0], ACCU_HEADERS[1]], &body)
}

/// Clusters anchors from the training split into `cfg.out/anchors.txt`.
pub fn run_anchors(cfg: &RunConfig) -> Result<(PathBuf, AnchorSet)> {
    let data = load_data(&cfg.data)?;
    let anchors = fit_anchors(&data.train, cfg.data.anchor_iters, cfg.model.seed)?;
    let path = cfg.out.join(ANCHORS_FILE);
    write_anchors(&path, &anchors)?;
    Ok((path, anchors))
}

/// Writes the synthetic splits to `cfg.out`; returns the annotation path.
pub fn run_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let path = generate_synthetic(&cfg.out, &cfg.data.synthetic, cfg.data.sizes())?;
    cfg.write_echo(&cfg.out)?;
    Ok(path)
}

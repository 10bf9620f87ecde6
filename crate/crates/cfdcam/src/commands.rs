//! The pipeline stages behind the subcommands. Each reads what the previous
//! stage wrote under the output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/dataset/manifest.json, labels.csv, cases/<id>/<modality>.{json,bin}
//! <out>/checkpoints/<modality>/manifest.json, weights.safetensors,
//!                               train_log.csv, training.json
//! <out>/saliency/<case>_z<slice>_<modality>_<method>.{bin,json,pgm}, *_overlay.ppm
//! <out>/report.csv, report.md, metrics.csv
//! <out>/ablation_weighting.csv, ablation_scale.csv, ablation.md
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cfdcam_core::data::{derive_label_with, slice_volume, synth_blob_dataset, EvalRecord, Modality};
use cfdcam_core::nn::{reference_network_with, resnet};
use cfdcam_core::train::{train_classifier, GateStatus, TrainingLog};
use cfdcam_core::{Architecture, CamMethod, CamRequest, InputSpec, Network, ScaleSpec, Weighting};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, fingerprint, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{
    self, assign_splits, dataset_dir, load_case_image, load_eval_records, load_training_slices, read_labels_csv,
    write_labels_csv, write_manifest, CaseEntry, DatasetManifest, LabelTable, SplitName,
};
use crate::error::{self, Error, Result};
use crate::eval::{cache_dir, select_records, summarize_triples, Evaluator};
use crate::heatmap::{write_overlay, write_pgm};
use crate::report::{BenchmarkReport, ReportRow};
use crate::saliency_io::{write_saliency, SaliencyMeta};
use crate::volume_io::{case_files, file_role, read_volume_file, write_raw, write_raw_mask, FileRole};

/// The class whose evidence the maps explain.
pub const TUMOR_CLASS: usize = 1;

/// A validated configuration and the directory everything goes to.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

impl Run {
    /// `out` overrides the configured output directory.
    pub fn new(config: RunConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| config.output.clone());
        let cache = config.eval.cache.then(|| cache_dir(&out));
        Self { config, out, cache }
    }

    fn dataset_name(&self) -> String {
        self.config.dataset.display_name()
    }

    fn request(&self, method: CamMethod, weighting: Weighting) -> CamRequest {
        let mut r = CamRequest::new(method, TUMOR_CLASS)
            .with_weighting(weighting)
            .with_batch_size(self.config.eval.batch_size);
        if let Some(layer) = &self.config.eval.layer {
            r = r.with_layers([layer.clone()]);
        }
        r
    }
}

// ---------------------------------------------------------------- ingest

struct SourceCase {
    case_id: String,
    images: BTreeMap<Modality, PathBuf>,
    mask: Option<PathBuf>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn file_case_id(path: &Path) -> Result<String> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = [".nii.gz", ".nii", ".json", ".bin"]
        .iter()
        .find_map(|e| name.strip_suffix(e))
        .unwrap_or(name);
    match stem.rsplit_once('_') {
        Some((case, _)) if !case.is_empty() => Ok(case.to_string()),
        _ => Err(Error::format(path, "file name needs a `<case>_<modality>` form")),
    }
}

fn source_cases(run: &Run) -> Result<Vec<SourceCase>> {
    let d = &run.config.dataset;
    let mut dirs = Vec::new();
    let mut files: BTreeMap<String, SourceCase> = BTreeMap::new();
    if let Some(root) = &d.root {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        dirs.extend(entries);
    }
    for p in &d.volumes {
        if p.is_dir() {
            dirs.push(p.clone());
            continue;
        }
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let case_id = file_case_id(p)?;
        let entry = files.entry(case_id.clone()).or_insert_with(|| SourceCase {
            case_id,
            images: BTreeMap::new(),
            mask: None,
        });
        match file_role(p) {
            Some(FileRole::Image(m)) => {
                if entry.images.insert(m, absolute(p)?).is_some() {
                    return Err(Error::format(p, format!("second {m} volume for case {}", entry.case_id)));
                }
            }
            Some(FileRole::Mask) => entry.mask = Some(absolute(p)?),
            None => return Err(Error::format(p, "cannot tell the modality from the file name")),
        }
    }
    let mut cases: Vec<SourceCase> = files.into_values().collect();
    for dir in dirs {
        let (images, mask) = case_files(&dir)?;
        let case_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(&dir, "case directory has no usable name"))?
            .to_string();
        cases.push(SourceCase {
            case_id,
            images: images
                .into_iter()
                .map(|(m, p)| absolute(&p).map(|p| (m, p)))
                .collect::<Result<_>>()?,
            mask: mask.map(|p| absolute(&p)).transpose()?,
        });
    }
    if cases.is_empty() {
        return Err(Error::Config("the dataset has no cases".into()));
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    for w in cases.windows(2) {
        if w[0].case_id == w[1].case_id {
            return Err(Error::Config(format!("case id {} appears twice", w[0].case_id)));
        }
    }
    Ok(cases)
}

fn ingest_files(run: &Run) -> Result<Vec<CaseEntry>> {
    let cfg = &run.config;
    let table: Option<LabelTable> = cfg.dataset.labels.as_deref().map(read_labels_csv).transpose()?;
    let mut out = Vec::new();
    for case in source_cases(run)? {
        let mut dims = None;
        let mut volumes = BTreeMap::new();
        for &m in &cfg.modalities {
            let p = case.images.get(&m).ok_or_else(|| {
                Error::format(
                    case.images.values().next().map(PathBuf::as_path).unwrap_or(Path::new(&case.case_id)),
                    format!("case {} has no {m} volume", case.case_id),
                )
            })?;
            let v = read_volume_file(p)?.volume;
            let d = [v.depth, v.height, v.width];
            if dims.is_some_and(|prev| prev != d) {
                return Err(Error::format(p, format!("dims {d:?} differ from the case's other volumes")));
            }
            dims = Some(d);
            volumes.insert(m, p.clone());
        }
        let dims = dims.expect("at least one modality");
        let mut labels = BTreeMap::new();
        if let Some(mp) = &case.mask {
            let mask = read_volume_file(mp)?.to_mask()?;
            if [mask.depth, mask.height, mask.width] != dims {
                return Err(Error::format(mp, "mask dims differ from the image volumes"));
            }
            let l: Vec<u8> = (0..dims[0])
                .map(|z| derive_label_with(&mask.slice(z), cfg.slicing.min_pixels))
                .collect();
            for &m in &cfg.modalities {
                labels.insert(m, l.clone());
            }
        } else {
            let table = table.as_ref().ok_or_else(|| {
                Error::Config(format!("case {} has no mask and no labels file is configured", case.case_id))
            })?;
            for &m in &cfg.modalities {
                let l = table.get(&(case.case_id.clone(), m)).ok_or_else(|| {
                    Error::Config(format!("labels file has no rows for {} {m}", case.case_id))
                })?;
                if l.len() != dims[0] {
                    return Err(Error::Config(format!(
                        "labels file has {} slices for {} {m}, the volume has {}",
                        l.len(),
                        case.case_id,
                        dims[0]
                    )));
                }
                labels.insert(m, l.clone());
            }
        }
        out.push(CaseEntry {
            case_id: case.case_id,
            split: SplitName::Train,
            dims,
            volumes,
            mask: case.mask,
            labels,
        });
    }
    Ok(out)
}

fn ingest_synthetic(run: &Run) -> Result<Vec<CaseEntry>> {
    let spec = run.config.dataset.synthetic.as_ref().expect("synthetic source");
    let data = synth_blob_dataset(spec)?;
    let dir = dataset_dir(&run.out);
    let mut out = Vec::with_capacity(data.cases.len());
    for case in data.cases {
        let rel = PathBuf::from("cases").join(&case.case_id);
        let mask = case.mask.as_ref().expect("synthetic cases have masks");
        let mut volumes = BTreeMap::new();
        let mut labels = BTreeMap::new();
        let l: Vec<u8> = (0..mask.depth)
            .map(|z| derive_label_with(&mask.slice(z), run.config.slicing.min_pixels))
            .collect();
        for (m, v) in &case.modalities {
            let file = rel.join(format!("{}.json", m.name()));
            write_raw(&dir.join(&file), v, [1.0; 3])?;
            volumes.insert(*m, file);
            labels.insert(*m, l.clone());
        }
        let mask_file = rel.join("mask.json");
        write_raw_mask(&dir.join(&mask_file), mask)?;
        out.push(CaseEntry {
            case_id: case.case_id,
            split: SplitName::Train,
            dims: [mask.depth, mask.height, mask.width],
            volumes,
            mask: Some(mask_file),
            labels,
        });
    }
    Ok(out)
}

/// Writes the manifest, the labels CSV and (for synthetic data) the volume
/// files. Re-running with the same configuration rewrites identical files.
pub fn cmd_ingest(run: &Run) -> Result<DatasetManifest> {
    let cfg = &run.config;
    let mut cases = if cfg.dataset.synthetic.is_some() {
        ingest_synthetic(run)?
    } else {
        ingest_files(run)?
    };
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let splits = assign_splits(&ids, cfg.split, cfg.seed).map_err(|e| Error::Config(e.to_string()))?;
    for c in &mut cases {
        c.split = splits[&c.case_id];
    }
    let manifest = DatasetManifest {
        name: run.dataset_name(),
        modalities: cfg.modalities.clone(),
        split_ratios: cfg.split,
        split_seed: cfg.seed,
        min_pixels: cfg.slicing.min_pixels,
        total_slices: DatasetManifest::count_slices(&cases, &cfg.modalities),
        cases,
    };
    write_manifest(&run.out, &manifest)?;
    write_labels_csv(&dataset_dir(&run.out).join(dataset::LABELS_FILE), &manifest)?;
    Ok(manifest)
}

fn require_manifest(run: &Run) -> Result<DatasetManifest> {
    let manifest = dataset::read_manifest(&run.out)?;
    for m in &run.config.modalities {
        if !manifest.modalities.contains(m) {
            return Err(Error::Config(format!("modality {m} was not ingested")));
        }
    }
    Ok(manifest)
}

// ----------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub modality: Modality,
    pub test_accuracy: f64,
    pub accuracy_gate: f64,
    pub gate: GateStatus,
    pub untrained: bool,
    pub train_slices: usize,
    pub test_slices: usize,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "training.json";

pub fn render_train_log(log: &TrainingLog) -> String {
    let mut s = String::from("phase,epoch,step,lr,loss,accuracy\n");
    for e in &log.entries {
        let phase = match e.phase {
            cfdcam_core::train::Phase::Pretrain => "pretrain",
            cfdcam_core::train::Phase::Finetune => "finetune",
        };
        let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{phase},{},{},{},{},{acc}\n", e.epoch, e.step, e.lr, e.loss));
    }
    s
}

fn build_network(run: &Run, dims: [usize; 3]) -> Result<Network> {
    let seed = run.config.seed;
    let net = match &run.config.model.architecture {
        Architecture::ReferenceCnn { channels } => {
            reference_network_with(seed, channels, 1, 2, dims[1].max(dims[2])).map(|mut n| {
                n.input = InputSpec {
                    channels: 1,
                    height: dims[1],
                    width: dims[2],
                };
                n
            })
        }
        other => resnet(
            other.clone(),
            InputSpec {
                channels: 1,
                height: dims[1],
                width: dims[2],
            },
            2,
            seed,
        ),
    };
    net.map_err(|e| Error::Config(e.to_string()))
}

/// Trains one classifier per modality. A classifier that finishes below
/// the accuracy gate is saved and reported as a partial failure; a run with
/// zero epochs only warns.
pub fn cmd_train(run: &Run) -> Result<Vec<TrainSummary>> {
    let manifest = require_manifest(run)?;
    let tc = run.config.train_config();
    let untrained = tc.pretrain_epochs == 0 && tc.finetune_epochs == 0;
    let mut out = Vec::new();
    for &modality in &run.config.modalities {
        let train = load_training_slices(&run.out, &manifest, SplitName::Train, modality, &run.config.slicing)?;
        let test = load_training_slices(&run.out, &manifest, SplitName::Test, modality, &run.config.slicing)?;
        let dims = manifest.cases.first().map(|c| c.dims).unwrap_or_default();
        let network = build_network(run, dims)?;
        let fitted = train_classifier(&tc, network, &train, &test)?;
        let dir = checkpoint_dir(&run.out, modality);
        save_checkpoint(&dir, fitted.classifier.network())?;
        error::write(&dir.join(TRAIN_LOG_FILE), render_train_log(&fitted.log).as_bytes())?;
        let summary = TrainSummary {
            modality,
            test_accuracy: fitted.test_accuracy,
            accuracy_gate: tc.accuracy_gate,
            gate: fitted.gate,
            untrained,
            train_slices: train.len(),
            test_slices: test.len(),
        };
        error::write(&dir.join(TRAIN_SUMMARY_FILE), &error::json(&summary))?;
        out.push(summary);
    }
    Ok(out)
}

// --------------------------------------------------------------- explain

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainRequest {
    pub case_id: String,
    pub slice: usize,
    pub method: String,
    pub modality: Option<Modality>,
    pub weighting: Weighting,
}

pub fn parse_method(id: &str) -> Result<CamMethod> {
    CamMethod::from_id(id).ok_or_else(|| {
        let known: Vec<&str> = CamMethod::ALL.iter().map(|m| m.id()).collect();
        Error::Config(format!("unknown method `{id}` (expected one of {})", known.join(", ")))
    })
}

pub fn saliency_stem(out: &Path, case: &str, slice: usize, modality: Modality, method: CamMethod, w: Weighting) -> PathBuf {
    let suffix = match (method, w) {
        (CamMethod::CfdCam, Weighting::Logits) => "_logits",
        _ => "",
    };
    out.join("saliency")
        .join(format!("{case}_z{slice:03}_{}_{}{suffix}", modality.name(), method.id()))
}

/// Computes one map with the configured scales and writes the `.bin`/`.json`
/// pair, a greyscale `.pgm` and an `_overlay.ppm`. Returns the file stem.
pub fn cmd_explain(run: &Run, req: &ExplainRequest) -> Result<PathBuf> {
    let method = parse_method(&req.method)?;
    let modality = req.modality.unwrap_or(run.config.modalities[0]);
    let manifest = require_manifest(run)?;
    let case = manifest
        .cases
        .iter()
        .find(|c| c.case_id == req.case_id)
        .ok_or_else(|| Error::Config(format!("unknown case `{}`", req.case_id)))?;
    if req.slice >= case.dims[0] {
        return Err(Error::Config(format!(
            "slice {} out of range for case {} with {} slices",
            req.slice, case.case_id, case.dims[0]
        )));
    }
    let ckpt = checkpoint_dir(&run.out, modality);
    let handle = load_checkpoint(&ckpt)?;
    let record = load_case_image(&run.out, case, modality)?;
    let labels = case.labels.get(&modality).map(Vec::as_slice);
    let mut slices = slice_volume(&record, modality, labels, &run.config.slicing)?.slices;
    let image = slices.swap_remove(req.slice).image;
    let request = run.request(method, req.weighting);
    let evaluator = Evaluator::new(&handle, fingerprint(&ckpt)?, run.cache.clone());
    let map = evaluator.saliency(&request, &image, &run.config.scales)?;
    let stem = saliency_stem(&run.out, &case.case_id, req.slice, modality, method, req.weighting);
    let meta = SaliencyMeta {
        height: image.height(),
        width: image.width(),
        dtype: "float64".into(),
        order: "row-major".into(),
        method: method.id().into(),
        class: TUMOR_CLASS,
        layers: request.resolved_layers(&handle)?,
        weighting: (method == CamMethod::CfdCam).then(|| req.weighting.id().to_string()),
        scales: run.config.scales.factors.clone(),
        fusion: format!("{:?}", run.config.scales.fusion).to_lowercase(),
        case_id: case.case_id.clone(),
        slice_index: req.slice,
        modality: modality.name().into(),
    };
    write_saliency(&stem, &map, &meta)?;
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    write_pgm(&with(".pgm"), &map)?;
    write_overlay(&with("_overlay.ppm"), &image, &map)?;
    Ok(stem)
}

// ------------------------------------------------------- benchmark/ablate

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ABLATION_WEIGHTING_CSV: &str = "ablation_weighting.csv";
pub const ABLATION_SCALE_CSV: &str = "ablation_scale.csv";
pub const ABLATION_MD: &str = "ablation.md";

struct Variant {
    label: String,
    request: CamRequest,
    scales: ScaleSpec,
}

struct ModalityData {
    modality: Modality,
    handle: cfdcam_core::ClassifierHandle,
    fingerprint: String,
    records: Vec<EvalRecord>,
}

fn modality_data(run: &Run, manifest: &DatasetManifest, modality: Modality) -> Result<ModalityData> {
    let ckpt = checkpoint_dir(&run.out, modality);
    let handle = load_checkpoint(&ckpt)?;
    let fingerprint = fingerprint(&ckpt)?;
    let all = load_eval_records(&run.out, manifest, SplitName::Test, modality, &run.config.slicing)?;
    let records = select_records(all, run.config.eval.positive_only, run.config.eval.max_slices);
    if records.is_empty() {
        return Err(Error::Config(format!("no {modality} test slices to evaluate")));
    }
    Ok(ModalityData {
        modality,
        handle,
        fingerprint,
        records,
    })
}

/// Evaluates every variant for every modality; failed variants become
/// failed rows. Returns the report and per-slice metric lines.
fn evaluate_variants(
    run: &Run,
    title: &str,
    variants: impl Fn(&Run) -> Vec<Variant>,
) -> Result<(BenchmarkReport, String)> {
    let manifest = require_manifest(run)?;
    let mut report = BenchmarkReport::new(title);
    let mut lines = String::from("dataset,modality,method,case_id,slice_index,dice,iou,hd95\n");
    let dataset = run.dataset_name();
    for &modality in &run.config.modalities {
        let data = modality_data(run, &manifest, modality)?;
        let evaluator = Evaluator::new(&data.handle, data.fingerprint.clone(), run.cache.clone());
        for v in variants(run) {
            let triples = evaluator.evaluate(&v.request, &v.scales, run.config.threshold, &data.records);
            let result = triples.and_then(|t| {
                for (r, m) in data.records.iter().zip(&t) {
                    lines.push_str(&format!(
                        "{dataset},{},{},{},{},{},{},{}\n",
                        data.modality.name(),
                        v.label,
                        r.slice.case_id,
                        r.slice.slice_index,
                        m.dice,
                        m.iou,
                        m.hd95
                    ));
                }
                summarize_triples(&t)
            });
            report.push(ReportRow {
                dataset: dataset.clone(),
                modality: modality.name().into(),
                method: v.label,
                result: result.map_err(|e| e.to_string()),
            })?;
        }
    }
    Ok((report, lines))
}

fn partial_if_failed(reports: &[&BenchmarkReport]) -> Result<()> {
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures())
        .map(|r| format!("{} {} {}", r.dataset, r.modality, r.method))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Partial(format!("failed rows: {}", failed.join("; "))))
    }
}

/// Every configured method on the test split with the configured scales.
/// Reports are written before a failed row turns into an error.
pub fn cmd_benchmark(run: &Run) -> Result<BenchmarkReport> {
    let (report, lines) = evaluate_variants(run, "CAM comparison", |run| {
        run.config
            .methods
            .iter()
            .map(|&m| Variant {
                label: m.display_name().into(),
                request: run.request(m, Weighting::Confidence),
                scales: run.config.scales.clone(),
            })
            .collect()
    })?;
    error::write(&run.out.join(REPORT_CSV), report.render_csv()?.as_bytes())?;
    error::write(&run.out.join(REPORT_MD), report.render_markdown()?.as_bytes())?;
    error::write(&run.out.join(METRICS_CSV), lines.as_bytes())?;
    partial_if_failed(&[&report])?;
    Ok(report)
}

/// Table 1: Cfd-CAM with logit vs confidence weighting (configured scales).
/// Table 2: confidence-weighted Cfd-CAM at 1×, at 2× and multi-scale.
pub fn cmd_ablate(run: &Run) -> Result<(BenchmarkReport, BenchmarkReport)> {
    let (weighting, _) = evaluate_variants(run, "Cfd-CAM weighting", |run| {
        [("Logits", Weighting::Logits), ("Confidence", Weighting::Confidence)]
            .into_iter()
            .map(|(label, w)| Variant {
                label: label.into(),
                request: run.request(CamMethod::CfdCam, w),
                scales: run.config.scales.clone(),
            })
            .collect()
    })?;
    let (scale, _) = evaluate_variants(run, "Cfd-CAM scales", |run| {
        let cfd = run.request(CamMethod::CfdCam, Weighting::Confidence);
        vec![
            Variant {
                label: "Single-scale 1x".into(),
                request: cfd.clone(),
                scales: ScaleSpec::single(1.0),
            },
            Variant {
                label: "Single-scale 2x".into(),
                request: cfd.clone(),
                scales: ScaleSpec::single(2.0),
            },
            Variant {
                label: "Multi-scale".into(),
                request: cfd,
                scales: run.config.scales.clone(),
            },
        ]
    })?;
    error::write(&run.out.join(ABLATION_WEIGHTING_CSV), weighting.render_csv()?.as_bytes())?;
    error::write(&run.out.join(ABLATION_SCALE_CSV), scale.render_csv()?.as_bytes())?;
    let md = format!("{}\n{}", weighting.render_markdown()?, scale.render_markdown()?);
    error::write(&run.out.join(ABLATION_MD), md.as_bytes())?;
    partial_if_failed(&[&weighting, &scale])?;
    Ok((weighting, scale))
}

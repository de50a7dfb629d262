//! The calibrate, reconstruct, train and evaluate stages.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pmri_core::calib::{estimate_csm_acs, map_error, AcsWindowSpec};
use pmri_core::complex::SensitivityMaps;
use pmri_core::cplx::Tensor;
use pmri_core::eval::{
    acs_shift_experiment, evaluate_suite, summarize, write_report_csv, write_shift_csv, write_summary_csv,
    write_summary_table, Method, ReconReport, ShiftPair, SummaryRow,
};
use pmri_core::learn::{
    load_params, pipeline_forward, save_params, train, ModelSpec, NetParams, ReconModel, Scale, TrainSample,
};
use pmri_core::recon::{compose_kspace, initial_recon, sense_reconstruct, zero_filled_recon};
use pmri_core::sim::AcquisitionRecord;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Variant, CONFIG_FILE};
use crate::error::{at, CliError, Result};
use crate::export::write_png;
use crate::manifest::{prepare_dir, Manifest};

pub const CALIBRATE: &str = "calibrate";
pub const RECONSTRUCT: &str = "reconstruct";
pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(at(path, File::create(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    at(path, w.flush())
}

fn acs_maps(rec: &AcquisitionRecord, cfg: &RunConfig) -> Result<SensitivityMaps> {
    let spec = AcsWindowSpec {
        apod: cfg.calib.apod,
        ..AcsWindowSpec::from_mask(&rec.mask)
    };
    Ok(estimate_csm_acs(&rec.kspace, &rec.mask, &spec)?)
}

/// ACS calibration of one slice (`maps_est.cplx`) or of every slice
/// (`<id>_maps_est.cplx` plus `map_error.csv`).
pub fn calibrate(dataset: &Path, slice: Option<&str>, out: &Path, force: bool) -> Result<Manifest> {
    let ds = Dataset::open(dataset)?;
    prepare_dir(out, force)?;
    let ids: Vec<String> = match slice {
        Some(id) => vec![ds.slice(id)?.id.clone()],
        None => ds.manifest.slices.iter().map(|s| s.id.clone()).collect(),
    };
    let csv_path = out.join("map_error.csv");
    let mut csv = create(&csv_path)?;
    writeln!(csv, "slice_id,map_error")?;
    for id in &ids {
        let rec = ds.record(id, Variant::Matched)?;
        let maps = acs_maps(&rec, &ds.config)?;
        let name = match slice {
            Some(_) => "maps_est.cplx".to_string(),
            None => format!("{id}_maps_est.cplx"),
        };
        Tensor::from(&maps).save(out.join(name))?;
        let region: Vec<bool> = maps
            .support()
            .iter()
            .zip(ds.maps.support())
            .map(|(a, b)| *a && *b)
            .collect();
        writeln!(csv, "{id},{}", map_error(&maps, &ds.maps, &region))?;
    }
    finish(csv, &csv_path)?;
    let mut m = Manifest::new(CALIBRATE, ds.hash());
    m.upstream.insert("dataset".into(), ds.hash().into());
    m.settings.insert("apod".into(), format!("{:?}", ds.config.calib.apod).to_lowercase());
    if let Some(id) = slice {
        m.settings.insert("slice".into(), id.into());
    }
    m.seal(out)
}

/// A trained model directory.
pub struct TrainedModel {
    pub config: RunConfig,
    pub manifest: Manifest,
    pub model: ReconModel,
    pub params: NetParams,
}

impl TrainedModel {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load_stage(dir, TRAIN)?;
        manifest.verify(dir)?;
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        if config.hash() != manifest.config_hash {
            return Err(CliError::Mismatch(format!(
                "{} does not match its manifest",
                dir.join(CONFIG_FILE).display()
            )));
        }
        let path = dir.join("model.json");
        let spec: ModelSpec = serde_json::from_str(&at(&path, fs::read_to_string(&path))?)
            .map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
        if spec != config.model_spec() {
            return Err(CliError::Mismatch("model.json disagrees with the training config".into()));
        }
        let model = ReconModel::new(spec);
        let params = load_params(model.spec(), model.param_len(), dir.join("params.bin"))?;
        Ok(Self {
            config,
            manifest,
            model,
            params,
        })
    }

    /// Fails unless this model was trained on `ds`.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        self.manifest.expect_upstream("dataset", ds.hash())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMethod {
    Zf,
    Sense,
    Dc,
    Learned,
}

#[derive(Clone, Debug)]
pub struct ReconOptions {
    pub method: ReconMethod,
    pub slice: String,
    pub lambda: f64,
    pub reg: Option<f64>,
    pub maps: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub shifted: bool,
}

pub fn reconstruct(dataset: &Path, opts: &ReconOptions, out: &Path, force: bool) -> Result<Manifest> {
    let ds = Dataset::open(dataset)?;
    let variant = if opts.shifted { Variant::Shifted } else { Variant::Matched };
    let rec = ds.record(&opts.slice, variant)?;
    let maps = || -> Result<SensitivityMaps> {
        match &opts.maps {
            Some(p) => Ok(SensitivityMaps::from_stack(Tensor::load(p)?.into_stack()?)?),
            None => acs_maps(&rec, &ds.config),
        }
    };
    let mut m = Manifest::new(RECONSTRUCT, ds.hash());
    m.upstream.insert("dataset".into(), ds.hash().into());
    let reg = opts.reg.unwrap_or(ds.config.eval.sense_reg);
    let tensor = match opts.method {
        ReconMethod::Zf => Tensor::from(&zero_filled_recon(&rec.kspace, None)?),
        ReconMethod::Sense => {
            let (img, report) = sense_reconstruct(&rec.kspace, &maps()?, &rec.mask, reg)?;
            if report.ill_conditioned() {
                log::warn!("SENSE system ill-conditioned (max condition {:.3e})", report.max_condition);
            }
            m.settings.insert("reg".into(), reg.to_string());
            Tensor::from(&img)
        }
        ReconMethod::Dc => {
            if !opts.lambda.is_finite() || opts.lambda < 0.0 {
                return Err(CliError::Config(format!("lambda {} must be finite and non-negative", opts.lambda)));
            }
            let maps = maps()?;
            let k_plus = compose_kspace(&rec.kspace, &rec.mask, &maps, opts.lambda, None, ds.config.model.combine)?;
            m.settings.insert("lambda".into(), opts.lambda.to_string());
            Tensor::from(&initial_recon(&k_plus, &maps)?)
        }
        ReconMethod::Learned => {
            let dir = opts.model.as_deref().ok_or(pmri_core::Error::MissingParams)?;
            let tm = TrainedModel::open(dir)?;
            tm.check_dataset(&ds)?;
            m.upstream.insert("train".into(), tm.manifest.config_hash.clone());
            let (img, _) = pipeline_forward(&tm.model, &tm.params, &rec.kspace, &rec.mask)?;
            Tensor::from(&img)
        }
    };
    prepare_dir(out, force)?;
    m.settings.insert("method".into(), format!("{:?}", opts.method).to_lowercase());
    m.settings.insert("slice".into(), opts.slice.clone());
    m.settings.insert("mask".into(), if opts.shifted { "shifted" } else { "matched" }.into());
    tensor.save(out.join("recon.cplx"))?;
    let mag = Tensor::load(out.join("recon.cplx"))?.into_image()?.magnitude();
    write_png(&mag, &out.join("recon.png"), false)?;
    m.seal(out)
}

/// Command-line overrides of the training section.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.scale {
            cfg.model.scale = v;
            cfg.model.csm_channels = None;
            cfg.model.denoiser_channels = None;
        }
    }
}

/// Trains on every non-held-out slice and writes `params.bin`,
/// `model.json`, `loss_log.csv` and `checkpoints/epoch_NNN.bin`.
pub fn train_model(dataset: &Path, overrides: &TrainOverrides, out: &Path, force: bool) -> Result<Manifest> {
    let ds = Dataset::open(dataset)?;
    let mut cfg = ds.config.clone();
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let records = ds.records(false, Variant::Matched)?;
    prepare_dir(out, force)?;
    let spec = cfg.model_spec();
    let model = ReconModel::new(spec.clone());
    log::info!(
        "training {} parameters on {} slices for {} epochs",
        model.param_len(),
        records.len(),
        cfg.train.epochs
    );
    let samples: Vec<TrainSample> = records.iter().map(TrainSample::from).collect();
    let ckpt = out.join("checkpoints");
    at(&ckpt, fs::create_dir_all(&ckpt))?;
    let mut on_checkpoint = |epoch: usize, p: &NetParams| -> pmri_core::Result<()> {
        save_params(p, &spec, ckpt.join(format!("epoch_{epoch:03}.bin")))
    };
    let outcome = match train(&model, &samples, model.init(cfg.train.seed), &cfg.train, &mut on_checkpoint) {
        Ok(o) => o,
        Err(pmri_core::Error::Divergence { epoch, last_good }) => {
            save_params(&last_good, &spec, out.join("params_last_good.bin"))?;
            return Err(pmri_core::Error::Divergence { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_params(&outcome.params, &spec, out.join("params.bin"))?;
    at(out, fs::write(out.join("model.json"), serde_json::to_string_pretty(&spec).expect("spec") + "\n"))?;
    at(out, fs::write(out.join(CONFIG_FILE), cfg.to_toml()))?;
    let log_path = out.join("loss_log.csv");
    let mut w = create(&log_path)?;
    writeln!(w, "epoch,L_img,L_ksp,total,lambda")?;
    for e in &outcome.log {
        writeln!(w, "{},{},{},{},{}", e.epoch, e.img, e.ksp, e.total, e.lambda)?;
    }
    finish(w, &log_path)?;
    let mut m = Manifest::new(TRAIN, &cfg.hash());
    m.upstream.insert("dataset".into(), ds.hash().into());
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("dataset".into(), cfg.dataset.seed);
    m.settings.insert("params".into(), model.param_len().to_string());
    m.settings.insert("spec_hash".into(), format!("{:016x}", spec.hash()));
    m.settings.insert("trend_ok".into(), outcome.trend_ok.to_string());
    m.seal(out)
}

/// Everything the evaluate stage computed.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reports: Vec<ReconReport>,
    pub summary: Vec<SummaryRow>,
    pub shift: Vec<ShiftSeed>,
}

/// Mask-shift pairs for one phantom seed.
#[derive(Clone, Debug)]
pub struct ShiftSeed {
    pub seed: u64,
    pub pairs: Vec<ShiftPair>,
}

impl ShiftSeed {
    pub fn psnr_means(&self) -> (f64, f64) {
        let n = self.pairs.len() as f64;
        let m = self.pairs.iter().map(|p| p.psnr_matched).sum::<f64>() / n;
        let s = self.pairs.iter().map(|p| p.psnr_shifted).sum::<f64>() / n;
        (m, s)
    }

    pub fn ssim_means(&self) -> (f64, f64) {
        let n = self.pairs.len() as f64;
        let m = self.pairs.iter().map(|p| p.ssim_matched).sum::<f64>() / n;
        let s = self.pairs.iter().map(|p| p.ssim_shifted).sum::<f64>() / n;
        (m, s)
    }
}

impl Evaluation {
    pub fn row(&self, method: Method, kind: pmri_core::eval::InputKind) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.input_kind == kind)
    }
}

fn tagged(mut recs: Vec<AcquisitionRecord>, tag: &str) -> Vec<AcquisitionRecord> {
    for r in &mut recs {
        r.slice_id = format!("{tag}{}", r.slice_id);
    }
    recs
}

/// Scores every configured method on the held-out slices under both masks
/// and, with a model, runs the mask-shift experiment over all seeds.
pub fn evaluate(
    dataset: &Path,
    model_dir: Option<&Path>,
    methods: Option<&[Method]>,
    out: &Path,
    force: bool,
) -> Result<(Manifest, Evaluation)> {
    let ds = Dataset::open(dataset)?;
    let tm = model_dir.map(TrainedModel::open).transpose()?;
    if let Some(tm) = &tm {
        tm.check_dataset(&ds)?;
    }
    let cfg = tm.as_ref().map_or(&ds.config, |t| &t.config);
    let methods = methods.unwrap_or(&cfg.eval.methods).to_vec();
    if methods.contains(&Method::Learned) && tm.is_none() {
        return Err(pmri_core::Error::MissingParams.into());
    }
    let opts = cfg.eval_options();
    let matched = ds.records(true, Variant::Matched)?;
    let shifted = ds.records(true, Variant::Shifted)?;
    let model = tm.as_ref().map(|t| (&t.model, &t.params));
    log::info!("evaluating {} held-out slices with {:?}", matched.len(), methods);
    let reports = evaluate_suite(&matched, Some(&shifted), &methods, model, &opts)?;
    let summary = summarize(&reports);

    let mut shift = Vec::new();
    if let Some(tm) = &tm {
        let main = ds.config.dataset.seed;
        let tag = format!("seed{main}/");
        let pairs = acs_shift_experiment(
            &tagged(matched, &tag),
            &tagged(shifted, &tag),
            &tm.model,
            &tm.params,
            &opts,
        )?;
        shift.push(ShiftSeed { seed: main, pairs });
        for &seed in &ds.config.shift.seeds {
            let a = ds.shift_records(seed, Variant::Matched)?;
            let b = ds.shift_records(seed, Variant::Shifted)?;
            let pairs = acs_shift_experiment(&a, &b, &tm.model, &tm.params, &opts)?;
            shift.push(ShiftSeed { seed, pairs });
        }
    }

    prepare_dir(out, force)?;
    let path = out.join("report.csv");
    let mut w = create(&path)?;
    write_report_csv(&reports, &mut w)?;
    finish(w, &path)?;
    let path = out.join("summary.csv");
    let mut w = create(&path)?;
    write_summary_csv(&summary, &mut w)?;
    finish(w, &path)?;
    let path = out.join("summary.md");
    let mut w = create(&path)?;
    write_summary_table(&summary, &mut w)?;
    finish(w, &path)?;
    if !shift.is_empty() {
        let path = out.join("acs_shift.csv");
        let mut w = create(&path)?;
        let all: Vec<ShiftPair> = shift.iter().flat_map(|s| s.pairs.iter().cloned()).collect();
        write_shift_csv(&all, &mut w)?;
        finish(w, &path)?;
        let path = out.join("acs_shift_summary.csv");
        let mut w = create(&path)?;
        writeln!(
            w,
            "seed,count,psnr_matched_mean,psnr_shifted_mean,psnr_gap,ssim_matched_mean,ssim_shifted_mean"
        )?;
        for s in &shift {
            let (pm, ps) = s.psnr_means();
            let (sm, ss) = s.ssim_means();
            writeln!(w, "{},{},{pm},{ps},{},{sm},{ss}", s.seed, s.pairs.len(), pm - ps)?;
        }
        finish(w, &path)?;
    }

    let mut m = Manifest::new(EVALUATE, &cfg.hash());
    m.upstream.insert("dataset".into(), ds.hash().into());
    if let Some(tm) = &tm {
        m.upstream.insert("train".into(), tm.manifest.config_hash.clone());
    }
    m.settings.insert(
        "methods".into(),
        methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
    );
    m.settings.insert("sense_reg".into(), opts.sense_reg.to_string());
    m.settings.insert("timing".into(), opts.timing.to_string());
    let m = m.seal(out)?;
    Ok((m, Evaluation { reports, summary, shift }))
}

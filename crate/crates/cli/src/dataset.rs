//! On-disk simulated datasets.
//!
//! ```text
//! config.toml  manifest.json  mask.cplx  mask_shifted.cplx  maps_true.cplx
//! slices/<id>_truth.cplx  slices/<id>_kspace.cplx
//! slices/<id>_kspace_shifted.cplx            (held-out slices only)
//! shift/seed<s>/<id>_{truth,kspace,kspace_shifted}.cplx
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use pmri_core::cplx::{load_mask, Tensor};
use pmri_core::sim::{AcquisitionRecord, DatasetSpec, SliceKey};
use pmri_core::complex::{SamplingMask, SensitivityMaps};

use crate::config::RunConfig;
use crate::error::{at, CliError, Result};
use crate::manifest::{prepare_dir, Manifest, SliceEntry};

pub const STAGE: &str = "simulate";
pub const CONFIG_FILE: &str = "config.toml";

/// Which acquisition of a slice to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Matched,
    Shifted,
}

impl Variant {
    fn suffix(self) -> &'static str {
        match self {
            Variant::Matched => "kspace",
            Variant::Shifted => "kspace_shifted",
        }
    }
}

fn save(t: impl Into<Tensor>, path: &Path) -> Result<()> {
    t.into().save(path)?;
    Ok(())
}

fn is_holdout(cfg: &RunConfig, key: &SliceKey) -> bool {
    cfg.split.test_groups.contains(&key.group)
}

/// Held-out slices re-simulated with dataset seed `seed`.
fn holdout_spec(cfg: &RunConfig, seed: u64) -> (DatasetSpec, Vec<SliceKey>) {
    let spec = DatasetSpec {
        seed,
        ..cfg.dataset.clone()
    };
    let keys = spec.keys().into_iter().filter(|k| is_holdout(cfg, k)).collect();
    (spec, keys)
}

/// Writes the dataset described by `cfg` into `dir`.
pub fn simulate(cfg: &RunConfig, dir: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    prepare_dir(dir, force)?;
    let d = &cfg.dataset;
    let maps = d.maps()?;
    let mask = d.mask()?;
    let shifted = cfg.shifted_dataset().mask()?;
    at(dir, fs::write(dir.join(CONFIG_FILE), cfg.to_toml()))?;
    save(&mask, &dir.join("mask.cplx"))?;
    save(&shifted, &dir.join("mask_shifted.cplx"))?;
    save(&maps, &dir.join("maps_true.cplx"))?;

    let slices = dir.join("slices");
    at(&slices, fs::create_dir_all(&slices))?;
    let mut manifest = Manifest::new(STAGE, &cfg.hash());
    for key in d.keys() {
        let holdout = is_holdout(cfg, &key);
        let rec = d.simulate_slice(&key, &maps, &mask)?;
        let id = key.id();
        save(&rec.truth, &slices.join(format!("{id}_truth.cplx")))?;
        save(&rec.kspace, &slices.join(format!("{id}_kspace.cplx")))?;
        if holdout {
            let rec = d.simulate_slice(&key, &maps, &shifted)?;
            save(&rec.kspace, &slices.join(format!("{id}_kspace_shifted.cplx")))?;
        }
        manifest.slices.push(SliceEntry {
            id,
            group: key.group,
            holdout,
        });
    }
    for &seed in &cfg.shift.seeds {
        let sub = shift_dir(dir, seed);
        at(&sub, fs::create_dir_all(&sub))?;
        let (spec, keys) = holdout_spec(cfg, seed);
        for key in keys {
            let id = key.id();
            let rec = spec.simulate_slice(&key, &maps, &mask)?;
            save(&rec.truth, &sub.join(format!("{id}_truth.cplx")))?;
            save(&rec.kspace, &sub.join(format!("{id}_kspace.cplx")))?;
            let rec = spec.simulate_slice(&key, &maps, &shifted)?;
            save(&rec.kspace, &sub.join(format!("{id}_kspace_shifted.cplx")))?;
        }
    }
    manifest.seeds.insert("dataset".into(), d.seed);
    manifest.seeds.insert("coil".into(), d.coil.seed);
    for (k, v) in [
        ("accel", d.accel.to_string()),
        ("acs", d.acs.to_string()),
        ("acs_shifted", cfg.shift.acs.to_string()),
        ("shift_seeds", format!("{:?}", cfg.shift.seeds)),
        ("shape", format!("{}x{}x{}", d.coil.coils, d.height, d.width)),
    ] {
        manifest.settings.insert(k.into(), v);
    }
    manifest.seal(dir)
}

fn shift_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join("shift").join(format!("seed{seed}"))
}

/// A verified dataset directory.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
    pub maps: SensitivityMaps,
    pub mask: SamplingMask,
    pub mask_shifted: SamplingMask,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load_stage(dir, STAGE)?;
        manifest.verify(dir)?;
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        if config.hash() != manifest.config_hash {
            return Err(CliError::Mismatch(format!(
                "{} does not match the config its manifest records",
                dir.join(CONFIG_FILE).display()
            )));
        }
        let d = &config.dataset;
        let maps = SensitivityMaps::from_stack(Tensor::load(dir.join("maps_true.cplx"))?.into_stack()?)?;
        let mask = load_mask(dir.join("mask.cplx"), d.accel, d.acs, d.acs)?;
        let s = config.shift.acs;
        let mask_shifted = load_mask(dir.join("mask_shifted.cplx"), d.accel, s, s)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            maps,
            mask,
            mask_shifted,
        })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn slice(&self, id: &str) -> Result<&SliceEntry> {
        self.manifest
            .slices
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Config(format!("dataset has no slice {id}")))
    }

    fn load_record(
        &self,
        spec: &DatasetSpec,
        dir: &Path,
        entry: &SliceEntry,
        variant: Variant,
        tag: &str,
    ) -> Result<AcquisitionRecord> {
        let id = &entry.id;
        let truth = Tensor::load(dir.join(format!("{id}_truth.cplx")))?.into_image()?;
        let kspace = Tensor::load(dir.join(format!("{id}_{}.cplx", variant.suffix())))?.into_stack()?;
        let mask = match variant {
            Variant::Matched => self.mask.clone(),
            Variant::Shifted => self.mask_shifted.clone(),
        };
        let key = spec
            .keys()
            .into_iter()
            .find(|k| &k.id() == id)
            .ok_or_else(|| CliError::Mismatch(format!("slice {id} is not part of the configured layout")))?;
        Ok(AcquisitionRecord {
            kspace,
            mask,
            truth,
            maps_true: self.maps.clone(),
            noise: spec.noise_spec(&key),
            slice_id: format!("{tag}{id}"),
            group_id: entry.group,
        })
    }

    /// One slice of the main dataset.
    pub fn record(&self, id: &str, variant: Variant) -> Result<AcquisitionRecord> {
        let entry = self.slice(id)?;
        if variant == Variant::Shifted && !entry.holdout {
            return Err(CliError::Config(format!("slice {id} has no shifted acquisition")));
        }
        self.load_record(&self.config.dataset, &self.dir.join("slices"), entry, variant, "")
    }

    pub fn records(&self, holdout: bool, variant: Variant) -> Result<Vec<AcquisitionRecord>> {
        self.manifest
            .slices
            .iter()
            .filter(|s| s.holdout == holdout)
            .map(|s| self.record(&s.id, variant))
            .collect()
    }

    /// Held-out slices of one extra shift seed, ids prefixed `seed<s>/`.
    pub fn shift_records(&self, seed: u64, variant: Variant) -> Result<Vec<AcquisitionRecord>> {
        let dir = shift_dir(&self.dir, seed);
        let tag = format!("seed{seed}/");
        let (spec, _) = holdout_spec(&self.config, seed);
        self.manifest
            .slices
            .iter()
            .filter(|s| s.holdout)
            .map(|s| self.load_record(&spec, &dir, s, variant, &tag))
            .collect()
    }
}

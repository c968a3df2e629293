use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

use odp_core::formats::encode_dataset;
use odp_core::image_io::encode_pgm;
use odp_core::synthgen::{gen_feature_split, gen_image_corpora, FeatureDatasetConfig, ImageCorpusConfig, Split};

use crate::manifest::Run;
use crate::{SplitArg, SynthCommand};

pub const TRAIN_FILE: &str = "train.odpd";
pub const TEST_FILE: &str = "test.odpd";
pub const SUBSPACES_FILE: &str = "subspaces.json";

/// Reads a JSON config; unknown fields are rejected by the config types.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn image_file_name(i: usize) -> String {
    format!("img_{i:04}.pgm")
}

pub fn run(cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Images {
            config,
            overlap,
            seed,
            n_images,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => read_config(p)?,
                None => ImageCorpusConfig::stripe_spot(overlap.unwrap_or(0.0)),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_images {
                cfg.n_images = n;
            }
            cfg.validate()?;
            let mut run = Run::start("synth images", &out, cfg.seed, &cfg)?;
            if let Some(p) = &config {
                run.input(p)?;
            }
            for (name, images) in gen_image_corpora(&cfg)? {
                for (i, img) in images.iter().enumerate() {
                    let bytes = encode_pgm(img.width(), img.height(), img.values());
                    run.write(&format!("{name}/{}", image_file_name(i)), &bytes)?;
                }
            }
            run.finish()?;
        }
        SynthCommand::Features {
            config,
            seed,
            n_samples,
            split,
            out,
        } => {
            let mut cfg: FeatureDatasetConfig = match &config {
                Some(p) => read_config(p)?,
                None => FeatureDatasetConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_samples {
                cfg.n_samples = n;
            }
            cfg.validate()?;
            let mut run = Run::start("synth features", &out, cfg.seed, &cfg)?;
            if let Some(p) = &config {
                run.input(p)?;
            }
            let mut truth = None;
            for (s, file) in [(Split::Train, TRAIN_FILE), (Split::Test, TEST_FILE)] {
                let wanted = match split {
                    SplitArg::Both => true,
                    SplitArg::Train => s == Split::Train,
                    SplitArg::Test => s == Split::Test,
                };
                if wanted {
                    let (ds, t) = gen_feature_split(&cfg, s)?;
                    run.write(file, &encode_dataset(&ds)?)?;
                    truth = Some(t);
                }
            }
            if let Some(t) = truth {
                run.write_json(SUBSPACES_FILE, &t)?;
            }
            run.finish()?;
        }
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use odp_core::formats::{decode_spectrum, encode_spectrum};
use odp_core::grid_spectra::{
    additivity_report, additivity_scatter, artifact_map, average_spectrum_with, AdditivityReport,
    SpectrumMap,
};
use odp_core::image_io::{encode_pgm_normalized, load_dir};

use crate::manifest::Run;
use crate::{ImageOpts, SpectraCommand};

pub const SPECTRUM_FILE: &str = "spectrum.odps";
pub const SPECTRUM_PGM: &str = "spectrum.pgm";
pub const ARTIFACT_FILE: &str = "artifact.odps";
pub const ARTIFACT_PGM: &str = "artifact.pgm";
pub const ADDITIVITY_CSV: &str = "additivity.csv";
pub const ADDITIVITY_JSON: &str = "additivity.json";
pub const AVERAGE_ROW: &str = "average";

#[derive(Serialize)]
struct ImageConfig<'a> {
    #[serde(flatten)]
    paths: serde_json::Value,
    side: usize,
    avg_mode: &'a odp_core::grid_spectra::AvgMode,
}

fn image_config<'a>(paths: serde_json::Value, opts: &'a ImageOpts) -> ImageConfig<'a> {
    ImageConfig {
        paths,
        side: opts.side,
        avg_mode: &opts.avg_mode,
    }
}

fn dir_spectrum(dir: &Path, opts: &ImageOpts) -> Result<SpectrumMap> {
    let images = load_dir(dir, opts.side).with_context(|| format!("loading images from {}", dir.display()))?;
    average_spectrum_with(&images, opts.avg_mode)
        .with_context(|| format!("averaging spectra of {}", dir.display()))
}

/// An ODPS file is read as-is; a directory is loaded as an image corpus.
fn spectrum_source(path: &Path, opts: &ImageOpts) -> Result<SpectrumMap> {
    if path.is_dir() {
        dir_spectrum(path, opts)
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        decode_spectrum(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}

fn write_map(run: &mut Run, name: &str, pgm: &str, map: &SpectrumMap) -> Result<()> {
    run.write(name, &encode_spectrum(map))?;
    run.write(pgm, &encode_pgm_normalized(map.width(), map.height(), map.values()))?;
    Ok(())
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn pair_report(
    real: &SpectrumMap,
    a: &SpectrumMap,
    b: &SpectrumMap,
    name: &str,
) -> Result<(AdditivityReport, Vec<(f64, f64)>)> {
    let report = additivity_report(real, a, b, name).with_context(|| format!("pair {name}"))?;
    let (p_sum, d_ab) = additivity_scatter(real, a, b)?;
    Ok((report, p_sum.into_iter().zip(d_ab).collect()))
}

fn scatter_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("p_sum,d_ab\n");
    for (x, y) in points {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

fn reports_csv(reports: &[AdditivityReport]) -> String {
    let mut s = format!("{}\n", AdditivityReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Generator directories under `root`: every subdirectory except `real`, sorted.
pub fn generator_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "real"));
    dirs.sort();
    Ok(dirs)
}

pub fn run(cmd: SpectraCommand) -> Result<()> {
    match cmd {
        SpectraCommand::Compute { input, out, image } => {
            let cfg = image_config(serde_json::json!({ "input": input }), &image);
            let mut run = Run::start("spectra compute", &out, 0, &cfg)?;
            run.input(&input)?;
            let map = dir_spectrum(&input, &image)?;
            write_map(&mut run, SPECTRUM_FILE, SPECTRUM_PGM, &map)?;
            run.finish()?;
        }
        SpectraCommand::Diff { a, b, out, image } => {
            let cfg = image_config(serde_json::json!({ "a": a, "b": b }), &image);
            let mut run = Run::start("spectra diff", &out, 0, &cfg)?;
            run.input(&a)?;
            run.input(&b)?;
            let s_a = spectrum_source(&a, &image)?;
            let s_b = spectrum_source(&b, &image)?;
            let d = artifact_map(&s_a, &s_b)?;
            let map = SpectrumMap::from_values(d.width(), d.height(), d.values().to_vec())?;
            write_map(&mut run, ARTIFACT_FILE, ARTIFACT_PGM, &map)?;
            run.finish()?;
        }
        SpectraCommand::Additivity {
            real,
            gen_a,
            gen_b,
            root,
            out,
            scatter,
            image,
        } => {
            let cfg = image_config(
                serde_json::json!({
                    "real": real, "gen_a": gen_a, "gen_b": gen_b, "root": root, "scatter": scatter
                }),
                &image,
            );
            let mut run = Run::start("spectra additivity", &out, 0, &cfg)?;
            let mut reports = Vec::new();
            let mut scatters = Vec::new();
            if let Some(root) = root {
                let real_dir = root.join("real");
                run.input(&real_dir)?;
                let s_real = dir_spectrum(&real_dir, &image)?;
                let gens = generator_dirs(&root)?;
                let mut spectra = Vec::with_capacity(gens.len());
                for g in &gens {
                    run.input(g)?;
                    spectra.push((dir_name(g), dir_spectrum(g, &image)?));
                }
                for i in 0..spectra.len() {
                    for j in i + 1..spectra.len() {
                        let name = format!("{}+{}", spectra[i].0, spectra[j].0);
                        let (r, s) = pair_report(&s_real, &spectra[i].1, &spectra[j].1, &name)?;
                        reports.push(r);
                        scatters.push((name, s));
                    }
                }
                if reports.is_empty() {
                    anyhow::bail!(odp_core::Error::InvalidInput(format!(
                        "{} needs at least two generator directories besides real/",
                        root.display()
                    )));
                }
                let avg = AdditivityReport::average(&reports, AVERAGE_ROW)?;
                reports.push(avg);
            } else {
                let (real, gen_a, gen_b) = (real.unwrap(), gen_a.unwrap(), gen_b.unwrap());
                for p in [&real, &gen_a, &gen_b] {
                    run.input(p)?;
                }
                let s_real = dir_spectrum(&real, &image)?;
                let s_a = dir_spectrum(&gen_a, &image)?;
                let s_b = dir_spectrum(&gen_b, &image)?;
                let name = format!("{}+{}", dir_name(&gen_a), dir_name(&gen_b));
                let (r, s) = pair_report(&s_real, &s_a, &s_b, &name)?;
                reports.push(r);
                scatters.push((name, s));
            }
            run.write(ADDITIVITY_CSV, reports_csv(&reports).as_bytes())?;
            run.write_json(ADDITIVITY_JSON, &reports)?;
            if scatter {
                for (name, pts) in &scatters {
                    run.write(&format!("scatter_{name}.csv"), scatter_csv(pts).as_bytes())?;
                }
            }
            run.finish()?;
        }
    }
    Ok(())
}

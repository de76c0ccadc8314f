//! End-to-end run: data, fit, error bounds, abstraction, verification.
//!
//! Each stage is also exposed on its own so the command-line front end can
//! resume from persisted artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{build_imc, Imc};
use crate::config::PipelineConfig;
use crate::errbound::{error_table_with_solve, ErrorTable};
use crate::error::{Error, Result};
use crate::export::{export_heatmap, Which};
use crate::gp::{fit_with_solve, BtgpModel, Dataset, PosteriorSolve};
use crate::io::write_json;
use crate::systems::simulate;
use crate::verify::{certify, interval_iteration, Certificate, ValueBounds};

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.join("data.csv")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn errors(&self) -> PathBuf {
        self.dir.join("errors.json")
    }

    pub fn imc(&self) -> PathBuf {
        self.dir.join("imc")
    }

    pub fn bounds(&self) -> PathBuf {
        self.dir.join("bounds.json")
    }

    pub fn results(&self) -> PathBuf {
        self.dir.join("results.txt")
    }

    pub fn certificate(&self) -> PathBuf {
        self.dir.join("certificate.json")
    }

    pub fn heatmap(&self, which: Which) -> PathBuf {
        self.dir.join(match which {
            Which::VMin => "v_min.csv",
            Which::VMax => "v_max.csv",
        })
    }

    pub fn timings(&self) -> PathBuf {
        self.dir.join("timings.json")
    }
}

/// Wall-clock seconds per stage, artifact writes excluded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub data: f64,
    pub fit: f64,
    pub bound: f64,
    pub abstraction: f64,
    pub verify: f64,
    pub io: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub certificate: Certificate<f64>,
    pub bounds: ValueBounds<f64>,
    pub times: StageTimes,
    pub occupied_cells: usize,
    pub transitions: usize,
    /// Set when the error table used a subsampled estimate.
    pub heuristic: bool,
}

fn timed<R>(slot: &mut f64, f: impl FnOnce() -> R) -> R {
    let t = Instant::now();
    let r = f();
    *slot += t.elapsed().as_secs_f64();
    r
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Dataset<f64>> {
    let r = match (&cfg.data.dataset, cfg.system()?) {
        (Some(path), _) => {
            let noise = cfg.data.noise_std.ok_or_else(|| Error::invalid("data.noise_std is required"))?;
            Dataset::read_csv(path, noise)
        }
        (None, Some(system)) => simulate(&system, cfg.data.samples, cfg.data.seed, &cfg.domain_box()?),
        (None, None) => Err(Error::invalid("set either data.system or data.dataset")),
    };
    let data = r.map_err(|e| e.in_stage("data"))?;
    if data.dim() != cfg.dim() {
        return Err(Error::invalid(format!("dataset is {}-D, domain is {}-D", data.dim(), cfg.dim())).in_stage("data"));
    }
    Ok(data)
}

pub fn fit_stage(cfg: &PipelineConfig, data: &Dataset<f64>) -> Result<(BtgpModel<f64>, PosteriorSolve<f64>)> {
    let kernel = cfg.kernel().map_err(|e| e.in_stage("fit"))?;
    fit_with_solve(data, &kernel).map_err(|e| e.in_stage("fit"))
}

pub fn bound_stage(
    cfg: &PipelineConfig,
    data: &Dataset<f64>,
    model: &BtgpModel<f64>,
    solve: &PosteriorSolve<f64>,
) -> Result<ErrorTable<f64>> {
    let ec = cfg.error_config().map_err(|e| e.in_stage("bound"))?;
    error_table_with_solve(data, model, solve, &ec).map_err(|e| e.in_stage("bound"))
}

pub fn abstract_stage(cfg: &PipelineConfig, model: &BtgpModel<f64>, errors: &ErrorTable<f64>) -> Result<Imc<f64>> {
    let run = || {
        let targets = model.scheme().project_set(&cfg.target_box()?)?;
        if targets.is_empty() {
            log::warn!("no cell lies inside the target box at precision {}", cfg.model.precision);
        }
        build_imc(model, errors, &targets, &cfg.verify.x_init, &cfg.imc_options())
    };
    run().map_err(|e| e.in_stage("abstract"))
}

pub fn verify_stage(cfg: &PipelineConfig, imc: &Imc<f64>) -> Result<(ValueBounds<f64>, Certificate<f64>)> {
    let run = || {
        let bounds = interval_iteration(imc, &cfg.iteration_options())?;
        let cert = certify(imc, &cfg.scheme()?, &cfg.verify.x_init, &bounds)?;
        Ok((bounds, cert))
    };
    run().map_err(|e: Error| e.in_stage("verify"))
}

/// Writes the verification outputs: bounds, per-cell results, certificate
/// and both heatmaps.
pub fn write_verification(cfg: &PipelineConfig, art: &Artifacts, bounds: &ValueBounds<f64>, cert: &Certificate<f64>) -> Result<()> {
    let run = || {
        let scheme = cfg.scheme()?;
        bounds.write_json(&art.bounds())?;
        bounds.write_results(&art.results())?;
        cert.write_json(&art.certificate())?;
        if scheme.dim() <= 2 {
            export_heatmap(bounds, &scheme, Which::VMin, &art.heatmap(Which::VMin))?;
            export_heatmap(bounds, &scheme, Which::VMax, &art.heatmap(Which::VMax))?;
        }
        Ok(())
    };
    run().map_err(|e: Error| e.in_stage("write"))
}

/// Runs every stage and writes all artifacts under `cfg.output.dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.output.dir);
    let mut t = StageTimes::default();
    let io = |e: Error| e.in_stage("write");

    let data = timed(&mut t.data, || load_data(cfg))?;
    timed(&mut t.io, || data.write_csv(&art.data())).map_err(io)?;

    let (model, solve) = timed(&mut t.fit, || fit_stage(cfg, &data))?;
    log::info!("fit: {:.2} s, {} occupied cells", t.fit, model.aggregation().len());
    timed(&mut t.io, || model.write_json(&art.model())).map_err(io)?;

    let errors = timed(&mut t.bound, || bound_stage(cfg, &data, &model, &solve))?;
    log::info!("error bounds: {:.2} s", t.bound);
    timed(&mut t.io, || errors.write_json(&art.errors())).map_err(io)?;
    drop(solve);

    let imc = timed(&mut t.abstraction, || abstract_stage(cfg, &model, &errors))?;
    log::info!("abstraction: {:.2} s, {} transitions", t.abstraction, imc.nnz());
    if cfg.output.write_imc {
        timed(&mut t.io, || imc.write_dir(&art.imc())).map_err(io)?;
    }

    let (bounds, cert) = timed(&mut t.verify, || verify_stage(cfg, &imc))?;
    log::info!("verification: {:.2} s", t.verify);
    timed(&mut t.io, || write_verification(cfg, &art, &bounds, &cert))?;
    write_json(&art.timings(), &t).map_err(io)?;

    Ok(PipelineReport {
        certificate: cert,
        bounds,
        times: t,
        occupied_cells: model.aggregation().len(),
        transitions: imc.nnz(),
        heuristic: errors.heuristic,
    })
}

/// The dataset of a staged run: `data.csv` in the run directory if present,
/// otherwise whatever the config names.
pub fn staged_data(cfg: &PipelineConfig, art: &Artifacts) -> Result<Dataset<f64>> {
    if !art.data().exists() {
        return load_data(cfg);
    }
    let noise = match (cfg.data.noise_std, cfg.system()?) {
        (Some(v), _) => v,
        (None, Some(s)) => s.noise_std,
        (None, None) => return Err(Error::invalid("data.noise_std is required").in_stage("data")),
    };
    Dataset::read_csv(&art.data(), noise).map_err(|e| e.in_stage("data"))
}

/// Error radii for a persisted model; the posterior factor is rebuilt from
/// the stored aggregation.
pub fn bound_from_model(cfg: &PipelineConfig, data: &Dataset<f64>, model: &BtgpModel<f64>) -> Result<ErrorTable<f64>> {
    if model.scheme() != &cfg.scheme()? {
        return Err(Error::InconsistentScheme("model.json was fitted with a different partition".into()).in_stage("bound"));
    }
    let solve = PosteriorSolve::new(model.aggregation(), model.kernel(), model.noise_std()).map_err(|e| e.in_stage("bound"))?;
    bound_stage(cfg, data, model, &solve)
}

/// Verifies a persisted chain without refitting.
pub fn verify_from_dir(cfg: &PipelineConfig, imc_dir: &Path) -> Result<(ValueBounds<f64>, Certificate<f64>)> {
    let imc = Imc::read_dir(imc_dir).map_err(|e| e.in_stage("verify"))?;
    verify_stage(cfg, &imc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE: &str = include_str!("../examples/casestudy.cfg");

    fn small(dir: &Path) -> PipelineConfig {
        PipelineConfig::parse(
            CASE,
            &[
                ("model.precision".into(), "4".into()),
                ("data.samples".into(), "300".into()),
                // No 5-wide cell fits inside the default target at this precision.
                ("verify.target_lower".into(), "[-5.0, -5.0]".into()),
                ("verify.target_upper".into(), "[5.0, 5.0]".into()),
                ("output.dir".into(), format!("\"{}\"", dir.display())),
            ],
        )
        .unwrap()
    }

    #[test]
    fn smoke_run_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let t = Instant::now();
        let report = run_pipeline(&cfg).unwrap();
        assert!(t.elapsed().as_secs_f64() < 5.0);
        assert!(report.bounds.converged);
        let art = Artifacts::new(dir.path());
        for p in [art.data(), art.model(), art.errors(), art.bounds(), art.results(), art.certificate(), art.heatmap(Which::VMin)] {
            assert!(p.exists(), "{}", p.display());
        }

        let (bounds, cert) = verify_from_dir(&cfg, &art.imc()).unwrap();
        assert_eq!(cert, report.certificate);
        assert_eq!(bounds, report.bounds);

        // Every artifact reloads to the in-memory value.
        let data = Dataset::read_csv(&art.data(), 3.16).unwrap();
        assert_eq!(data, load_data(&cfg).unwrap());
        let (model, solve) = fit_stage(&cfg, &data).unwrap();
        // The per-sample assignment is not persisted.
        let back = BtgpModel::<f64>::read_json(&art.model()).unwrap();
        assert_eq!(serde_json::to_value(&back).unwrap(), serde_json::to_value(&model).unwrap());
        let errors = bound_stage(&cfg, &data, &model, &solve).unwrap();
        assert_eq!(ErrorTable::read_json(&art.errors()).unwrap(), errors);
        assert_eq!(Certificate::read_json(&art.certificate()).unwrap(), report.certificate);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.data.system = None;
        cfg.data.dataset = Some(dir.path().join("missing.csv"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("stage `data` failed"), "{err}");
    }
}

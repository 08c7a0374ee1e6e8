//! On-disk model bundle: a directory of flat CSV tables and TOML metadata,
//! described by `manifest.toml`. Floats are written in shortest round-trip
//! form so a reloaded model predicts bit-for-bit like the original.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cox::{BaselineTerm, CoxFit, DesignLayout, PenaltySpec};
use crate::data::{BaselineColumn, Dataset, Schema, SubjectId};
use crate::lmm::{Convergence, LmmError, LmmFit, LmmSpec, RandomEffectSummary, TTableRow, TermLayout};
use crate::pipeline::{PipelineConfig, PrcModel};
use crate::stepfn::StepFunction;

pub const BUNDLE_FORMAT: &str = "dynpred-model";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("invalid {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("unsupported bundle format `{format}` version {version}")]
    Unsupported { format: String, version: u32 },
    #[error(transparent)]
    Lmm(#[from] LmmError),
}

/// Column layout of the training data, enough to read new data and rebuild
/// design rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTemplate {
    pub schema: Schema,
    pub covariate_names: Vec<String>,
    pub regressor_names: Vec<String>,
    pub baseline_columns: Vec<BaselineColumn>,
    pub landmark: Option<f64>,
}

impl DatasetTemplate {
    pub fn from_dataset(d: &Dataset) -> Self {
        Self {
            schema: d.schema.clone(),
            covariate_names: d.covariate_names.clone(),
            regressor_names: d.regressor_names.clone(),
            baseline_columns: d.baseline_columns.clone(),
            landmark: d.landmark,
        }
    }

    /// A dataset with this layout and no rows.
    pub fn empty_dataset(&self) -> Dataset {
        Dataset {
            survival: vec![],
            longitudinal: vec![],
            baseline_columns: self.baseline_columns.clone(),
            covariate_names: self.covariate_names.clone(),
            regressor_names: self.regressor_names.clone(),
            schema: self.schema.clone(),
            landmark: self.landmark,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub schema: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            files: vec![],
        }
    }
}

/// Hex SHA-256 of `text`.
pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CoxMeta {
    lambda_star: f64,
    alpha_star: f64,
    landmark: Option<f64>,
    penalty: PenaltySpec,
    baseline_terms: Vec<BaselineTerm>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: PipelineConfig,
    template: DatasetTemplate,
    cox: CoxMeta,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> BundleError + '_ {
    move |source| BundleError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, message: impl Into<String>) -> BundleError {
    BundleError::Invalid {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub(crate) fn f(v: f64) -> String {
    format!("{v}")
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), BundleError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>, BundleError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let h = r.headers().map_err(csv_err(path))?.clone();
    if h.iter().collect::<Vec<_>>() != header {
        return Err(invalid(path, format!("expected header {}", header.join(","))));
    }
    r.records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(csv_err(path)))
        .collect()
}

fn num(path: &Path, s: &str) -> Result<f64, BundleError> {
    s.parse::<f64>()
        .map_err(|_| invalid(path, format!("`{s}` is not a number")))
}

fn flag(path: &Path, s: &str) -> Result<bool, BundleError> {
    s.parse::<bool>()
        .map_err(|_| invalid(path, format!("`{s}` is not true/false")))
}

fn count(path: &Path, s: &str) -> Result<usize, BundleError> {
    s.parse::<usize>()
        .map_err(|_| invalid(path, format!("`{s}` is not a count")))
}

pub const LMM_SUMMARY_HEADER: [&str; 7] = ["covariate", "term", "estimate", "SE", "df", "t", "p"];
pub const COEF_HEADER: [&str; 3] = ["term", "estimate", "scaled_estimate"];
pub const HAZARD_HEADER: [&str; 2] = ["time", "cumhaz"];

/// Rows of the mixed-model coefficient table.
pub fn lmm_summary_rows(fits: &[LmmFit]) -> Vec<Vec<String>> {
    fits.iter()
        .flat_map(|fit| {
            fit.t_table.iter().map(move |r| {
                vec![
                    fit.spec.response.clone(),
                    r.term.clone(),
                    f(r.estimate),
                    f(r.std_error),
                    f(r.df),
                    f(r.t_value),
                    f(r.p_value),
                ]
            })
        })
        .collect()
}

pub fn coefficient_rows(cox: &CoxFit) -> Vec<Vec<String>> {
    cox.layout
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| vec![name.clone(), f(cox.coefficients[j]), f(cox.scaled_coefficients[j])])
        .collect()
}

pub fn hazard_rows(h: &StepFunction) -> Vec<Vec<String>> {
    h.knots()
        .iter()
        .zip(h.values())
        .map(|(t, v)| vec![f(*t), f(*v)])
        .collect()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), BundleError> {
    write_table(path, header, rows)
}

/// Writes `model` into `dir` (created if needed) and returns the manifest.
pub fn save_bundle(
    dir: &Path,
    model: &PrcModel,
    template: &DatasetTemplate,
    mut manifest: Manifest,
) -> Result<Manifest, BundleError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    let mut add = |name: &str, schema: &str| {
        files.push(FileEntry {
            name: name.into(),
            schema: format!("{schema}/v{BUNDLE_VERSION}"),
        })
    };

    let meta = ModelMeta {
        config: model.config.clone(),
        template: template.clone(),
        cox: CoxMeta {
            lambda_star: model.cox.lambda_star,
            alpha_star: model.cox.alpha_star,
            landmark: model.cox.landmark,
            penalty: model.cox.penalty.clone(),
            baseline_terms: model.cox.layout.baseline_terms.clone(),
        },
    };
    let p = dir.join("model.toml");
    let text = toml::to_string(&meta).map_err(|e| invalid(&p, e.to_string()))?;
    fs::write(&p, text).map_err(io_err(&p))?;
    add("model.toml", "model-meta");

    write_table(&dir.join("lmm_fixed.csv"), &LMM_SUMMARY_HEADER, &lmm_summary_rows(&model.lmm_fits))?;
    add("lmm_fixed.csv", "lmm-fixed");

    let fit_rows: Vec<Vec<String>> = model
        .lmm_fits
        .iter()
        .map(|m| {
            let c = &m.convergence;
            vec![
                m.spec.response.clone(),
                f(m.sigma2),
                f(m.loglik),
                m.n_obs.to_string(),
                m.n_subjects.to_string(),
                c.iterations.to_string(),
                f(c.gradient_norm),
                c.converged.to_string(),
                c.boundary.to_string(),
                c.degenerate.to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("lmm_fits.csv"), &LMM_FITS_HEADER, &fit_rows)?;
    add("lmm_fits.csv", "lmm-fits");

    let mut cov_rows = Vec::new();
    for m in &model.lmm_fits {
        for i in 0..m.d.nrows() {
            for j in 0..m.d.ncols() {
                cov_rows.push(vec![m.spec.response.clone(), i.to_string(), j.to_string(), f(m.d[(i, j)])]);
            }
        }
    }
    write_table(&dir.join("lmm_covariance.csv"), &["covariate", "row", "col", "value"], &cov_rows)?;
    add("lmm_covariance.csv", "lmm-covariance");

    write_table(&dir.join("coefficients.csv"), &COEF_HEADER, &coefficient_rows(&model.cox))?;
    add("coefficients.csv", "cox-coefficients");

    let l = &model.cox.layout;
    let scaling: Vec<Vec<String>> = (0..l.n_columns())
        .map(|j| {
            vec![
                l.columns[j].clone(),
                f(l.center[j]),
                f(l.scale[j]),
                l.standardized[j].to_string(),
                l.constant[j].to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("scaling.csv"), &SCALING_HEADER, &scaling)?;
    add("scaling.csv", "design-scaling");

    write_table(&dir.join("baseline_hazard.csv"), &HAZARD_HEADER, &hazard_rows(&model.cox.baseline_hazard))?;
    add("baseline_hazard.csv", "baseline-hazard");

    let path_rows: Vec<Vec<String>> = model
        .cox
        .lambda_path
        .iter()
        .zip(&model.cox.cv_curve)
        .map(|(l, c)| vec![f(*l), f(*c)])
        .collect();
    write_table(&dir.join("cv_curve.csv"), &["lambda", "cv_deviance"], &path_rows)?;
    add("cv_curve.csv", "cv-curve");

    let mut header = vec!["id".to_string()];
    header.extend(model.ranefs.columns.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let ranef_rows: Vec<Vec<String>> = (0..model.ranefs.values.nrows())
        .map(|i| {
            let mut r = vec![model.ranefs.subject_ids[i].0.clone()];
            r.extend(model.ranefs.values.row(i).iter().map(|v| f(*v)));
            r
        })
        .collect();
    write_table(&dir.join("ranefs.csv"), &header_refs, &ranef_rows)?;
    add("ranefs.csv", "random-effects");

    manifest.files = files;
    let p = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| invalid(&p, e.to_string()))?;
    fs::write(&p, text).map_err(io_err(&p))?;
    Ok(manifest)
}

const LMM_FITS_HEADER: [&str; 10] = [
    "covariate",
    "sigma2",
    "loglik",
    "n_obs",
    "n_subjects",
    "iterations",
    "gradient_norm",
    "converged",
    "boundary",
    "degenerate",
];
const SCALING_HEADER: [&str; 5] = ["term", "center", "scale", "standardized", "constant"];

/// Reads a bundle written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<(PrcModel, DatasetTemplate, Manifest), BundleError> {
    let p = dir.join("manifest.toml");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| invalid(&p, e.to_string()))?;
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        return Err(BundleError::Unsupported {
            format: manifest.format,
            version: manifest.version,
        });
    }
    let p = dir.join("model.toml");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let meta: ModelMeta = toml::from_str(&text).map_err(|e| invalid(&p, e.to_string()))?;
    let template_ds = meta.template.empty_dataset();
    let cfg = &meta.config;

    let p = dir.join("lmm_fits.csv");
    let fit_rows = read_table(&p, &LMM_FITS_HEADER)?;
    let p_fixed = dir.join("lmm_fixed.csv");
    let fixed_rows = read_table(&p_fixed, &LMM_SUMMARY_HEADER)?;
    let p_cov = dir.join("lmm_covariance.csv");
    let cov_rows = read_table(&p_cov, &["covariate", "row", "col", "value"])?;
    let mut lmm_fits = Vec::new();
    for r in &fit_rows {
        let name = &r[0];
        let spec = LmmSpec {
            response: name.clone(),
            fixed_terms: cfg.fixed_terms.clone(),
            random_terms: cfg.random_terms.clone(),
        };
        let layout = TermLayout::resolve(&spec, &template_ds)?;
        let q = layout.random.len();
        let mut t_table = Vec::new();
        for fr in fixed_rows.iter().filter(|fr| &fr[0] == name) {
            t_table.push(TTableRow {
                term: fr[1].clone(),
                estimate: num(&p_fixed, &fr[2])?,
                std_error: num(&p_fixed, &fr[3])?,
                df: num(&p_fixed, &fr[4])?,
                t_value: num(&p_fixed, &fr[5])?,
                p_value: num(&p_fixed, &fr[6])?,
            });
        }
        if t_table.len() != layout.fixed.len() {
            return Err(invalid(&p_fixed, format!("wrong number of fixed effects for `{name}`")));
        }
        let mut d = DMatrix::zeros(q, q);
        let mut seen = 0;
        for cr in cov_rows.iter().filter(|cr| &cr[0] == name) {
            let (i, j) = (count(&p_cov, &cr[1])?, count(&p_cov, &cr[2])?);
            if i >= q || j >= q {
                return Err(invalid(&p_cov, format!("index out of range for `{name}`")));
            }
            d[(i, j)] = num(&p_cov, &cr[3])?;
            seen += 1;
        }
        if seen != q * q {
            return Err(invalid(&p_cov, format!("incomplete covariance for `{name}`")));
        }
        lmm_fits.push(LmmFit {
            fixed_names: t_table.iter().map(|t| t.term.clone()).collect(),
            beta: t_table.iter().map(|t| t.estimate).collect(),
            spec,
            layout,
            d,
            sigma2: num(&p, &r[1])?,
            loglik: num(&p, &r[2])?,
            n_obs: count(&p, &r[3])?,
            n_subjects: count(&p, &r[4])?,
            convergence: Convergence {
                iterations: count(&p, &r[5])?,
                gradient_norm: num(&p, &r[6])?,
                converged: flag(&p, &r[7])?,
                boundary: flag(&p, &r[8])?,
                degenerate: flag(&p, &r[9])?,
            },
            t_table,
        });
    }

    let p = dir.join("coefficients.csv");
    let coef = read_table(&p, &COEF_HEADER)?;
    let p_s = dir.join("scaling.csv");
    let scaling = read_table(&p_s, &SCALING_HEADER)?;
    if scaling.len() != coef.len() {
        return Err(invalid(&p_s, "row count differs from coefficients.csv"));
    }
    let layout = DesignLayout {
        columns: coef.iter().map(|r| r[0].clone()).collect(),
        baseline_columns: meta.template.baseline_columns.clone(),
        baseline_terms: meta.cox.baseline_terms.clone(),
        center: scaling.iter().map(|r| num(&p_s, &r[1])).collect::<Result<_, _>>()?,
        scale: scaling.iter().map(|r| num(&p_s, &r[2])).collect::<Result<_, _>>()?,
        standardized: scaling.iter().map(|r| flag(&p_s, &r[3])).collect::<Result<_, _>>()?,
        constant: scaling.iter().map(|r| flag(&p_s, &r[4])).collect::<Result<_, _>>()?,
    };
    let p_h = dir.join("baseline_hazard.csv");
    let hz = read_table(&p_h, &HAZARD_HEADER)?;
    let knots: Vec<f64> = hz.iter().map(|r| num(&p_h, &r[0])).collect::<Result<_, _>>()?;
    if !knots.windows(2).all(|w| w[0] < w[1]) {
        return Err(invalid(&p_h, "times must be strictly increasing"));
    }
    let baseline_hazard = StepFunction::new(
        knots,
        hz.iter().map(|r| num(&p_h, &r[1])).collect::<Result<_, _>>()?,
        0.0,
    );
    let p_cv = dir.join("cv_curve.csv");
    let cv = read_table(&p_cv, &["lambda", "cv_deviance"])?;
    let cox = CoxFit {
        layout,
        coefficients: coef.iter().map(|r| num(&p, &r[1])).collect::<Result<_, _>>()?,
        scaled_coefficients: coef.iter().map(|r| num(&p, &r[2])).collect::<Result<_, _>>()?,
        lambda_star: meta.cox.lambda_star,
        alpha_star: meta.cox.alpha_star,
        lambda_path: cv.iter().map(|r| num(&p_cv, &r[0])).collect::<Result<_, _>>()?,
        cv_curve: cv.iter().map(|r| num(&p_cv, &r[1])).collect::<Result<_, _>>()?,
        baseline_hazard,
        penalty: meta.cox.penalty,
        landmark: meta.cox.landmark,
    };

    let p = dir.join("ranefs.csv");
    let mut rdr = csv::Reader::from_path(&p).map_err(csv_err(&p))?;
    let header = rdr.headers().map_err(csv_err(&p))?.clone();
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(&p))?;
        ids.push(SubjectId(rec.get(0).unwrap_or("").to_string()));
        for v in rec.iter().skip(1) {
            vals.push(num(&p, v)?);
        }
    }
    let ranefs = RandomEffectSummary {
        values: DMatrix::from_row_slice(ids.len(), columns.len(), &vals),
        subject_ids: ids,
        columns,
    };
    Ok((
        PrcModel {
            lmm_fits,
            ranefs,
            cox,
            config: meta.config,
        },
        meta.template,
        manifest,
    ))
}

//! Experiment orchestration: a JSON spec in, a report plus artifacts out.
//!
//! One experiment fixes a synthetic morphable model, a calibrated
//! white-box embedder, a set of calibrated black-box embedders, a corpus
//! of attacker/victim identity pairs, and a list of attack methods. Every
//! (pair, method) job runs independently — pair-level parallelism with a
//! fixed job order — and produces a per-pair record plus artifact files
//! (loss trace CSV, composite PPM, patch OBJ for the mesh attacks). The
//! report aggregates success rates per method and model, curvature
//! summaries per mesh method, calibration data, and an environment stamp.
//!
//! Failures are isolated per job: a failed pair carries its error message
//! in the record and drops out of the aggregates; it never aborts the
//! batch. Given equal seeds, reruns reproduce every number in the report
//! (job outputs are deterministic and reductions run in fixed order).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attack::{
    at3d_m, at3d_ml, at3d_p, eot_2d, init_coefficients, mim_2d, Attack2dConfig, AttackConfig,
    AttackMode, EotEstimator, RegWeights, TransformDistribution,
};
use crate::mesh::{extract_patch, Mesh, PatchRegion, PatchTopology};
use crate::morphable::{
    generate_synthetic_model, sample_identity, Coefficients, MorphableModel, FACE_SCALE,
};
use crate::recognition::{
    build_toy_model, calibrate_threshold, verify, ArchId, EmbeddingModel, VerificationThreshold,
};
use crate::render::{rasterize, render_face, save_ppm, RenderParams};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

/// Stream tag for calibration identity draws ("CALIBRAT").
const STREAM_CALIBRATION: u64 = 0x4341_4c49_4252_4154;
/// Stream tag for calibration view jitter ("CALJITTR").
const STREAM_CAL_JITTER: u64 = 0x4341_4c4a_4954_5452;
/// Stream tag folded with method/pair indices into per-job attack seeds
/// ("ATTACKSD").
const STREAM_JOB: u64 = 0x4154_5441_434b_5344;

/// Morphable-model source: generated on the fly from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphableSpec {
    pub seed: u64,
    pub resolution: usize,
}

/// One embedding model: architecture plus weight seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchId,
    pub seed: u64,
}

impl ModelSpec {
    fn label(&self, role: &str) -> String {
        format!("{role}_{:?}{}", self.arch, self.seed)
    }
}

/// One attacker/victim identity pair, both drawn from the morphable prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub attacker_seed: u64,
    pub victim_seed: u64,
}

/// Attack method plus its hyperparameters. The experiment's region and
/// render settings override the embedded config's at run time so geometry
/// is specified exactly once per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MethodSpec {
    At3dP { config: AttackConfig },
    At3dM { config: AttackConfig },
    At3dMl { config: AttackConfig, weights: RegWeights },
    Mim2d { config: Attack2dConfig },
    Eot2d { config: Attack2dConfig, distribution: TransformDistribution, samples: usize },
}

impl MethodSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            MethodSpec::At3dP { .. } => "at3d_p",
            MethodSpec::At3dM { .. } => "at3d_m",
            MethodSpec::At3dMl { .. } => "at3d_ml",
            MethodSpec::Mim2d { .. } => "mim_2d",
            MethodSpec::Eot2d { .. } => "eot_2d",
        }
    }

    fn mode(&self) -> AttackMode {
        match self {
            MethodSpec::At3dP { config }
            | MethodSpec::At3dM { config }
            | MethodSpec::At3dMl { config, .. } => config.mode,
            MethodSpec::Mim2d { config } | MethodSpec::Eot2d { config, .. } => config.mode,
        }
    }

    fn produces_mesh(&self) -> bool {
        matches!(
            self,
            MethodSpec::At3dP { .. } | MethodSpec::At3dM { .. } | MethodSpec::At3dMl { .. }
        )
    }
}

/// A method entry in the spec: the method plus an optional unique label
/// (defaults to the method name) naming its table rows and artifact
/// directory. Labels let one experiment run the same method twice with
/// different hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub method: MethodSpec,
}

impl MethodEntry {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.kind_name().to_string())
    }
}

fn default_calibration_pairs() -> usize {
    64
}

/// Full experiment description; serializes to/from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub morphable: MorphableSpec,
    pub pairs: Vec<PairSpec>,
    pub white_box: ModelSpec,
    pub black_box: Vec<ModelSpec>,
    pub methods: Vec<MethodEntry>,
    pub region: PatchRegion,
    pub render: RenderParams,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Same-identity and different-identity pair count for threshold
    /// calibration (each).
    #[serde(default = "default_calibration_pairs")]
    pub calibration_pairs: usize,
    /// Ball radii for the curvature summary; empty means 1, 2, and 4 grid
    /// spacings of the morphable mesh.
    #[serde(default)]
    pub curvature_radii: Vec<f64>,
    /// Worker threads for the job pool; 0 means all available cores.
    #[serde(default)]
    pub threads: usize,
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Grid spacing of the morphable mesh, the natural curvature length
    /// unit.
    pub fn grid_spacing(&self) -> f64 {
        FACE_SCALE / (self.morphable.resolution.saturating_sub(1).max(1)) as f64
    }

    pub fn effective_radii(&self) -> Vec<f64> {
        if self.curvature_radii.is_empty() {
            let s = self.grid_spacing();
            vec![s, 2.0 * s, 4.0 * s]
        } else {
            self.curvature_radii.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::validation(path, msg));
        if self.morphable.resolution < 8 {
            return fail("morphable.resolution", "must be at least 8".into());
        }
        if self.pairs.is_empty() {
            return fail("pairs", "experiment needs at least one attacker/victim pair".into());
        }
        for (k, p) in self.pairs.iter().enumerate() {
            if p.attacker_seed == p.victim_seed {
                return fail(
                    &format!("pairs[{k}]"),
                    "attacker and victim identity seeds must differ".into(),
                );
            }
        }
        let mut model_ids = vec![(self.white_box.arch, self.white_box.seed)];
        for (j, m) in self.black_box.iter().enumerate() {
            if model_ids.contains(&(m.arch, m.seed)) {
                return fail(
                    &format!("black_box[{j}]"),
                    "duplicate (arch, seed): this model already participates".into(),
                );
            }
            model_ids.push((m.arch, m.seed));
        }
        if self.methods.is_empty() {
            return fail("methods", "experiment needs at least one method".into());
        }
        let mut labels = Vec::new();
        for (i, entry) in self.methods.iter().enumerate() {
            let path = format!("methods[{i}]");
            let label = entry.label();
            if label.is_empty()
                || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return fail(
                    &format!("{path}.label"),
                    format!("label '{label}' must be nonempty [A-Za-z0-9_-]"),
                );
            }
            if labels.contains(&label) {
                return fail(&format!("{path}.label"), format!("duplicate label '{label}'"));
            }
            labels.push(label);
            match &entry.method {
                MethodSpec::At3dP { config }
                | MethodSpec::At3dM { config }
                | MethodSpec::At3dMl { config, .. } => {
                    if config.iterations == 0 {
                        return fail(&format!("{path}.config.iterations"), "must be >= 1".into());
                    }
                    if !(config.budget > 0.0) {
                        return fail(&format!("{path}.config.budget"), "must be > 0".into());
                    }
                    if let MethodSpec::At3dMl { weights, .. } = &entry.method {
                        for (name, v) in [
                            ("chamfer", weights.chamfer),
                            ("laplacian", weights.laplacian),
                            ("edge_length", weights.edge_length),
                        ] {
                            if !v.is_finite() || v < 0.0 {
                                return fail(
                                    &format!("{path}.weights.{name}"),
                                    "must be finite and >= 0".into(),
                                );
                            }
                        }
                    }
                }
                MethodSpec::Mim2d { config } => {
                    if config.iterations == 0 {
                        return fail(&format!("{path}.config.iterations"), "must be >= 1".into());
                    }
                    config.validate().map_err(|e| {
                        Error::validation(format!("{path}.config"), e.to_string())
                    })?;
                }
                MethodSpec::Eot2d { config, samples, .. } => {
                    if config.iterations == 0 {
                        return fail(&format!("{path}.config.iterations"), "must be >= 1".into());
                    }
                    if *samples == 0 {
                        return fail(&format!("{path}.samples"), "must be >= 1".into());
                    }
                    config.validate().map_err(|e| {
                        Error::validation(format!("{path}.config"), e.to_string())
                    })?;
                }
            }
        }
        self.render
            .validate()
            .map_err(|e| Error::validation("render", e.to_string()))?;
        if self.calibration_pairs < crate::recognition::MIN_CALIBRATION_PAIRS {
            return fail(
                "calibration_pairs",
                format!("must be >= {}", crate::recognition::MIN_CALIBRATION_PAIRS),
            );
        }
        for (i, r) in self.curvature_radii.iter().enumerate() {
            if !r.is_finite() || *r <= 0.0 {
                return fail(&format!("curvature_radii[{i}]"), "must be finite and > 0".into());
            }
        }
        Ok(())
    }
}

/// Build and host stamp embedded in every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentStamp {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub workers: usize,
}

/// Calibrated decision threshold for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub model: String,
    pub threshold: VerificationThreshold,
}

/// One (method, model) cell of the success table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub model: String,
    pub successes: usize,
    pub evaluated: usize,
    /// Success percentage in [0, 100].
    pub rate: f64,
}

/// Success-rate row for one method across all models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSuccess {
    pub method: String,
    pub entries: Vec<RateEntry>,
}

/// Mean curvature measure per radius, original vs adversarial patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurvature {
    pub method: String,
    pub radii: Vec<f64>,
    pub original_mean: Vec<f64>,
    pub adversarial_mean: Vec<f64>,
    pub pairs_evaluated: usize,
}

/// Everything recorded about one (method, pair) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub method: String,
    pub pair_index: usize,
    pub attacker_seed: u64,
    pub victim_seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_similarity: Option<f64>,
    /// Verification outcome per model label.
    pub success: BTreeMap<String, bool>,
    /// Mean curvature measure of the original patch per radius (mesh
    /// methods only).
    pub curvature_original: Vec<f64>,
    /// Same for the attacked patch.
    pub curvature_adversarial: Vec<f64>,
    /// Artifact paths relative to the report's directory.
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
    /// Failure message when the job did not complete; such records drop
    /// out of every aggregate.
    pub error: Option<String>,
}

/// Aggregated experiment outcome; serialized as report.json next to the
/// per-pair artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub environment: EnvironmentStamp,
    pub calibration: Vec<CalibrationEntry>,
    pub success_table: Vec<MethodSuccess>,
    pub curvature_summary: Vec<MethodCurvature>,
    pub records: Vec<PairRecord>,
    pub elapsed_secs: f64,
}

impl ExperimentReport {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentReport> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copy with timing fields zeroed, for run-to-run comparisons.
    pub fn timing_normalized(&self) -> ExperimentReport {
        let mut r = self.clone();
        r.elapsed_secs = 0.0;
        for rec in &mut r.records {
            rec.wall_time_secs = 0.0;
        }
        r
    }
}

/// Success table derived from the records alone: for each method row, a
/// completed pair counts toward every model column. Used both to build
/// the report and to audit one.
pub fn recompute_success_table(
    method_labels: &[String],
    model_labels: &[String],
    records: &[PairRecord],
) -> Vec<MethodSuccess> {
    method_labels
        .iter()
        .map(|method| {
            let completed: Vec<&PairRecord> = records
                .iter()
                .filter(|r| &r.method == method && r.error.is_none())
                .collect();
            let entries = model_labels
                .iter()
                .map(|model| {
                    let successes =
                        completed.iter().filter(|r| r.success.get(model) == Some(&true)).count();
                    let evaluated = completed.len();
                    let rate = if evaluated == 0 {
                        0.0
                    } else {
                        100.0 * successes as f64 / evaluated as f64
                    };
                    RateEntry { model: model.clone(), successes, evaluated, rate }
                })
                .collect();
            MethodSuccess { method: method.clone(), entries }
        })
        .collect()
}

/// Renders the calibration corpus and calibrates every model's threshold.
/// Same-identity pairs compare a base view against a jittered view (small
/// pose shift plus brightness scale); different-identity pairs compare
/// neighboring identities at the base view.
fn calibrate_models(
    spec: &ExperimentSpec,
    morphable: &MorphableModel,
    models: &[(String, &EmbeddingModel)],
) -> Result<Vec<CalibrationEntry>> {
    let p = spec.calibration_pairs;
    let id_base = derive_seed(spec.seed, STREAM_CALIBRATION);
    let identities: Vec<Coefficients> =
        (0..p + 1).map(|i| sample_identity(morphable, id_base.wrapping_add(i as u64))).collect();
    let base_views: Vec<Array3<f64>> = identities
        .iter()
        .map(|c| Ok(render_face(morphable, c, &spec.render)?.image))
        .collect::<Result<_>>()?;

    let jitter = TransformDistribution {
        euler_width: 0.05,
        translation_frac: 0.01,
        brightness_frac: 0.05,
    };
    let mut rng = seeded(derive_seed(spec.seed, STREAM_CAL_JITTER));
    let mut same_pairs = Vec::with_capacity(p);
    for i in 0..p {
        let t = jitter.sample(&mut rng);
        let mesh = morphable.synth_mesh(&identities[i])?;
        let full = PatchTopology::full(&mesh);
        let mut params = spec.render.clone().with_coefficients(&identities[i]);
        for a in 0..3 {
            params.pose[a] += t.euler[a];
            params.pose[3 + a] += t.translation[a];
        }
        let mut view = rasterize(&mesh, &full, &params)?.image;
        view.mapv_inplace(|v| (t.brightness * v).clamp(0.0, 255.0));
        same_pairs.push((base_views[i].clone(), view));
    }
    let diff_pairs: Vec<(Array3<f64>, Array3<f64>)> =
        (0..p).map(|i| (base_views[i].clone(), base_views[i + 1].clone())).collect();

    models
        .iter()
        .map(|(label, model)| {
            let threshold = calibrate_threshold(model, &same_pairs, &diff_pairs)?;
            Ok(CalibrationEntry { model: label.clone(), threshold })
        })
        .collect()
}

struct JobOutcome {
    composite: Array3<f64>,
    mesh: Option<Mesh>,
    loss_trace: Vec<f64>,
    similarity_trace: Vec<f64>,
    final_loss: f64,
    final_similarity: f64,
    /// Original (pre-attack) patch for the curvature comparison.
    original_patch: Option<Mesh>,
}

fn csv_escape_free(label: &str) -> &str {
    // Labels are validated to [A-Za-z0-9_-], safe in CSV and paths.
    label
}

fn write_trace_csv(path: &Path, loss: &[f64], similarity: &[f64]) -> Result<()> {
    let mut text = String::from("iteration,loss,white_box_similarity\n");
    for (i, (l, s)) in loss.iter().zip(similarity).enumerate() {
        text.push_str(&format!("{i},{l},{s}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Runs one (method, pair) job end to end: attack, artifacts, per-model
/// verification, curvature. Returns the record; failures are captured in
/// `error` rather than propagated.
#[allow(clippy::too_many_arguments)]
fn run_job(
    spec: &ExperimentSpec,
    morphable: &MorphableModel,
    white: &EmbeddingModel,
    eval_models: &[(String, &EmbeddingModel, f64)],
    entry: &MethodEntry,
    method_index: usize,
    pair_index: usize,
    radii: &[f64],
) -> PairRecord {
    let start = Instant::now();
    let pair = spec.pairs[pair_index];
    let label = entry.label();
    let mut record = PairRecord {
        method: label.clone(),
        pair_index,
        attacker_seed: pair.attacker_seed,
        victim_seed: pair.victim_seed,
        initial_loss: None,
        final_loss: None,
        final_similarity: None,
        success: BTreeMap::new(),
        curvature_original: Vec::new(),
        curvature_adversarial: Vec::new(),
        artifacts: Vec::new(),
        wall_time_secs: 0.0,
        error: None,
    };

    let attack_seed = derive_seed(
        spec.seed,
        STREAM_JOB ^ ((method_index as u64) << 32) ^ pair_index as u64,
    );

    let result = (|| -> Result<JobOutcome> {
        let attacker_c = sample_identity(morphable, pair.attacker_seed);
        let victim_c = sample_identity(morphable, pair.victim_seed);
        let victim_image = render_face(morphable, &victim_c, &spec.render)?.image;

        let outcome = match &entry.method {
            MethodSpec::At3dP { config } => {
                let mut cfg = config.clone();
                cfg.region = spec.region.clone();
                cfg.render = spec.render.clone();
                cfg.seed = attack_seed;
                let res = at3d_p(&cfg, white, morphable, &attacker_c, &victim_c)?;
                let init =
                    init_coefficients(morphable, cfg.init, &attacker_c, &victim_c, cfg.seed)?;
                let init_mesh = morphable.synth_mesh(&init)?;
                let original_patch = Mesh::new(
                    init_mesh.positions.clone(),
                    init_mesh.colors.clone(),
                    res.patch.faces.clone(),
                )?;
                JobOutcome {
                    composite: res.composite,
                    mesh: Some(res.mesh),
                    loss_trace: res.loss_trace,
                    similarity_trace: res.similarity_trace,
                    final_loss: res.final_loss,
                    final_similarity: res.final_similarity,
                    original_patch: Some(original_patch),
                }
            }
            MethodSpec::At3dM { config } | MethodSpec::At3dMl { config, .. } => {
                let mut cfg = config.clone();
                cfg.region = spec.region.clone();
                cfg.seed = attack_seed;
                let base_mesh = morphable.synth_mesh(&attacker_c)?;
                let patch = extract_patch(&base_mesh, &spec.region)?;
                let params = spec.render.clone().with_coefficients(&attacker_c);
                cfg.render = params.clone();
                let full = PatchTopology::full(&base_mesh);
                let attacker_image = rasterize(&base_mesh, &full, &params)?.image;
                let res = match &entry.method {
                    MethodSpec::At3dMl { weights, .. } => at3d_ml(
                        &cfg,
                        white,
                        &base_mesh,
                        &patch,
                        &attacker_image,
                        &victim_image,
                        *weights,
                    )?,
                    _ => at3d_m(&cfg, white, &base_mesh, &patch, &attacker_image, &victim_image)?,
                };
                let original_patch = Mesh::new(
                    base_mesh.positions.clone(),
                    base_mesh.colors.clone(),
                    res.patch.faces.clone(),
                )?;
                JobOutcome {
                    composite: res.composite,
                    mesh: Some(res.mesh),
                    loss_trace: res.loss_trace,
                    similarity_trace: res.similarity_trace,
                    final_loss: res.final_loss,
                    final_similarity: res.final_similarity,
                    original_patch: Some(original_patch),
                }
            }
            MethodSpec::Mim2d { config } => {
                let mut cfg = config.clone();
                cfg.seed = attack_seed;
                let base_mesh = morphable.synth_mesh(&attacker_c)?;
                let patch = extract_patch(&base_mesh, &spec.region)?;
                let params = spec.render.clone().with_coefficients(&attacker_c);
                let full = PatchTopology::full(&base_mesh);
                let attacker_image = rasterize(&base_mesh, &full, &params)?.image;
                let mask = rasterize(&base_mesh, &patch, &params)?.mask;
                let res = mim_2d(&cfg, white, &attacker_image, &victim_image, &mask)?;
                JobOutcome {
                    composite: res.image,
                    mesh: None,
                    loss_trace: res.loss_trace,
                    similarity_trace: res.similarity_trace,
                    final_loss: res.final_loss,
                    final_similarity: res.final_similarity,
                    original_patch: None,
                }
            }
            MethodSpec::Eot2d { config, distribution, samples } => {
                let mut cfg = config.clone();
                cfg.seed = attack_seed;
                let base_mesh = morphable.synth_mesh(&attacker_c)?;
                let patch = extract_patch(&base_mesh, &spec.region)?;
                let estimator = EotEstimator { distribution: *distribution, samples: *samples };
                let res = eot_2d(
                    &cfg,
                    white,
                    morphable,
                    &attacker_c,
                    &victim_image,
                    &patch,
                    &spec.render,
                    &estimator,
                )?;
                JobOutcome {
                    composite: res.image,
                    mesh: None,
                    loss_trace: res.loss_trace,
                    similarity_trace: res.similarity_trace,
                    final_loss: res.final_loss,
                    final_similarity: res.final_similarity,
                    original_patch: None,
                }
            }
        };

        // Per-model verification: impersonation succeeds when the final
        // image verifies as the victim; dodging when it no longer verifies
        // as the attacker's own gallery view.
        let attacker_gallery;
        let reference = match entry.method.mode() {
            AttackMode::Impersonate => &victim_image,
            AttackMode::Dodge => {
                attacker_gallery = render_face(morphable, &attacker_c, &spec.render)?.image;
                &attacker_gallery
            }
        };
        for (model_label, model, delta) in eval_models {
            let accepted = verify(model, &outcome.composite, reference, *delta)?;
            let success = match entry.method.mode() {
                AttackMode::Impersonate => accepted,
                AttackMode::Dodge => !accepted,
            };
            record.success.insert(model_label.clone(), success);
        }

        // Curvature comparison for mesh-producing methods.
        if let (Some(adv), Some(orig)) = (&outcome.mesh, &outcome.original_patch) {
            for &r in radii {
                record.curvature_original.push(orig.average_curvature(r, true)?);
                record.curvature_adversarial.push(adv.average_curvature(r, true)?);
            }
        }

        // Artifacts.
        let rel_dir = PathBuf::from(csv_escape_free(&label)).join(format!("pair_{pair_index:03}"));
        let abs_dir = spec.out_dir.join(&rel_dir);
        fs::create_dir_all(&abs_dir)?;
        let mut push_artifact = |rel: PathBuf| {
            record.artifacts.push(rel.to_string_lossy().replace('\\', "/"));
        };
        let trace_rel = rel_dir.join("trace.csv");
        write_trace_csv(
            &spec.out_dir.join(&trace_rel),
            &outcome.loss_trace,
            &outcome.similarity_trace,
        )?;
        push_artifact(trace_rel);
        let composite_rel = rel_dir.join("composite.ppm");
        save_ppm(spec.out_dir.join(&composite_rel), &outcome.composite)?;
        push_artifact(composite_rel);
        if let Some(mesh) = &outcome.mesh {
            let mesh_rel = rel_dir.join("mesh.obj");
            mesh.save_obj(spec.out_dir.join(&mesh_rel))?;
            push_artifact(mesh_rel);
        }

        Ok(outcome)
    })();

    match result {
        Ok(outcome) => {
            record.initial_loss = outcome.loss_trace.first().copied();
            record.final_loss = Some(outcome.final_loss);
            record.final_similarity = Some(outcome.final_similarity);
        }
        Err(e) => {
            record.success.clear();
            record.curvature_original.clear();
            record.curvature_adversarial.clear();
            record.error = Some(e.to_string());
        }
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    record
}

fn resolve_workers(spec_threads: usize, override_threads: usize, jobs: usize) -> usize {
    let requested = if override_threads > 0 {
        override_threads
    } else if spec_threads > 0 {
        spec_threads
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    };
    requested.clamp(1, jobs.max(1))
}

/// Runs the whole experiment: calibration, every (pair, method) job with
/// pair-level parallelism, aggregation, and report.json. `override_threads`
/// (nonzero) wins over the spec's thread count.
pub fn run_experiment(spec: &ExperimentSpec, override_threads: usize) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;

    let morphable = generate_synthetic_model(spec.morphable.seed, spec.morphable.resolution)?;
    let white = build_toy_model(spec.white_box.arch, spec.white_box.seed);
    let blacks: Vec<EmbeddingModel> =
        spec.black_box.iter().map(|m| build_toy_model(m.arch, m.seed)).collect();

    let mut models: Vec<(String, &EmbeddingModel)> =
        vec![(spec.white_box.label("white"), &white)];
    for (m, model) in spec.black_box.iter().zip(&blacks) {
        models.push((m.label("black"), model));
    }
    let model_labels: Vec<String> = models.iter().map(|(l, _)| l.clone()).collect();

    let calibration = calibrate_models(spec, &morphable, &models)?;
    let eval_models: Vec<(String, &EmbeddingModel, f64)> = models
        .iter()
        .zip(&calibration)
        .map(|((label, model), cal)| (label.clone(), *model, cal.threshold.delta))
        .collect();

    let radii = spec.effective_radii();
    let jobs: Vec<(usize, usize)> = (0..spec.methods.len())
        .flat_map(|mi| (0..spec.pairs.len()).map(move |k| (mi, k)))
        .collect();
    let workers = resolve_workers(spec.threads, override_threads, jobs.len());

    let slots: Vec<Mutex<Option<PairRecord>>> =
        (0..jobs.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (mi, k) = jobs[j];
                let record = run_job(
                    spec,
                    &morphable,
                    &white,
                    &eval_models,
                    &spec.methods[mi],
                    mi,
                    k,
                    &radii,
                );
                *slots[j].lock().expect("record slot") = Some(record);
            });
        }
    });
    let records: Vec<PairRecord> = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("record slot").expect("job completed"))
        .collect();

    let method_labels: Vec<String> = spec.methods.iter().map(|m| m.label()).collect();
    let success_table = recompute_success_table(&method_labels, &model_labels, &records);

    let curvature_summary = spec
        .methods
        .iter()
        .filter(|m| m.method.produces_mesh())
        .map(|m| {
            let label = m.label();
            let completed: Vec<&PairRecord> = records
                .iter()
                .filter(|r| {
                    r.method == label && r.error.is_none() && !r.curvature_original.is_empty()
                })
                .collect();
            let mut original_mean = vec![0.0; radii.len()];
            let mut adversarial_mean = vec![0.0; radii.len()];
            for r in &completed {
                for (i, v) in r.curvature_original.iter().enumerate() {
                    original_mean[i] += v;
                }
                for (i, v) in r.curvature_adversarial.iter().enumerate() {
                    adversarial_mean[i] += v;
                }
            }
            if !completed.is_empty() {
                let n = completed.len() as f64;
                for v in original_mean.iter_mut().chain(adversarial_mean.iter_mut()) {
                    *v /= n;
                }
            }
            MethodCurvature {
                method: label,
                radii: radii.clone(),
                original_mean,
                adversarial_mean,
                pairs_evaluated: completed.len(),
            }
        })
        .collect();

    let report = ExperimentReport {
        environment: EnvironmentStamp {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            workers,
        },
        calibration,
        success_table,
        curvature_summary,
        records,
        elapsed_secs: t0.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(spec.out_dir.join("report.json"), json + "\n")?;
    Ok(report)
}

/// Audits a written report: the success table must equal the one derived
/// from the per-pair records, rates must lie in [0, 100], every pair must
/// appear exactly once per method, and every artifact must exist relative
/// to the report's directory.
pub fn audit_report(report: &ExperimentReport, base_dir: &Path) -> Result<()> {
    let method_labels: Vec<String> =
        report.success_table.iter().map(|m| m.method.clone()).collect();
    let model_labels: Vec<String> = report
        .success_table
        .first()
        .map(|m| m.entries.iter().map(|e| e.model.clone()).collect())
        .unwrap_or_default();
    let recomputed = recompute_success_table(&method_labels, &model_labels, &report.records);
    if recomputed != report.success_table {
        return Err(Error::validation(
            "report.success_table",
            "table does not match the rates recomputed from per-pair records",
        ));
    }
    for row in &report.success_table {
        for entry in &row.entries {
            if !(0.0..=100.0).contains(&entry.rate) {
                return Err(Error::validation(
                    format!("report.success_table[{}][{}]", row.method, entry.model),
                    format!("rate {} outside [0, 100]", entry.rate),
                ));
            }
        }
    }
    for method in &method_labels {
        let mut seen = Vec::new();
        for r in report.records.iter().filter(|r| &r.method == method) {
            if seen.contains(&r.pair_index) {
                return Err(Error::validation(
                    format!("report.records[{method}]"),
                    format!("pair {} appears more than once", r.pair_index),
                ));
            }
            seen.push(r.pair_index);
        }
    }
    for record in &report.records {
        for artifact in &record.artifacts {
            let path = base_dir.join(artifact);
            if !path.is_file() {
                return Err(Error::validation(
                    format!("report.records[{}][{}]", record.method, record.pair_index),
                    format!("artifact missing on disk: {}", path.display()),
                ));
            }
        }
    }
    Ok(())
}

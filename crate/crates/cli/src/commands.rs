//! Pipeline commands over a fixed workdir layout:
//! workdir/{checkpoints,decomp,gates,metrics,reports}, a provenance file,
//! and an echoed resolved config. Every command locks the workdir, refuses
//! to overwrite its outputs without `force`, and is byte-identical on rerun
//! under the same config and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use frism_core::checkpoint::{checkpoint_checksum, load_checkpoint, save_checkpoint};
use frism_core::error::{Error, Result};
use frism_core::frism::{
    decompose, load_decomposition, load_gates, materialize, save_decomposition, save_gates,
    scalar_gate_variant, GateSet, SubspaceDecomposition, Variant,
};
use frism_core::merge::{
    dare, ip_lambdas, merge_layer_wise, merge_task_arithmetic, task_vector, ties_merge,
    LayerCoeffs,
};
use frism_core::model::ModelParams;
use frism_core::rng::PortableRng;
use frism_core::spectral::{
    classify_regimes, cross_term_report, estimate_curvatures, simulate_gate_dynamics,
    GateTrajectory, QuadraticLandscape,
};
use frism_core::task::{accuracy, SyntheticTask, TaskKind};
use frism_core::trainer::{kl_divergence, train_gates, train_scalar_gates};
use frism_core::triple::make_triple;
use serde::{Deserialize, Serialize};

use crate::config::{
    RunConfig, CALIBRATION_SAMPLES, CALIBRATION_TASK_SEED, EVAL_SEED_TASK_R, EVAL_SEED_TASK_V,
    MERGE_METHODS,
};

/// Fixed output layout under one root.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: &Path) -> Workdir {
        Workdir {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn sub(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Create the root and every fixed subdirectory.
    pub fn ensure(&self) -> Result<()> {
        for dir in ["checkpoints", "decomp", "gates", "metrics", "reports"] {
            let p = self.sub(dir);
            fs::create_dir_all(&p)
                .map_err(|e| io_err(format!("create {}: {e}", p.display())))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.sub("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn merged_checkpoint(&self, method: &str) -> PathBuf {
        self.checkpoint(&format!("merged_{method}"))
    }

    pub fn decomposition(&self) -> PathBuf {
        self.sub("decomp").join("decomposition.bin")
    }

    pub fn gates(&self, variant: Variant) -> PathBuf {
        let name = match variant {
            Variant::Subspace => "gates.bin",
            Variant::ScalarGate => "gates_scalar.bin",
        };
        self.sub("gates").join(name)
    }

    pub fn metrics(&self, method: &str) -> PathBuf {
        self.sub("metrics").join(format!("metrics_{method}.json"))
    }

    pub fn eval_metrics(&self, stem: &str) -> PathBuf {
        self.sub("metrics").join(format!("eval_{stem}.json"))
    }

    pub fn train_report(&self, variant: Variant) -> PathBuf {
        let name = match variant {
            Variant::Subspace => "train_report.jsonl",
            Variant::ScalarGate => "train_report_scalar.jsonl",
        };
        self.sub("reports").join(name)
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.sub("reports").join("sweep.csv")
    }

    pub fn regimes_csv(&self) -> PathBuf {
        self.sub("reports").join("regimes.csv")
    }

    pub fn trajectory_csv(&self) -> PathBuf {
        self.sub("reports").join("trajectory.csv")
    }

    pub fn cross_terms(&self) -> PathBuf {
        self.sub("reports").join("cross_terms.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.sub("reports").join("report.md")
    }

    pub fn provenance(&self) -> PathBuf {
        self.sub("provenance.json")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.sub("config_resolved.json")
    }

    fn lock_path(&self) -> PathBuf {
        self.sub(".lock")
    }
}

/// Exclusive-create lockfile; dropped (removed) when the command finishes.
/// Concurrent invocations on one workdir are unsupported, so a live lock is
/// an error rather than a wait.
#[derive(Debug)]
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(w: &Workdir) -> Result<WorkdirLock> {
        fs::create_dir_all(w.root())
            .map_err(|e| io_err(format!("create {}: {e}", w.root().display())))?;
        let path = w.lock_path();
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(io_err(format!(
                "workdir is locked ({} exists); another command may be running, remove the file if it is stale",
                path.display()
            ))),
            Err(e) => Err(io_err(format!("create lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(msg: String) -> Error {
    Error::Io(std::io::Error::other(msg))
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(io_err(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(format!("write {}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig, w: &Workdir) -> Result<()> {
    write_text(&w.config_echo(), &cfg.to_echo_json()?)
}

fn load_named_checkpoint(path: &Path, hint: &str) -> Result<ModelParams> {
    if !path.exists() {
        return Err(io_err(format!(
            "missing checkpoint {}; {hint}",
            path.display()
        )));
    }
    load_checkpoint(path)
}

struct Triple {
    base: ModelParams,
    vlm: ModelParams,
    lrm: ModelParams,
}

fn load_triple(w: &Workdir) -> Result<Triple> {
    let hint = "run `frism gen` first";
    Ok(Triple {
        base: load_named_checkpoint(&w.checkpoint("base"), hint)?,
        vlm: load_named_checkpoint(&w.checkpoint("vlm"), hint)?,
        lrm: load_named_checkpoint(&w.checkpoint("lrm"), hint)?,
    })
}

/// Load the stored decomposition or compute and store it from the triple.
/// The stored copy is a cache: recomputation is bitwise identical.
fn obtain_decomposition(
    cfg: &RunConfig,
    w: &Workdir,
    triple: &Triple,
) -> Result<SubspaceDecomposition> {
    let path = w.decomposition();
    if path.exists() {
        let (d, _) = load_decomposition(&path)?;
        return Ok(d);
    }
    let tau = task_vector(&triple.lrm, &triple.base)?;
    let d = decompose(&cfg.model.arch, &tau, &cfg.frism)?;
    save_decomposition(&d, cfg.frism.lambda_lrm, &path)?;
    Ok(d)
}

/// The three numbers every comparison row is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    /// Merge method or evaluated checkpoint stem.
    pub source: String,
    /// Accuracy on the taskV evaluation stream; absent if not requested.
    pub task_v_accuracy: Option<f64>,
    /// Accuracy on the taskR evaluation stream; absent if not requested.
    pub task_r_accuracy: Option<f64>,
    /// Mean forward KL from the frozen teacher to this model on the fixed
    /// calibration batch.
    pub calibration_kl: f64,
    /// Samples per accuracy stream.
    pub n_samples: usize,
    /// Layers whose ip coefficient exceeded merge.lambda_warn (ip only).
    pub ip_lambda_warnings: Vec<String>,
}

fn metrics_json(doc: &MetricsDoc) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Format(format!("encode metrics: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Accuracy on the pinned evaluation streams plus KL to the teacher on the
/// fixed calibration batch.
pub fn eval_metrics(
    model: &ModelParams,
    teacher: &ModelParams,
    cfg: &RunConfig,
    source: &str,
) -> Result<MetricsDoc> {
    let n = cfg.eval.n_samples;
    let mut task_v = None;
    let mut task_r = None;
    for t in &cfg.eval.tasks {
        match t.as_str() {
            "taskV" => {
                let task = SyntheticTask::new(TaskKind::TaskV, EVAL_SEED_TASK_V);
                task_v = Some(accuracy(model, &task.stream_batch(0, n)?)?);
            }
            "taskR" => {
                let task = SyntheticTask::new(TaskKind::TaskR, EVAL_SEED_TASK_R);
                task_r = Some(accuracy(model, &task.stream_batch(0, n)?)?);
            }
            other => return Err(Error::Config(format!("unknown eval task {other:?}"))),
        }
    }
    let cal = SyntheticTask::new(TaskKind::TaskV, CALIBRATION_TASK_SEED)
        .stream_unlabeled(0, CALIBRATION_SAMPLES)?;
    let (_, t_trace) = teacher.forward_trace(&cal.inputs)?;
    let (_, s_trace) = model.forward_trace(&cal.inputs)?;
    let calibration_kl = kl_divergence(t_trace.probs(), s_trace.probs())?;
    Ok(MetricsDoc {
        source: source.to_string(),
        task_v_accuracy: task_v,
        task_r_accuracy: task_r,
        calibration_kl,
        n_samples: n,
        ip_lambda_warnings: Vec::new(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceDoc {
    seeds: frism_core::triple::TripleSeeds,
    epochs: frism_core::triple::Epochs,
    /// Container checksums as decimal strings (u64 does not fit JSON
    /// numbers losslessly).
    checksums: BTreeMap<String, String>,
}

/// Generate and store the base/vlm/lrm triple with a provenance record.
pub fn cmd_gen<W: Write>(cfg: &RunConfig, force: bool, out: &mut W) -> Result<()> {
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    for name in ["base", "vlm", "lrm"] {
        guard_overwrite(&w.checkpoint(name), force)?;
    }
    guard_overwrite(&w.provenance(), force)?;

    let triple = make_triple(&cfg.model.arch, cfg.model.seeds, cfg.model.epochs)?;
    let mut checksums = BTreeMap::new();
    for (name, params) in [
        ("base", &triple.base),
        ("vlm", &triple.vlm),
        ("lrm", &triple.lrm),
    ] {
        let path = w.checkpoint(name);
        save_checkpoint(params, &path)?;
        checksums.insert(name.to_string(), checkpoint_checksum(params)?.to_string());
        writeln!(out, "wrote {}", path.display()).ok();
    }
    let prov = ProvenanceDoc {
        seeds: cfg.model.seeds,
        epochs: cfg.model.epochs,
        checksums,
    };
    let mut text = serde_json::to_string_pretty(&prov)
        .map_err(|e| Error::Format(format!("encode provenance: {e}")))?;
    text.push('\n');
    write_text(&w.provenance(), &text)?;
    echo_config(cfg, &w)?;
    writeln!(out, "wrote {}", w.provenance().display()).ok();
    Ok(())
}

/// Scalar gates stored as one-element vectors per layer.
fn scalar_map_from_gates(gates: &GateSet) -> Result<BTreeMap<String, f32>> {
    let mut out = BTreeMap::new();
    for (layer, g) in &gates.gates {
        if g.len() != 1 {
            return Err(Error::Format(format!(
                "scalar gate file holds {} values for layer {layer:?}",
                g.len()
            )));
        }
        out.insert(layer.clone(), g[0]);
    }
    Ok(out)
}

fn gates_from_scalar_map(map: &BTreeMap<String, f32>) -> GateSet {
    GateSet {
        gates: map.iter().map(|(k, &v)| (k.clone(), vec![v])).collect(),
        trainable: true,
    }
}

fn merged_layer_prefixes(params: &ModelParams) -> Vec<String> {
    params
        .arch
        .merged_weight_names()
        .iter()
        .map(|n| n.trim_end_matches(".w").to_string())
        .collect()
}

fn constant_map(prefixes: &[String], value: f64) -> LayerCoeffs {
    prefixes.iter().map(|p| (p.clone(), value)).collect()
}

/// Merge by the configured method and write the checkpoint plus metrics.
pub fn cmd_merge<W: Write>(cfg: &RunConfig, force: bool, out: &mut W) -> Result<()> {
    let method = cfg.merge.method.as_str();
    if !MERGE_METHODS.contains(&method) {
        return Err(Error::Config(format!(
            "merge.method {method:?}; expected one of {}",
            MERGE_METHODS.join("|")
        )));
    }
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let ckpt_path = w.merged_checkpoint(method);
    let metrics_path = w.metrics(method);
    guard_overwrite(&ckpt_path, force)?;
    guard_overwrite(&metrics_path, force)?;

    let triple = load_triple(&w)?;
    let tau_v = task_vector(&triple.vlm, &triple.base)?;
    let tau_l = task_vector(&triple.lrm, &triple.base)?;
    let m = &cfg.merge;
    let mut warnings = Vec::new();
    let merged = match method {
        "ta" => merge_task_arithmetic(&triple.base, &tau_v, &tau_l, m.lambda_vlm, m.lambda_lrm)?,
        "layerwise" => {
            let prefixes = merged_layer_prefixes(&triple.base);
            let lv = if m.layer_lambda_vlm.is_empty() {
                constant_map(&prefixes, m.lambda_vlm)
            } else {
                m.layer_lambda_vlm.clone()
            };
            let ll = if m.layer_lambda_lrm.is_empty() {
                constant_map(&prefixes, m.lambda_lrm)
            } else {
                m.layer_lambda_lrm.clone()
            };
            merge_layer_wise(&triple.base, &triple.vlm, &tau_v, &tau_l, &lv, &ll)?
        }
        "ties" => ties_merge(&triple.base, &[&tau_v, &tau_l], m.density, m.lambda_lrm)?,
        "dare" => {
            let dared = dare(&tau_l, m.drop_rate, m.dare_seed)?;
            merge_task_arithmetic(&triple.base, &tau_v, &dared, m.lambda_vlm, m.lambda_lrm)?
        }
        "ip" => {
            let prefixes = merged_layer_prefixes(&triple.base);
            let per_layer = ip_lambdas(&tau_v, &tau_l, m.lambda_warn)?;
            let mut ll = LayerCoeffs::new();
            for (name, (lambda, warn)) in &per_layer {
                let prefix = name.trim_end_matches(".w").to_string();
                if *warn {
                    warnings.push(prefix.clone());
                }
                ll.insert(prefix, *lambda);
            }
            let lv = constant_map(&prefixes, 1.0);
            merge_layer_wise(&triple.base, &triple.vlm, &tau_v, &tau_l, &lv, &ll)?
        }
        "frism" => {
            let d = obtain_decomposition(cfg, &w, &triple)?;
            let gates_path = w.gates(Variant::Subspace);
            let gates = if gates_path.exists() {
                let (g, variant) = load_gates(&gates_path)?;
                if variant != Variant::Subspace {
                    return Err(Error::Format(format!(
                        "{} stores {} gates",
                        gates_path.display(),
                        variant.as_str()
                    )));
                }
                g
            } else {
                GateSet::zero_init(&d)
            };
            materialize(&triple.vlm, &d, &gates, &cfg.frism)?
        }
        "frism-scalar" => {
            let gates_path = w.gates(Variant::ScalarGate);
            let map = if gates_path.exists() {
                let (g, variant) = load_gates(&gates_path)?;
                if variant != Variant::ScalarGate {
                    return Err(Error::Format(format!(
                        "{} stores {} gates",
                        gates_path.display(),
                        variant.as_str()
                    )));
                }
                scalar_map_from_gates(&g)?
            } else {
                merged_layer_prefixes(&triple.base)
                    .into_iter()
                    .map(|p| (p, 0.0f32))
                    .collect()
            };
            scalar_gate_variant(&triple.vlm, &tau_l, &map, cfg.frism.lambda_lrm)?
        }
        _ => unreachable!("method validated above"),
    };

    save_checkpoint(&merged, &ckpt_path)?;
    let mut doc = eval_metrics(&merged, &triple.vlm, cfg, method)?;
    doc.ip_lambda_warnings = warnings;
    write_text(&metrics_path, &metrics_json(&doc)?)?;
    echo_config(cfg, &w)?;
    writeln!(out, "wrote {}", ckpt_path.display()).ok();
    writeln!(out, "wrote {}", metrics_path.display()).ok();
    Ok(())
}

/// Train gates against the frozen teacher and store them with the report.
pub fn cmd_train<W: Write>(cfg: &RunConfig, force: bool, out: &mut W) -> Result<()> {
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let variant = cfg.frism.variant;
    let gates_path = w.gates(variant);
    let report_path = w.train_report(variant);
    guard_overwrite(&gates_path, force)?;
    guard_overwrite(&report_path, force)?;

    let triple = load_triple(&w)?;
    let calibration = SyntheticTask::new(TaskKind::TaskV, CALIBRATION_TASK_SEED);
    let tc = cfg.train.to_train_config(cfg.frism.alpha);
    let d = obtain_decomposition(cfg, &w, &triple)?;
    let (gates, report) = match variant {
        Variant::Subspace => {
            train_gates(&triple.vlm, &triple.vlm, &d, &cfg.frism, &tc, &calibration)?
        }
        Variant::ScalarGate => {
            let tau_l = task_vector(&triple.lrm, &triple.base)?;
            let (map, report) = train_scalar_gates(
                &triple.vlm,
                &triple.vlm,
                &tau_l,
                &d,
                &cfg.frism,
                &tc,
                &calibration,
            )?;
            (gates_from_scalar_map(&map), report)
        }
    };
    save_gates(&cfg.model.arch, &gates, variant, &gates_path)?;
    write_text(&report_path, &report.to_jsonl()?)?;
    echo_config(cfg, &w)?;
    writeln!(
        out,
        "trained {} gates: distill {:.6} inject {:.6} after {} steps",
        variant.as_str(),
        report.summary.distill_loss,
        report.summary.inject_loss,
        report.summary.steps_run
    )
    .ok();
    writeln!(out, "wrote {}", gates_path.display()).ok();
    writeln!(out, "wrote {}", report_path.display()).ok();
    Ok(())
}

/// Rank-injection sweep over merge.ranks × merge.lambdas, scored on the
/// evaluation streams.
pub fn cmd_sweep<W: Write>(cfg: &RunConfig, force: bool, out: &mut W) -> Result<()> {
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let csv_path = w.sweep_csv();
    guard_overwrite(&csv_path, force)?;

    let triple = load_triple(&w)?;
    let tau_l = task_vector(&triple.lrm, &triple.base)?;
    let n = cfg.eval.n_samples;
    let batch_v = SyntheticTask::new(TaskKind::TaskV, EVAL_SEED_TASK_V).stream_batch(0, n)?;
    let batch_r = SyntheticTask::new(TaskKind::TaskR, EVAL_SEED_TASK_R).stream_batch(0, n)?;
    let result = frism_core::merge::rank_injection_sweep(
        &triple.vlm,
        &tau_l,
        &cfg.merge.ranks,
        &cfg.merge.lambdas,
        |params| Ok((accuracy(params, &batch_v)?, accuracy(params, &batch_r)?)),
    )?;
    write_text(&csv_path, &result.to_csv())?;
    echo_config(cfg, &w)?;
    writeln!(out, "wrote {}", csv_path.display()).ok();
    Ok(())
}

/// Simulation source: synthetic random landscapes or curvatures estimated
/// from the stored triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulateMode {
    Random,
    Triple,
}

impl SimulateMode {
    pub fn parse(s: &str) -> Result<SimulateMode> {
        match s {
            "random" => Ok(SimulateMode::Random),
            "triple" => Ok(SimulateMode::Triple),
            other => Err(Error::Config(format!(
                "simulate mode {other:?}; expected random or triple"
            ))),
        }
    }
}

pub struct SimulateArgs {
    pub mode: SimulateMode,
    /// Landscape count in random mode.
    pub count: usize,
    pub lr: f64,
    pub steps: usize,
    /// Landscape-sampling seed in random mode.
    pub seed: u64,
}

fn regime_rows(
    csv: &mut String,
    index: &mut usize,
    land: &QuadraticLandscape,
    traj: &GateTrajectory,
) {
    let pred = classify_regimes(land);
    let terminal = traj.terminal();
    for i in 0..land.len() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            *index,
            land.curvatures[i],
            land.subspace_norms_sq[i],
            land.alpha,
            pred.margins[i],
            pred.regimes[i].as_str(),
            terminal[i]
        ));
        *index += 1;
    }
}

const REGIME_HEADER: &str = "subspace_index,h,norm_sq,alpha,margin,regime,final_gate\n";

/// Simulate gate dynamics and write the regime map (and, in triple mode,
/// the measured subspace alignments).
pub fn cmd_simulate<W: Write>(
    cfg: &RunConfig,
    force: bool,
    args: &SimulateArgs,
    out: &mut W,
) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("simulate count must be positive".into()));
    }
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let regimes_path = w.regimes_csv();
    let traj_path = w.trajectory_csv();
    guard_overwrite(&regimes_path, force)?;
    guard_overwrite(&traj_path, force)?;

    let mut csv = String::from(REGIME_HEADER);
    let mut index = 0usize;
    let mut first_traj: Option<GateTrajectory> = None;
    match args.mode {
        SimulateMode::Random => {
            let mut rng = PortableRng::new(args.seed);
            for _ in 0..args.count {
                let k = 1 + (rng.next_f64() * 7.0) as usize;
                let h: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 4.0)).collect();
                let n: Vec<f64> = (0..k).map(|_| rng.uniform(0.2, 2.0)).collect();
                let alpha = rng.uniform(0.1, 1.0);
                let land = QuadraticLandscape::new(h, n, alpha, 1.0)?;
                let traj = simulate_gate_dynamics(&land, &vec![0.0; k], args.lr, args.steps)?;
                regime_rows(&mut csv, &mut index, &land, &traj);
                first_traj.get_or_insert(traj);
            }
        }
        SimulateMode::Triple => {
            let cross_path = w.cross_terms();
            guard_overwrite(&cross_path, force)?;
            let triple = load_triple(&w)?;
            let d = obtain_decomposition(cfg, &w, &triple)?;
            if d.inject_normalizer <= 0.0 {
                return Err(Error::Degenerate(
                    "decomposition has an all-zero spectrum; nothing to simulate".into(),
                ));
            }
            // The trainer's bonus is normalized by N0, so the landscape's
            // effective weight is alpha / N0.
            let alpha_eff = cfg.frism.alpha / d.inject_normalizer;
            let batch = SyntheticTask::new(TaskKind::TaskV, EVAL_SEED_TASK_V)
                .stream_batch(0, CALIBRATION_SAMPLES)?;
            for (layer, l) in &d.layers {
                if l.degenerate {
                    continue;
                }
                let hs = estimate_curvatures(&triple.vlm, &d, layer, &batch)?;
                let mut h = Vec::new();
                let mut norms = Vec::new();
                for (i, &s) in l.s.data().iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    // Estimates can dip microscopically below zero at a
                    // finite-sample minimum; the landscape demands h >= 0.
                    h.push(hs[i].max(0.0));
                    norms.push((s as f64) * (s as f64));
                }
                if h.is_empty() {
                    continue;
                }
                let land = QuadraticLandscape::new(h, norms, alpha_eff, cfg.frism.lambda_lrm)?;
                let k = land.len();
                let traj = simulate_gate_dynamics(&land, &vec![0.0; k], args.lr, args.steps)?;
                regime_rows(&mut csv, &mut index, &land, &traj);
                first_traj.get_or_insert(traj);
            }
            let tau_v = task_vector(&triple.vlm, &triple.base)?;
            let report = cross_term_report(&d, &tau_v)?;
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("encode cross terms: {e}")))?;
            text.push('\n');
            write_text(&cross_path, &text)?;
            writeln!(out, "wrote {}", cross_path.display()).ok();
        }
    }
    write_text(&regimes_path, &csv)?;
    if let Some(traj) = first_traj {
        write_text(&traj_path, &traj.to_csv())?;
        writeln!(out, "wrote {}", traj_path.display()).ok();
    }
    echo_config(cfg, &w)?;
    writeln!(out, "wrote {}", regimes_path.display()).ok();
    Ok(())
}

/// Evaluate one checkpoint against the pinned streams; the teacher for the
/// calibration KL is the stored θ_vlm.
pub fn cmd_eval<W: Write>(
    cfg: &RunConfig,
    force: bool,
    checkpoint: &Path,
    out_path: Option<&Path>,
    out: &mut W,
) -> Result<()> {
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let model = load_named_checkpoint(checkpoint, "pass --checkpoint an existing file")?;
    let teacher = load_named_checkpoint(&w.checkpoint("vlm"), "run `frism gen` first")?;
    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let target = match out_path {
        Some(p) => p.to_path_buf(),
        None => w.eval_metrics(stem),
    };
    guard_overwrite(&target, force)?;
    let doc = eval_metrics(&model, &teacher, cfg, stem)?;
    write_text(&target, &metrics_json(&doc)?)?;
    echo_config(cfg, &w)?;
    writeln!(out, "wrote {}", target.display()).ok();
    Ok(())
}

/// Consolidate every merge metrics file into one Markdown comparison table
/// (rows = methods, columns = taskV / taskR / avg).
pub fn cmd_report<W: Write>(cfg: &RunConfig, force: bool, out: &mut W) -> Result<()> {
    let w = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&w)?;
    w.ensure()?;
    let report_path = w.report_md();
    guard_overwrite(&report_path, force)?;

    let metrics_dir = w.root().join("metrics");
    let mut rows: Vec<(String, MetricsDoc)> = Vec::new();
    let entries = fs::read_dir(&metrics_dir)
        .map_err(|e| io_err(format!("read {}: {e}", metrics_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(format!("read metrics dir: {e}")))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(method) = name
            .strip_prefix("metrics_")
            .and_then(|n| n.strip_suffix(".json"))
        else {
            continue;
        };
        let text = fs::read_to_string(entry.path())
            .map_err(|e| io_err(format!("read {}: {e}", entry.path().display())))?;
        let doc: MetricsDoc = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("parse {}: {e}", entry.path().display())))?;
        rows.push((method.to_string(), doc));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no metrics_*.json under {}; run `frism merge` first",
            metrics_dir.display()
        )));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut md = String::from("# Merge comparison\n\n| method | taskV | taskR | avg |\n|---|---|---|---|\n");
    for (method, doc) in &rows {
        let (Some(v), Some(r)) = (doc.task_v_accuracy, doc.task_r_accuracy) else {
            return Err(Error::Config(format!(
                "metrics for {method:?} lack a taskV or taskR score; re-run merge with both eval tasks"
            )));
        };
        md.push_str(&format!(
            "| {method} | {v:.4} | {r:.4} | {:.4} |\n",
            (v + r) / 2.0
        ));
    }
    write_text(&report_path, &md)?;
    echo_config(cfg, &w)?;
    write!(out, "{md}").ok();
    writeln!(out, "wrote {}", report_path.display()).ok();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_blocks_second_acquisition_and_clears_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let w = Workdir::new(dir.path());
        let lock = WorkdirLock::acquire(&w).unwrap();
        let err = WorkdirLock::acquire(&w).unwrap_err();
        assert_eq!(err.kind(), "io");
        assert!(err.to_string().contains(".lock"), "{err}");
        drop(lock);
        let again = WorkdirLock::acquire(&w).unwrap();
        drop(again);
    }

    #[test]
    fn overwrite_guard_names_the_path_and_force_bypasses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, "{}").unwrap();
        let err = guard_overwrite(&p, false).unwrap_err();
        assert!(err.to_string().contains("x.json"), "{err}");
        assert!(err.to_string().contains("--force"), "{err}");
        guard_overwrite(&p, true).unwrap();
    }

    #[test]
    fn simulate_mode_parsing_rejects_unknown_modes() {
        assert_eq!(SimulateMode::parse("random").unwrap(), SimulateMode::Random);
        assert_eq!(SimulateMode::parse("triple").unwrap(), SimulateMode::Triple);
        assert_eq!(SimulateMode::parse("mc").unwrap_err().kind(), "config");
    }

    #[test]
    fn scalar_gate_round_trip_through_the_one_element_encoding() {
        let mut map = BTreeMap::new();
        map.insert("layer0".to_string(), 1.5f32);
        map.insert("layer1".to_string(), -0.25f32);
        let gates = gates_from_scalar_map(&map);
        assert_eq!(scalar_map_from_gates(&gates).unwrap(), map);
    }
}

//! Experiment configuration, synthetic workloads and report emission.
//!
//! A config file names a model preset, the sparse-attention knobs, the
//! resource budget and a workload: explicit lengths from a file, uniform
//! lengths, or a truncated log-normal fitted to a dataset's average and
//! maximum length. `run_experiment` builds the operator graph, allocates
//! stages, simulates the length-aware schedule against the padding and
//! micro-batch baselines, spot-checks sparse against dense attention on
//! synthetic tensors, and writes a human-readable summary plus
//! machine-readable report, trace and diagram files. Everything is
//! deterministic under a fixed seed; files are written via temp-and-rename.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionProblem};
use crate::encoder_graph::{
    allocate_stages_with, build_encoder_graph, enumerate_replication, presets, OperatorGraph,
    ResourceBudget, ScheduleParams, StageAllocation,
};
use crate::error::{Error, Result};
use crate::gantt;
use crate::pipeline::{
    self, compare, utilization, CompareReport, PipelineConfig, PipelineTrace, SequenceTask,
};

/// Model architecture selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    Distilbert,
    BertBase,
    BertLarge,
    Custom {
        layers: usize,
        hidden: usize,
        heads: usize,
    },
}

impl ModelPreset {
    /// (layers, hidden, heads)
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            ModelPreset::Distilbert => presets::DISTILBERT,
            ModelPreset::BertBase => presets::BERT_BASE,
            ModelPreset::BertLarge => presets::BERT_LARGE,
            ModelPreset::Custom {
                layers,
                hidden,
                heads,
            } => (*layers, *hidden, *heads),
        }
    }
}

/// Where sequence lengths come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadSource {
    /// Integer lengths, one per line; blank lines and `#` comments ignored.
    File { path: PathBuf },
    /// Truncated log-normal fitted so the conditional mean is `avg` and the
    /// support is `[1, max]`. `shape` is the sigma of the underlying normal.
    Stats {
        avg: f64,
        max: u64,
        #[serde(default = "default_shape")]
        shape: f64,
    },
    /// Uniform integers in `[lo, hi]`.
    Uniform { lo: u64, hi: u64 },
}

fn default_shape() -> f64 {
    0.85
}

/// A workload: a source of lengths and how many to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub source: WorkloadSource,
    /// Number of sequences; ignored for the file source.
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Everything one experiment run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelPreset,
    /// Candidates kept per query row.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Bit width of the quantized pre-selection.
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default)]
    pub seed: u64,
    /// Encoder layers to simulate; defaults to the model's layer count.
    #[serde(default)]
    pub layers: Option<usize>,
    /// Process the workload in batches of this size; default is one batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Chunk size of the micro-batch baseline.
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
    #[serde(default = "default_buffer_depth")]
    pub buffer_depth: usize,
    /// Design length for stage allocation; defaults to the workload mean.
    #[serde(default)]
    pub s_avg: Option<u64>,
    #[serde(default)]
    pub budget: ResourceBudget,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_k() -> usize {
    30
}

fn default_bits() -> u8 {
    4
}

fn default_micro_batch() -> usize {
    16
}

fn default_buffer_depth() -> usize {
    2
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, reason: String| {
            Err(Error::Validation {
                field: field.into(),
                reason,
            })
        };
        let (layers, hidden, heads) = self.model.dims();
        if layers == 0 || hidden == 0 || heads == 0 {
            return field("model", "layers, hidden and heads must be positive".into());
        }
        if hidden % heads != 0 {
            return field(
                "model",
                format!("hidden {hidden} not divisible by {heads} heads"),
            );
        }
        if self.k == 0 {
            return field("k", "must be >= 1".into());
        }
        if !crate::numerics::SUPPORTED_BITS.contains(&self.bits) {
            return field("bits", format!("{} not one of 1, 2, 4, 8", self.bits));
        }
        if self.layers == Some(0) {
            return field("layers", "must be >= 1".into());
        }
        if self.batch_size == Some(0) {
            return field("batch_size", "must be >= 1".into());
        }
        if self.micro_batch == 0 {
            return field("micro_batch", "must be >= 1".into());
        }
        if self.buffer_depth == 0 {
            return field("buffer_depth", "must be >= 1".into());
        }
        match &self.workload.source {
            WorkloadSource::Stats { avg, max, shape } => {
                if !avg.is_finite() || *avg < 1.0 || *avg >= *max as f64 {
                    return Err(Error::InfeasibleStats {
                        avg: *avg,
                        max: *max,
                    });
                }
                if !shape.is_finite() || *shape <= 0.0 {
                    return field("workload.source.shape", "must be positive".into());
                }
                if self.workload.count == 0 {
                    return field("workload.count", "must be >= 1".into());
                }
            }
            WorkloadSource::Uniform { lo, hi } => {
                if *lo == 0 || lo > hi {
                    return field("workload.source", "need 1 <= lo <= hi".into());
                }
                if self.workload.count == 0 {
                    return field("workload.count", "must be >= 1".into());
                }
            }
            WorkloadSource::File { .. } => {}
        }
        Ok(())
    }
}

/// Load and validate a config file, applying defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text)
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Mean of `exp(mu + shape * Z)` conditioned on being `<= cap`.
fn truncated_lognormal_mean(mu: f64, shape: f64, cap: f64) -> f64 {
    let ln_cap = cap.ln();
    let below = phi((ln_cap - mu) / shape);
    if below <= 0.0 {
        return cap;
    }
    (mu + shape * shape / 2.0).exp() * phi((ln_cap - mu - shape * shape) / shape) / below
}

/// Fit `mu` so the truncated mean hits `avg`; the conditional mean is
/// increasing in `mu`, so bisection converges.
fn fit_lognormal_mu(avg: f64, cap: f64, shape: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, cap.ln() + 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_lognormal_mean(mid, shape, cap) < avg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw sequence lengths. Deterministic for a fixed seed; stats lengths are
/// rejection-sampled log-normals rounded to integers in `[1, max]`.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Result<Vec<u64>> {
    match &spec.source {
        WorkloadSource::File { path } => {
            let text = fs::read_to_string(path)?;
            let mut lengths = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let len: u64 = line.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}:{}: bad length `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                if len == 0 {
                    return Err(Error::Parse(format!(
                        "{}:{}: lengths must be >= 1",
                        path.display(),
                        lineno + 1
                    )));
                }
                lengths.push(len);
            }
            if lengths.is_empty() {
                return Err(Error::EmptyBatch);
            }
            Ok(lengths)
        }
        WorkloadSource::Stats { avg, max, shape } => {
            if !avg.is_finite() || *avg < 1.0 || *avg >= *max as f64 {
                return Err(Error::InfeasibleStats {
                    avg: *avg,
                    max: *max,
                });
            }
            let cap = *max as f64;
            let mu = fit_lognormal_mu(*avg, cap, *shape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::StandardNormal;
            let mut lengths = Vec::with_capacity(spec.count);
            while lengths.len() < spec.count {
                let z: f64 = normal.sample(&mut rng);
                let x = (mu + shape * z).exp();
                if x <= cap {
                    lengths.push((x.round() as u64).clamp(1, *max));
                }
            }
            Ok(lengths)
        }
        WorkloadSource::Uniform { lo, hi } => {
            if *lo == 0 || lo > hi {
                return Err(Error::Validation {
                    field: "workload.source".into(),
                    reason: "need 1 <= lo <= hi".into(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..spec.count)
                .map(|_| rng.random_range(*lo..=*hi))
                .collect())
        }
    }
}

/// Write through a temp file and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "attnpipe".into())
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-stage utilization table, one
/// `stage busy_cycles span_cycles replication fraction` row per stage.
pub fn emit_utilization(trace: &PipelineTrace, path: &Path) -> Result<()> {
    let fractions = utilization(trace)?;
    let mut out = String::from("# stage busy_cycles span_cycles replication fraction\n");
    for (stage, fraction) in fractions.iter().enumerate() {
        let (lo, hi) = trace.stage_span(stage).unwrap_or((0, 0));
        out.push_str(&format!(
            "{stage} {} {} {} {fraction:.6}\n",
            trace.stage_busy(stage),
            hi - lo,
            trace.replication[stage]
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Hardware model shared by every schedule of one experiment.
struct ExperimentPlant<'a> {
    graph: &'a OperatorGraph,
    allocation: &'a StageAllocation,
    budget: ResourceBudget,
    layers: usize,
    buffer_depth: usize,
}

/// Simulate a length list as consecutive batches of `batch_size` (one batch
/// when `None`), concatenating the per-batch traces back to back.
fn simulate_batched<F>(
    plant: &ExperimentPlant<'_>,
    lengths: &[u64],
    batch_size: Option<usize>,
    run: F,
) -> Result<PipelineTrace>
where
    F: Fn(&PipelineConfig) -> Result<PipelineTrace>,
{
    let chunk = batch_size.unwrap_or(lengths.len()).max(1);
    let mut merged: Option<PipelineTrace> = None;
    let mut offset = 0u64;
    let mut task_base = 0usize;
    for piece in lengths.chunks(chunk) {
        let batch: Vec<SequenceTask> = piece
            .iter()
            .enumerate()
            .map(|(i, &len)| SequenceTask::new(task_base + i, len, i))
            .collect();
        task_base += piece.len();
        let config = PipelineConfig::new(
            plant.graph.clone(),
            plant.allocation.clone(),
            plant.budget,
            plant.layers,
            batch,
            plant.buffer_depth,
        )?;
        let mut trace = run(&config)?;
        for e in &mut trace.events {
            e.start += offset;
            e.end += offset;
        }
        offset = trace.events.iter().map(|e| e.end).max().unwrap_or(offset);
        match &mut merged {
            None => merged = Some(trace),
            Some(m) => {
                m.events.extend(trace.events);
                m.tasks.extend(trace.tasks);
            }
        }
    }
    let mut trace = merged.ok_or(Error::EmptyBatch)?;
    trace.makespan_cycles = trace.events.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(trace)
}

/// Workload statistics echoed into the report.
#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSummary {
    pub count: usize,
    pub mean: f64,
    pub min: u64,
    pub max: u64,
}

fn summarize_lengths(lengths: &[u64]) -> WorkloadSummary {
    let count = lengths.len();
    let sum: u64 = lengths.iter().sum();
    WorkloadSummary {
        count,
        mean: sum as f64 / count as f64,
        min: lengths.iter().copied().min().unwrap_or(0),
        max: lengths.iter().copied().max().unwrap_or(0),
    }
}

/// Numeric spot check of sparse against dense attention.
#[derive(Debug, Clone, Serialize)]
pub struct SpotCheck {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub bits: u8,
    /// `max |Z_sparse - Z_dense| / max |Z_dense|`.
    pub max_rel_error: f64,
    /// Mean fraction of the exact top-k recovered by quantized selection.
    pub topk_recall: f64,
}

/// Run the spot check on seeded Gaussian tensors.
pub fn spot_check(n: usize, d: usize, k: usize, bits: u8, seed: u64) -> Result<SpotCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut mat = || Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
    let q = mat();
    let key = mat();
    let v = mat();
    let problem = AttentionProblem::new(q, key, v)?;
    let dense = attention::dense_attention(&problem)?;
    let sparse = attention::sparse_attention(&problem, k, bits)?;

    let scale = dense.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let max_err = (&dense - &sparse.z)
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let max_rel_error = if scale > 0.0 { max_err / scale } else { 0.0 };

    // exact ranking oracle: scaled scores sorted descending, ties by index
    let k_eff = k.min(n);
    let mut recall_sum = 0.0;
    for i in 0..n {
        let q_row = problem.q().row(i);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|j| (q_row.dot(&problem.k().row(j)), j))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let exact: std::collections::BTreeSet<usize> =
            scored.iter().take(k_eff).map(|&(_, j)| j).collect();
        let hit = sparse.selection.rows[i]
            .iter()
            .filter(|j| exact.contains(j))
            .count();
        recall_sum += hit as f64 / k_eff as f64;
    }
    Ok(SpotCheck {
        n,
        d,
        k,
        bits,
        max_rel_error,
        topk_recall: recall_sum / n as f64,
    })
}

/// One schedule's results in the report.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleResult {
    pub label: String,
    pub makespan_cycles: u64,
    pub makespan_seconds: f64,
    pub utilization: Vec<f64>,
}

/// Everything `run_experiment` produces.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub workload: WorkloadSummary,
    pub s_avg: u64,
    pub stage_count: usize,
    pub stage_units: Vec<u64>,
    pub replication: Vec<u64>,
    pub schedules: Vec<ScheduleResult>,
    /// `baseline makespan / length-aware makespan` per baseline label.
    pub speedups: Vec<(String, f64)>,
    /// `baseline makespan - length-aware makespan` in cycles.
    pub saved_cycles: Vec<(String, i64)>,
    pub spot_check: SpotCheck,
    #[serde(skip)]
    pub traces: Vec<(String, PipelineTrace)>,
    #[serde(skip)]
    pub graph: OperatorGraph,
    #[serde(skip)]
    pub allocation: StageAllocation,
}

impl ExperimentReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("attnpipe experiment report\n");
        out.push_str("==========================\n");
        let (layers, hidden, heads) = self.config.model.dims();
        out.push_str(&format!(
            "model: {layers} layers, hidden {hidden}, {heads} heads; k={} bits={} seed={}\n",
            self.config.k, self.config.bits, self.config.seed
        ));
        out.push_str(&format!(
            "workload: {} sequences, mean {:.2}, min {}, max {}\n",
            self.workload.count, self.workload.mean, self.workload.min, self.workload.max
        ));
        out.push_str(&format!(
            "allocation: {} stages at s_avg={}, units per stage {:?}, replication {:?}\n",
            self.stage_count, self.s_avg, self.stage_units, self.replication
        ));
        out.push('\n');
        for s in &self.schedules {
            let util: Vec<String> = s.utilization.iter().map(|u| format!("{u:.4}")).collect();
            out.push_str(&format!(
                "{:<14} makespan {:>12} cycles  ({:.6e} s)  utilization [{}]\n",
                s.label,
                s.makespan_cycles,
                s.makespan_seconds,
                util.join(", ")
            ));
        }
        out.push('\n');
        for ((label, speedup), (_, saved)) in self.speedups.iter().zip(&self.saved_cycles) {
            out.push_str(&format!(
                "speedup vs {label}: {speedup:.4}  (saved {saved} cycles)\n"
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "spot check: n={} d={} k={} bits={}  max_rel_error={:.3e}  topk_recall={:.4}\n",
            self.spot_check.n,
            self.spot_check.d,
            self.spot_check.k,
            self.spot_check.bits,
            self.spot_check.max_rel_error,
            self.spot_check.topk_recall
        ));
        out
    }

    /// Machine-readable JSON.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Write the report, trace, allocation and diagram files into a
    /// directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.txt"), self.to_text().as_bytes())?;
        write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("graph.txt"), self.graph.to_text().as_bytes())?;
        write_atomic(
            &dir.join("allocation.txt"),
            self.allocation.to_text(&self.graph).as_bytes(),
        )?;
        for (label, trace) in &self.traces {
            write_atomic(
                &dir.join(format!("trace_{label}.txt")),
                trace.to_text().as_bytes(),
            )?;
            gantt::emit_gantt(trace, &dir.join(format!("gantt_{label}.svg")))?;
            emit_utilization(trace, &dir.join(format!("utilization_{label}.txt")))?;
        }
        Ok(())
    }
}

/// Build, allocate, simulate, compare and spot-check one configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let (model_layers, hidden, heads) = config.model.dims();
    let sim_layers = config.layers.unwrap_or(model_layers);

    let lengths = generate_workload(&config.workload, config.seed)?;
    let workload = summarize_lengths(&lengths);
    let s_avg = config
        .s_avg
        .unwrap_or_else(|| (workload.mean.round() as u64).max(1));

    let graph = build_encoder_graph(model_layers, hidden, heads, config.k)?;
    let mut allocation = allocate_stages_with(&graph, s_avg, &config.budget, &config.schedule)?;
    allocation.replication =
        enumerate_replication(&graph, &allocation, s_avg, &config.budget, &config.schedule);

    let plant = ExperimentPlant {
        graph: &graph,
        allocation: &allocation,
        budget: config.budget,
        layers: sim_layers,
        buffer_depth: config.buffer_depth,
    };
    let run_one = |run: &dyn Fn(&PipelineConfig) -> Result<PipelineTrace>| {
        simulate_batched(&plant, &lengths, config.batch_size, run)
    };
    let aware = run_one(&pipeline::simulate)?;
    let padded = run_one(&pipeline::baseline_padded)?;
    let micro = config.micro_batch;
    let microbatch = run_one(&move |c: &PipelineConfig| pipeline::baseline_microbatch(c, micro))?;

    let comparison: CompareReport = compare(
        ("length_aware", &aware),
        &[("padded", &padded), ("microbatch", &microbatch)],
    )?;

    let head_dim = hidden / heads;
    let spot_n = (s_avg as usize).clamp(4, 96);
    let spot = spot_check(spot_n, head_dim, config.k, config.bits, config.seed)?;

    let mut schedules = vec![ScheduleResult {
        label: comparison.subject.label.clone(),
        makespan_cycles: comparison.subject.makespan_cycles,
        makespan_seconds: comparison.subject.makespan_seconds,
        utilization: comparison.subject.utilization.clone(),
    }];
    let mut speedups = Vec::new();
    let mut saved = Vec::new();
    for entry in &comparison.baselines {
        schedules.push(ScheduleResult {
            label: entry.summary.label.clone(),
            makespan_cycles: entry.summary.makespan_cycles,
            makespan_seconds: entry.summary.makespan_seconds,
            utilization: entry.summary.utilization.clone(),
        });
        speedups.push((entry.summary.label.clone(), entry.speedup));
        saved.push((entry.summary.label.clone(), entry.saved_cycles));
    }

    let stage_units = (0..allocation.stage_count())
        .map(|s| allocation.stage_units(s))
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        workload,
        s_avg,
        stage_count: allocation.stage_count(),
        stage_units,
        replication: allocation.replication.clone(),
        schedules,
        speedups,
        saved_cycles: saved,
        spot_check: spot,
        traces: vec![
            ("length_aware".into(), aware),
            ("padded".into(), padded),
            ("microbatch".into(), microbatch),
        ],
        graph,
        allocation,
    })
}

/// `run_experiment` plus file emission into the configured output dir.
pub fn run_and_write(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let report = run_experiment(config)?;
    report.write_files(&config.output.dir)?;
    Ok(report)
}

//! Discrete-event simulation of the length-aware coarse-grained pipeline.
//!
//! Batches are sorted by decreasing length and streamed through the stage
//! allocation, layer after layer. A stage begins a work item as soon as the
//! predecessor stage has finished it and handed it through the inter-stage
//! buffer and one of its replicas is idle; a finished item enters the output
//! buffer when a slot is free and otherwise waits in the replica's output
//! register, holding that replica. The controller never idles a stage while
//! ready work exists. Time is integer cycles throughout, converted to
//! seconds only at the reporting edge. Inter-stage data movement is modeled
//! as zero-latency: with double buffering the transfer overlaps computation
//! and never appears on the critical path.
//!
//! Two baselines quantify what the length-aware schedule buys: padding the
//! whole batch to its maximum length, and per-micro-batch padding with a
//! pipeline drain between micro-batches.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use crate::encoder_graph::{
    stage_service_cycles, OperatorGraph, OperatorKind, ResourceBudget, StageAllocation,
};
use crate::error::{Error, Result};

/// One sequence in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SequenceTask {
    pub id: usize,
    /// Length in tokens, >= 1.
    pub length: u64,
    /// Position in the arriving batch; ties in the length sort keep it.
    pub arrival: usize,
}

impl SequenceTask {
    pub fn new(id: usize, length: u64, arrival: usize) -> Self {
        Self {
            id,
            length,
            arrival,
        }
    }
}

/// Batch of tasks from a plain length list, ids and arrivals by position.
pub fn batch_from_lengths(lengths: &[u64]) -> Vec<SequenceTask> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| SequenceTask::new(i, len, i))
        .collect()
}

/// Stable sort by decreasing length; equal lengths keep arrival order.
pub fn sort_batch(tasks: &[SequenceTask]) -> Result<Vec<SequenceTask>> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted = tasks.to_vec();
    sorted.sort_by_key(|t| (Reverse(t.length), t.arrival));
    Ok(sorted)
}

/// Controller state labels from the three-state dispatch machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ControllerState {
    StateMM,
    StateAtten,
    StateFF,
}

impl fmt::Display for ControllerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ControllerState::StateMM => "StateMM",
            ControllerState::StateAtten => "StateAtten",
            ControllerState::StateFF => "StateFF",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ControllerState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "StateMM" => Ok(ControllerState::StateMM),
            "StateAtten" => Ok(ControllerState::StateAtten),
            "StateFF" => Ok(ControllerState::StateFF),
            other => Err(Error::Parse(format!("unknown controller state `{other}`"))),
        }
    }
}

/// Controller state of each stage: the state of its highest-priority node.
/// Projections and pre-selection run under `StateMM`, candidate load,
/// scoring and aggregation under `StateAtten`, and everything from the
/// output projection on under `StateFF`.
pub fn stage_states(graph: &OperatorGraph, alloc: &StageAllocation) -> Vec<ControllerState> {
    // matmuls downstream of the attention aggregation belong to the
    // feed-forward phase
    let mut after_av = vec![false; graph.len()];
    let mut frontier: Vec<usize> = graph
        .nodes()
        .iter()
        .filter(|n| n.kind == OperatorKind::AttenAV)
        .map(|n| n.id)
        .collect();
    while let Some(u) = frontier.pop() {
        for &v in graph.successors(u) {
            if !after_av[v] {
                after_av[v] = true;
                frontier.push(v);
            }
        }
    }
    let node_state = |id: usize| -> ControllerState {
        match graph.node(id).kind {
            OperatorKind::AttenLoad | OperatorKind::AttenScore | OperatorKind::AttenAV => {
                ControllerState::StateAtten
            }
            OperatorKind::MatMul | OperatorKind::AttenSelect => {
                if after_av[id] {
                    ControllerState::StateFF
                } else {
                    ControllerState::StateMM
                }
            }
            _ => ControllerState::StateFF,
        }
    };
    alloc
        .stages
        .iter()
        .map(|stage| node_state(stage[0]))
        .collect()
}

/// Everything the simulator needs for one run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub graph: OperatorGraph,
    pub allocation: StageAllocation,
    pub budget: ResourceBudget,
    /// Encoder layers each task passes through, back to back.
    pub layers: usize,
    pub batch: Vec<SequenceTask>,
    /// Inter-stage buffer slots; 2 is a double buffer.
    pub buffer_depth: usize,
}

impl PipelineConfig {
    pub fn new(
        graph: OperatorGraph,
        allocation: StageAllocation,
        budget: ResourceBudget,
        layers: usize,
        batch: Vec<SequenceTask>,
        buffer_depth: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidConfig("layers must be >= 1".into()));
        }
        if buffer_depth == 0 {
            return Err(Error::InvalidConfig("buffer_depth must be >= 1".into()));
        }
        if allocation.parallelism.len() != graph.len()
            || allocation.inner_width.len() != graph.len()
            || allocation.replication.len() != allocation.stages.len()
            || allocation
                .stages
                .iter()
                .flatten()
                .any(|&id| id >= graph.len())
        {
            return Err(Error::InvalidConfig(
                "allocation does not match the operator graph".into(),
            ));
        }
        if batch.iter().any(|t| t.length == 0) {
            return Err(Error::InvalidConfig("task lengths must be >= 1".into()));
        }
        Ok(Self {
            graph,
            allocation,
            budget,
            layers,
            batch,
            buffer_depth,
        })
    }
}

/// Per-item latency of one stage at a sequence length, in seconds, amortized
/// over the stage's replication: `service_cycles / R / clock_hz`.
pub fn stage_latency(config: &PipelineConfig, stage: usize, length: u64) -> f64 {
    let cycles = stage_service_cycles(&config.graph, &config.allocation, stage, length);
    cycles as f64 / config.allocation.replication[stage] as f64 / config.budget.clock_hz as f64
}

/// One busy interval of one stage replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceEvent {
    pub stage: usize,
    pub replica: usize,
    pub task: usize,
    pub layer: usize,
    pub state: ControllerState,
    pub start: u64,
    pub end: u64,
}

/// Timestamped busy intervals of every stage replica, plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub events: Vec<TraceEvent>,
    /// (task id, true length) in processing (sorted) order.
    pub tasks: Vec<(usize, u64)>,
    pub stage_count: usize,
    pub replication: Vec<u64>,
    pub layers: usize,
    pub buffer_depth: usize,
    pub clock_hz: u64,
    pub makespan_cycles: u64,
}

impl PipelineTrace {
    pub fn makespan_seconds(&self) -> f64 {
        self.makespan_cycles as f64 / self.clock_hz as f64
    }

    /// Total busy cycles of a stage across its replicas.
    pub fn stage_busy(&self, stage: usize) -> u64 {
        self.events
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// `[first start, last end]` window of a stage.
    pub fn stage_span(&self, stage: usize) -> Option<(u64, u64)> {
        let mut span: Option<(u64, u64)> = None;
        for e in self.events.iter().filter(|e| e.stage == stage) {
            span = Some(match span {
                None => (e.start, e.end),
                Some((lo, hi)) => (lo.min(e.start), hi.max(e.end)),
            });
        }
        span
    }

    /// Idle cycles of a stage inside its own active window, per replica
    /// capacity: `R * span - busy`.
    pub fn stage_idle_cycles(&self, stage: usize) -> u64 {
        match self.stage_span(stage) {
            Some((lo, hi)) => self.replication[stage] * (hi - lo) - self.stage_busy(stage),
            None => 0,
        }
    }

    /// Stable line-oriented text form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# attnpipe pipeline trace v1\n");
        for (id, len) in &self.tasks {
            out.push_str(&format!("task {id} len={len}\n"));
        }
        for e in &self.events {
            out.push_str(&format!(
                "event stage={} replica={} task={} layer={} state={} start={} end={}\n",
                e.stage, e.replica, e.task, e.layer, e.state, e.start, e.end
            ));
        }
        let replication: Vec<String> = self.replication.iter().map(u64::to_string).collect();
        out.push_str(&format!("replication {}\n", replication.join(" ")));
        out.push_str(&format!(
            "summary stages={} layers={} tasks={} buffer_depth={} clock_hz={} makespan={}\n",
            self.stage_count,
            self.layers,
            self.tasks.len(),
            self.buffer_depth,
            self.clock_hz,
            self.makespan_cycles
        ));
        out
    }

    /// Parse the text form back.
    pub fn from_text(text: &str) -> Result<Self> {
        fn field(token: &str, key: &str) -> Result<String> {
            token
                .strip_prefix(key)
                .and_then(|t| t.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected `{key}=...`, found `{token}`")))
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad number `{s}`")))
        }

        let mut tasks = Vec::new();
        let mut events = Vec::new();
        let mut replication = Vec::new();
        let mut summary: Option<(usize, usize, usize, u64, u64)> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let parse_line = || -> Result<()> { Err(Error::Parse(format!("line {}", lineno + 1))) };
            match tokens[0] {
                "task" if tokens.len() == 3 => {
                    tasks.push((
                        num::<usize>(tokens[1])?,
                        num::<u64>(&field(tokens[2], "len")?)?,
                    ));
                }
                "event" if tokens.len() == 8 => {
                    events.push(TraceEvent {
                        stage: num(&field(tokens[1], "stage")?)?,
                        replica: num(&field(tokens[2], "replica")?)?,
                        task: num(&field(tokens[3], "task")?)?,
                        layer: num(&field(tokens[4], "layer")?)?,
                        state: field(tokens[5], "state")?.parse()?,
                        start: num(&field(tokens[6], "start")?)?,
                        end: num(&field(tokens[7], "end")?)?,
                    });
                }
                "replication" => {
                    replication = tokens[1..]
                        .iter()
                        .map(|t| num::<u64>(t))
                        .collect::<Result<_>>()?;
                }
                "summary" if tokens.len() == 7 => {
                    // tasks count (tokens[3]) is implied by the task lines
                    let stages = num(&field(tokens[1], "stages")?)?;
                    let layers = num(&field(tokens[2], "layers")?)?;
                    let buffer_depth = num(&field(tokens[4], "buffer_depth")?)?;
                    let clock_hz = num(&field(tokens[5], "clock_hz")?)?;
                    let makespan = num(&field(tokens[6], "makespan")?)?;
                    summary = Some((stages, layers, buffer_depth, clock_hz, makespan));
                }
                _ => parse_line()?,
            }
        }
        let (stage_count, layers, buffer_depth, clock_hz, makespan_cycles) =
            summary.ok_or_else(|| Error::Parse("missing summary line".into()))?;
        if events.is_empty() {
            return Err(Error::EmptyTrace);
        }
        if replication.len() != stage_count {
            return Err(Error::Parse(
                "replication does not match stage count".into(),
            ));
        }
        Ok(Self {
            events,
            tasks,
            stage_count,
            replication,
            layers,
            buffer_depth,
            clock_hz,
            makespan_cycles,
        })
    }

    /// Check causality, replica capacity and buffer-occupancy invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(format!("trace invariant: {msg}")));
        // dependency ordering per (task, layer, stage)
        let mut index = std::collections::BTreeMap::new();
        for e in &self.events {
            if index
                .insert((e.task, e.layer, e.stage), (e.start, e.end))
                .is_some()
            {
                return fail(format!(
                    "duplicate event for task {} layer {} stage {}",
                    e.task, e.layer, e.stage
                ));
            }
        }
        for (&(task, layer, stage), &(start, _)) in &index {
            if stage > 0 {
                let (_, prev_end) = index[&(task, layer, stage - 1)];
                if start < prev_end {
                    return fail(format!(
                        "task {task} layer {layer} stage {stage} starts early"
                    ));
                }
            } else if layer > 0 {
                let (_, prev_end) = index[&(task, layer - 1, self.stage_count - 1)];
                if start < prev_end {
                    return fail(format!("task {task} layer {layer} re-enters early"));
                }
            }
        }
        // per-stage concurrency never exceeds replication
        for stage in 0..self.stage_count {
            let mut deltas: Vec<(u64, i64)> = Vec::new();
            for e in self.events.iter().filter(|e| e.stage == stage) {
                deltas.push((e.start, 1));
                deltas.push((e.end, -1));
            }
            deltas.sort_by_key(|&(t, d)| (t, d)); // ends (-1) before starts (+1) at ties
            let mut level = 0i64;
            for (_, d) in deltas {
                level += d;
                if level > self.replication[stage] as i64 {
                    return fail(format!(
                        "stage {stage} exceeds {} replicas",
                        self.replication[stage]
                    ));
                }
            }
        }
        // finished-but-unconsumed items fit the buffer plus one output
        // register per replica (a full buffer parks the item in its replica)
        for stage in 0..self.stage_count.saturating_sub(1) {
            let mut deltas: Vec<(u64, i64)> = Vec::new();
            for e in self.events.iter().filter(|e| e.stage == stage) {
                deltas.push((e.end, 1));
            }
            for e in self.events.iter().filter(|e| e.stage == stage + 1) {
                deltas.push((e.start, -1));
            }
            deltas.sort_by_key(|&(t, d)| (t, d));
            let limit = (self.buffer_depth as u64 + self.replication[stage]) as i64;
            let mut level = 0i64;
            for (_, d) in deltas {
                level += d;
                if level > limit {
                    return fail(format!("buffer after stage {stage} exceeds depth"));
                }
            }
        }
        Ok(())
    }
}

/// Length-aware schedule: tasks sorted by decreasing length, true lengths.
pub fn simulate(config: &PipelineConfig) -> Result<PipelineTrace> {
    let sorted = sort_batch(&config.batch)?;
    let service = service_table(config, &sorted, None);
    run_engine(config, &sorted, &service)
}

/// Padding baseline: identical schedule, every task priced at the batch
/// maximum length.
pub fn baseline_padded(config: &PipelineConfig) -> Result<PipelineTrace> {
    let sorted = sort_batch(&config.batch)?;
    let max_len = sorted.iter().map(|t| t.length).max().unwrap_or(1);
    let service = service_table(config, &sorted, Some(max_len));
    run_engine(config, &sorted, &service)
}

/// Micro-batch baseline: the sorted batch is split into consecutive chunks
/// of `micro_size`, each padded to its own maximum and drained completely
/// before the next chunk enters.
pub fn baseline_microbatch(config: &PipelineConfig, micro_size: usize) -> Result<PipelineTrace> {
    if micro_size == 0 {
        return Err(Error::InvalidConfig("micro_size must be >= 1".into()));
    }
    let sorted = sort_batch(&config.batch)?;
    let mut events = Vec::new();
    let mut offset = 0u64;
    for chunk in sorted.chunks(micro_size) {
        let chunk_max = chunk.iter().map(|t| t.length).max().unwrap_or(1);
        let service = service_table(config, chunk, Some(chunk_max));
        let trace = run_engine_from(config, chunk, &service, offset)?;
        offset = trace.makespan_cycles;
        events.extend(trace.events);
    }
    let trace = finish_trace(config, &sorted, events)?;
    trace.validate()?;
    Ok(trace)
}

fn service_table(
    config: &PipelineConfig,
    tasks: &[SequenceTask],
    padded_to: Option<u64>,
) -> Vec<Vec<u64>> {
    let stages = config.allocation.stage_count();
    (0..stages)
        .map(|j| {
            tasks
                .iter()
                .map(|t| {
                    let len = padded_to.unwrap_or(t.length);
                    stage_service_cycles(&config.graph, &config.allocation, j, len)
                })
                .collect()
        })
        .collect()
}

fn run_engine(
    config: &PipelineConfig,
    sorted: &[SequenceTask],
    service: &[Vec<u64>],
) -> Result<PipelineTrace> {
    let trace = run_engine_from(config, sorted, service, 0)?;
    trace.validate()?;
    Ok(trace)
}

/// The event loop. `service[stage][pos]` is the per-replica busy time of the
/// item at sorted position `pos`.
///
/// A replica starts an item as soon as the item is ready (delivered by the
/// upstream buffer, or resident in the batch for stage 0) and the replica is
/// idle; starting consumes the item's upstream buffer slot. A finished item
/// moves into the stage's output buffer when a slot is free, otherwise it
/// waits in the replica's output register and holds the replica until the
/// downstream stage drains a slot. Simultaneously ready items dispatch by
/// ascending (layer, sorted position, stage); busy intervals record service
/// time only.
// (end cycle, stage, layer, sorted position, replica)
type FinishKey = (u64, usize, usize, usize, usize);

fn run_engine_from(
    config: &PipelineConfig,
    sorted: &[SequenceTask],
    service: &[Vec<u64>],
    t0: u64,
) -> Result<PipelineTrace> {
    let stages = config.allocation.stage_count();
    let layers = config.layers;
    let depth = config.buffer_depth;
    let states = stage_states(&config.graph, &config.allocation);

    struct Engine {
        stages: usize,
        layers: usize,
        depth: usize,
        free: Vec<BTreeSet<usize>>,
        ready: Vec<BTreeSet<(usize, usize)>>,
        // finished items resident in the buffer after each stage
        buffered: Vec<usize>,
        // finished items still holding their replica, keyed (layer, pos, replica)
        stuck: Vec<BTreeSet<(usize, usize, usize)>>,
    }

    impl Engine {
        // item (l, p) finished at stage j on `replica`: move it onward or
        // park it in the replica's output register
        fn finish(&mut self, j: usize, l: usize, p: usize, replica: usize) {
            if j + 1 == self.stages {
                self.free[j].insert(replica);
                if l + 1 < self.layers {
                    self.ready[0].insert((l + 1, p));
                }
            } else if self.buffered[j] < self.depth {
                self.buffered[j] += 1;
                self.ready[j + 1].insert((l, p));
                self.free[j].insert(replica);
            } else {
                self.stuck[j].insert((l, p, replica));
            }
        }

        // stage j consumed one upstream slot: release the earliest stuck
        // upstream item into it, if any
        fn drain_upstream(&mut self, j: usize) {
            let up = j - 1;
            self.buffered[up] -= 1;
            if let Some(&(l, p, replica)) = self.stuck[up].first() {
                self.stuck[up].remove(&(l, p, replica));
                self.buffered[up] += 1;
                self.ready[j].insert((l, p));
                self.free[up].insert(replica);
            }
        }
    }

    let mut engine = Engine {
        stages,
        layers,
        depth,
        free: (0..stages)
            .map(|j| (0..config.allocation.replication[j] as usize).collect())
            .collect(),
        ready: vec![BTreeSet::new(); stages],
        buffered: vec![0; stages.saturating_sub(1)],
        stuck: vec![BTreeSet::new(); stages.saturating_sub(1)],
    };
    for pos in 0..sorted.len() {
        engine.ready[0].insert((0, pos));
    }

    let mut heap: BinaryHeap<Reverse<FinishKey>> = BinaryHeap::new();
    let mut events = Vec::with_capacity(sorted.len() * layers * stages);

    let dispatch = |now: u64,
                    engine: &mut Engine,
                    heap: &mut BinaryHeap<Reverse<FinishKey>>,
                    events: &mut Vec<TraceEvent>| {
        loop {
            let mut best: Option<(usize, usize, usize)> = None;
            for j in 0..stages {
                if engine.free[j].is_empty() {
                    continue;
                }
                if let Some(&(l, p)) = engine.ready[j].first() {
                    let candidate = (l, p, j);
                    if best.is_none_or(|b| candidate < b) {
                        best = Some(candidate);
                    }
                }
            }
            let Some((l, p, j)) = best else { break };
            engine.ready[j].remove(&(l, p));
            let replica = *engine.free[j].first().expect("free replica checked");
            engine.free[j].remove(&replica);
            if j > 0 {
                engine.drain_upstream(j);
            }
            let end = now + service[j][p];
            events.push(TraceEvent {
                stage: j,
                replica,
                task: sorted[p].id,
                layer: l,
                state: states[j],
                start: now,
                end,
            });
            heap.push(Reverse((end, j, l, p, replica)));
        }
    };

    dispatch(t0, &mut engine, &mut heap, &mut events);
    while let Some(&Reverse((now, _, _, _, _))) = heap.peek() {
        let mut finished = Vec::new();
        while let Some(&Reverse((t, j, l, p, r))) = heap.peek() {
            if t != now {
                break;
            }
            heap.pop();
            finished.push((l, p, j, r));
        }
        finished.sort_unstable();
        for (l, p, j, r) in finished {
            engine.finish(j, l, p, r);
        }
        dispatch(now, &mut engine, &mut heap, &mut events);
    }

    finish_trace(config, sorted, events)
}

fn finish_trace(
    config: &PipelineConfig,
    sorted: &[SequenceTask],
    mut events: Vec<TraceEvent>,
) -> Result<PipelineTrace> {
    events.sort_by_key(|e| (e.start, e.stage, e.replica, e.layer, e.task));
    let makespan_cycles = events.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(PipelineTrace {
        events,
        tasks: sorted.iter().map(|t| (t.id, t.length)).collect(),
        stage_count: config.allocation.stage_count(),
        replication: config.allocation.replication.clone(),
        layers: config.layers,
        buffer_depth: config.buffer_depth,
        clock_hz: config.budget.clock_hz,
        makespan_cycles,
    })
}

/// Window convention for utilization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilizationWindow {
    /// Each stage measured over its own `[first start, last end]`,
    /// excluding global fill and drain.
    PerStage,
    /// Every stage measured over `[0, makespan]`.
    Global,
}

/// Busy fraction per stage over its own active window (per-stage-span
/// convention), normalized by replication.
pub fn utilization(trace: &PipelineTrace) -> Result<Vec<f64>> {
    utilization_windowed(trace, UtilizationWindow::PerStage)
}

pub fn utilization_windowed(trace: &PipelineTrace, window: UtilizationWindow) -> Result<Vec<f64>> {
    if trace.events.is_empty() {
        return Err(Error::EmptyTrace);
    }
    (0..trace.stage_count)
        .map(|stage| {
            let busy = trace.stage_busy(stage);
            let span = match window {
                UtilizationWindow::PerStage => {
                    let (lo, hi) = trace.stage_span(stage).unwrap_or((0, 0));
                    hi - lo
                }
                UtilizationWindow::Global => trace.makespan_cycles,
            };
            if span == 0 {
                return Ok(0.0);
            }
            Ok(busy as f64 / (trace.replication[stage] * span) as f64)
        })
        .collect()
}

/// Makespan and utilization of one schedule.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceSummary {
    pub label: String,
    pub makespan_cycles: u64,
    pub makespan_seconds: f64,
    pub utilization: Vec<f64>,
}

fn summarize(label: &str, trace: &PipelineTrace) -> Result<TraceSummary> {
    Ok(TraceSummary {
        label: label.to_string(),
        makespan_cycles: trace.makespan_cycles,
        makespan_seconds: trace.makespan_seconds(),
        utilization: utilization(trace)?,
    })
}

/// One baseline measured against the subject schedule.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareEntry {
    pub summary: TraceSummary,
    /// `baseline makespan / subject makespan`.
    pub speedup: f64,
    /// `baseline makespan - subject makespan`, in cycles.
    pub saved_cycles: i64,
}

/// Comparison of a subject schedule against baselines on the same workload.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareReport {
    pub subject: TraceSummary,
    pub baselines: Vec<CompareEntry>,
}

/// Compare a subject trace against baseline traces over the same workload.
pub fn compare(
    subject: (&str, &PipelineTrace),
    baselines: &[(&str, &PipelineTrace)],
) -> Result<CompareReport> {
    if baselines.is_empty() {
        return Err(Error::WorkloadMismatch("need at least two traces".into()));
    }
    let (subject_label, subject_trace) = subject;
    for (label, trace) in baselines {
        if trace.tasks != subject_trace.tasks || trace.layers != subject_trace.layers {
            return Err(Error::WorkloadMismatch(format!(
                "`{label}` does not cover the subject workload"
            )));
        }
    }
    let subject_summary = summarize(subject_label, subject_trace)?;
    let baselines = baselines
        .iter()
        .map(|(label, trace)| {
            Ok(CompareEntry {
                summary: summarize(label, trace)?,
                speedup: trace.makespan_cycles as f64 / subject_trace.makespan_cycles as f64,
                saved_cycles: trace.makespan_cycles as i64 - subject_trace.makespan_cycles as i64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport {
        subject: subject_summary,
        baselines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_graph::{allocate_stages, GraphBuilder, ScheduleParams};

    /// K single-node stages with per-token weights `rates` and unit widths,
    /// so stage service is exactly `rate * length` cycles.
    pub(crate) fn linear_pipeline(
        rates: &[u64],
        lengths: &[u64],
        layers: usize,
        depth: usize,
    ) -> PipelineConfig {
        let mut b = GraphBuilder::new();
        let ids: Vec<usize> = rates
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                b.node(
                    format!("s{i}"),
                    crate::encoder_graph::OperatorKind::MatMul,
                    a,
                    0,
                )
            })
            .collect();
        for pair in ids.windows(2) {
            b.edge(pair[0], pair[1]);
        }
        let graph = b.build().unwrap();
        let budget = ResourceBudget {
            compute_units: 1,
            clock_hz: 1_000_000,
        };
        let params = ScheduleParams {
            tile_width: 1,
            r_max: 8,
        };
        let alloc =
            crate::encoder_graph::allocate_stages_with(&graph, 1, &budget, &params).unwrap();
        assert_eq!(alloc.stage_count(), rates.len());
        PipelineConfig::new(
            graph,
            alloc,
            budget,
            layers,
            batch_from_lengths(lengths),
            depth,
        )
        .unwrap()
    }

    #[test]
    fn sort_batch_descending_stable() {
        let batch = batch_from_lengths(&[72, 140, 100, 88, 95]);
        let sorted = sort_batch(&batch).unwrap();
        let lens: Vec<u64> = sorted.iter().map(|t| t.length).collect();
        assert_eq!(lens, vec![140, 100, 95, 88, 72]);

        let equal = batch_from_lengths(&[7, 7, 7]);
        let sorted = sort_batch(&equal).unwrap();
        let ids: Vec<usize> = sorted.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);

        assert!(matches!(sort_batch(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn stage_latency_example() {
        // 2000 unit-ops over 200 units/cycle at 200 MHz: 10 cycles = 50 ns
        let mut b = GraphBuilder::new();
        b.node("m", crate::encoder_graph::OperatorKind::MatMul, 200, 0);
        let graph = b.build().unwrap();
        let budget = ResourceBudget {
            compute_units: 4000,
            clock_hz: 200_000_000,
        };
        let params = ScheduleParams {
            tile_width: 200,
            r_max: 8,
        };
        let alloc =
            crate::encoder_graph::allocate_stages_with(&graph, 10, &budget, &params).unwrap();
        let config =
            PipelineConfig::new(graph, alloc, budget, 1, batch_from_lengths(&[10]), 2).unwrap();
        let seconds = stage_latency(&config, 0, 10);
        assert!((seconds - 50e-9).abs() < 1e-18);
    }

    #[test]
    fn single_task_runs_stages_serially() {
        let config = linear_pipeline(&[3, 5, 2], &[7], 2, 2);
        let trace = simulate(&config).unwrap();
        // makespan = layers * sum of stage latencies at length 7
        assert_eq!(trace.makespan_cycles, 2 * (3 + 5 + 2) * 7);
        // no two events overlap anywhere
        for w in trace.events.windows(2) {
            assert!(w[1].start >= w[0].end || w[1].stage != w[0].stage);
        }
    }

    #[test]
    fn equal_tasks_fill_and_drain() {
        // B equal tasks, K equal stages of latency t, 1 layer:
        // makespan = (K + B - 1) * t
        let (k, b, t) = (3usize, 5usize, 4u64);
        let config = linear_pipeline(&[1, 1, 1], &vec![t; b], 1, 2);
        let trace = simulate(&config).unwrap();
        assert_eq!(trace.makespan_cycles, (k as u64 + b as u64 - 1) * t);
    }

    #[test]
    fn utilization_simple_cases() {
        let single = linear_pipeline(&[2], &[5], 1, 2);
        let trace = simulate(&single).unwrap();
        assert_eq!(utilization(&trace).unwrap(), vec![1.0]);

        let two = linear_pipeline(&[1, 1], &[6, 6], 1, 2);
        let trace = simulate(&two).unwrap();
        assert_eq!(utilization(&trace).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn sorted_batch_keeps_bottleneck_saturated() {
        // balanced linear stages, sorted batch: zero idle inside each
        // stage's own window
        let config = linear_pipeline(&[2, 2, 2], &[9, 8, 5, 5, 3], 2, 2);
        let trace = simulate(&config).unwrap();
        for stage in 0..3 {
            assert_eq!(trace.stage_idle_cycles(stage), 0, "stage {stage}");
        }
    }

    #[test]
    fn padded_baseline_prices_every_task_at_max() {
        let config = linear_pipeline(&[1, 1], &[100, 50], 1, 2);
        let aware = simulate(&config).unwrap();
        let padded = baseline_padded(&config).unwrap();
        // stage work doubles for the shorter task
        assert_eq!(padded.stage_busy(0), 200);
        assert_eq!(aware.stage_busy(0), 150);
        assert!(padded.makespan_cycles >= aware.makespan_cycles);
        // same workload metadata: true lengths are preserved
        assert_eq!(padded.tasks, aware.tasks);
    }

    #[test]
    fn padding_is_noop_on_equal_lengths() {
        let config = linear_pipeline(&[2, 3], &[10, 10, 10], 2, 2);
        let aware = simulate(&config).unwrap();
        let padded = baseline_padded(&config).unwrap();
        assert_eq!(aware.makespan_cycles, padded.makespan_cycles);
        assert_eq!(aware.events, padded.events);
    }

    #[test]
    fn microbatch_degenerate_cases() {
        let config = linear_pipeline(&[1, 2], &[9, 7, 5, 3], 2, 2);
        let padded = baseline_padded(&config).unwrap();
        let full = baseline_microbatch(&config, 4).unwrap();
        assert_eq!(full.makespan_cycles, padded.makespan_cycles);

        let aware = simulate(&config).unwrap();
        let single = baseline_microbatch(&config, 1).unwrap();
        assert!(single.makespan_cycles >= aware.makespan_cycles);

        let mid = baseline_microbatch(&config, 2).unwrap();
        assert!(mid.makespan_cycles <= single.makespan_cycles);
        assert!(mid.makespan_cycles >= aware.makespan_cycles);
    }

    #[test]
    fn work_is_conserved() {
        let config = linear_pipeline(&[3, 1, 2], &[11, 4, 7], 3, 2);
        let trace = simulate(&config).unwrap();
        for stage in 0..3 {
            let expected: u64 = config
                .batch
                .iter()
                .map(|t| t.length * config.graph.node(stage).per_token * config.layers as u64)
                .sum();
            assert_eq!(trace.stage_busy(stage), expected);
        }
    }

    #[test]
    fn compare_reports_ratio_and_saved() {
        let config = linear_pipeline(&[1, 1], &[10, 2, 2], 1, 2);
        let aware = simulate(&config).unwrap();
        let padded = baseline_padded(&config).unwrap();
        let report = compare(("aware", &aware), &[("padded", &padded)]).unwrap();
        let entry = &report.baselines[0];
        assert!(
            (entry.speedup - padded.makespan_cycles as f64 / aware.makespan_cycles as f64).abs()
                < 1e-12
        );
        assert_eq!(
            entry.saved_cycles,
            padded.makespan_cycles as i64 - aware.makespan_cycles as i64
        );

        let identical = compare(("a", &aware), &[("b", &aware)]).unwrap();
        assert_eq!(identical.baselines[0].speedup, 1.0);
        assert_eq!(identical.baselines[0].saved_cycles, 0);
    }

    #[test]
    fn compare_rejects_different_workloads() {
        let a = simulate(&linear_pipeline(&[1], &[5, 4], 1, 2)).unwrap();
        let b = simulate(&linear_pipeline(&[1], &[5, 3], 1, 2)).unwrap();
        assert!(matches!(
            compare(("a", &a), &[("b", &b)]),
            Err(Error::WorkloadMismatch(_))
        ));
    }

    #[test]
    fn trace_text_round_trip() {
        let config = linear_pipeline(&[2, 1], &[6, 3], 2, 2);
        let trace = simulate(&config).unwrap();
        let text = trace.to_text();
        let parsed = PipelineTrace::from_text(&text).unwrap();
        assert_eq!(parsed, trace);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = linear_pipeline(&[2, 3, 1], &[9, 9, 5, 4, 4, 1], 3, 2);
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn traces_validate() {
        let config = linear_pipeline(&[2, 5, 1], &[8, 6, 4], 2, 2);
        let trace = simulate(&config).unwrap();
        trace.validate().unwrap();
    }

    #[test]
    fn replicas_run_items_concurrently() {
        let mut config = linear_pipeline(&[1], &[10, 10, 10, 10], 1, 2);
        config.allocation.replication = vec![2];
        let trace = simulate(&config).unwrap();
        // two replicas halve the makespan of four equal tasks
        assert_eq!(trace.makespan_cycles, 20);
        assert!(trace.events.iter().any(|e| e.replica == 1));
        trace.validate().unwrap();
        assert_eq!(utilization(&trace).unwrap(), vec![1.0]);
        // amortized per-item latency reflects the replication
        assert!((stage_latency(&config, 0, 10) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn stage_states_follow_operator_phases() {
        let graph = crate::encoder_graph::build_encoder_graph(1, 16, 2, 4).unwrap();
        let budget = ResourceBudget {
            compute_units: 64,
            clock_hz: 1,
        };
        let alloc = allocate_stages(&graph, 32, &budget).unwrap();
        let states = stage_states(&graph, &alloc);
        assert_eq!(states.len(), alloc.stage_count());
        // the first stage starts with a projection, the last with
        // feed-forward work
        assert_eq!(states[0], ControllerState::StateMM);
        assert_eq!(*states.last().unwrap(), ControllerState::StateFF);
        assert!(states.contains(&ControllerState::StateAtten));
    }
}

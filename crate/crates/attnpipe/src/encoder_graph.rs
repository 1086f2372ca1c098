//! Encoder operator DAG, critical-path priorities and stage allocation.
//!
//! Every operator carries a length-linear cost `W(v, s) = a*s + c` in unit
//! operations, where one unit is one 8-bit multiply-accumulate and one
//! compute unit performs one unit operation per cycle. Node priorities are
//! maximum-weight paths to the sink; stage allocation walks nodes in
//! decreasing priority, balancing the parallelism of stage members with
//! ceil-ratio updates and opening a new stage whenever the compute-unit
//! budget would overflow. A bottleneck-raising search then assigns each
//! stage a replication factor.

use std::fmt;

use crate::error::{Error, Result};

/// Operator classes of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    MatMul,
    AttenSelect,
    AttenLoad,
    AttenScore,
    AttenAV,
    Add,
    LayerNorm,
    Gelu,
    /// Zero-weight bookkeeping node appended when the graph has several
    /// natural sinks. Never scheduled.
    VirtualSink,
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperatorKind::MatMul => "MatMul",
            OperatorKind::AttenSelect => "AttenSelect",
            OperatorKind::AttenLoad => "AttenLoad",
            OperatorKind::AttenScore => "AttenScore",
            OperatorKind::AttenAV => "AttenAV",
            OperatorKind::Add => "Add",
            OperatorKind::LayerNorm => "LayerNorm",
            OperatorKind::Gelu => "Gelu",
            OperatorKind::VirtualSink => "VirtualSink",
        };
        f.write_str(s)
    }
}

/// One operator with its length-linear cost coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorNode {
    pub id: usize,
    pub name: String,
    pub kind: OperatorKind,
    /// Unit operations per token.
    pub per_token: u64,
    /// Unit operations per sequence, independent of length.
    pub fixed: u64,
}

impl OperatorNode {
    pub fn is_virtual_sink(&self) -> bool {
        self.kind == OperatorKind::VirtualSink
    }
}

/// Cost of an operator at sequence length `s`: `W(v, s) = a*s + c`.
pub fn operator_weight(node: &OperatorNode, s: u64) -> u64 {
    node.per_token * s + node.fixed
}

/// Incrementally assembles an [`OperatorGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<OperatorNode>,
    edges: Vec<(usize, usize)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add an operator; returns its id.
    pub fn node(
        &mut self,
        name: impl Into<String>,
        kind: OperatorKind,
        per_token: u64,
        fixed: u64,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(OperatorNode {
            id,
            name: name.into(),
            kind,
            per_token,
            fixed,
        });
        id
    }

    pub fn edge(&mut self, from: usize, to: usize) {
        self.edges.push((from, to));
    }

    pub fn build(self) -> Result<OperatorGraph> {
        OperatorGraph::new(self.nodes, self.edges)
    }
}

/// Dependency DAG of encoder operators with a unique sink.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorGraph {
    nodes: Vec<OperatorNode>,
    edges: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    topo: Vec<usize>,
    sink: usize,
}

impl OperatorGraph {
    /// Validate and normalize: ids must be contiguous, the graph acyclic,
    /// every real node must carry positive work, and a zero-weight virtual
    /// sink is appended when several natural sinks exist.
    pub fn new(mut nodes: Vec<OperatorNode>, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidConfig("graph has no nodes".into()));
        }
        for (idx, node) in nodes.iter().enumerate() {
            if node.id != idx {
                return Err(Error::InvalidConfig(format!(
                    "node ids must be contiguous, found {} at position {idx}",
                    node.id
                )));
            }
            if !node.is_virtual_sink() && node.per_token + node.fixed == 0 {
                return Err(Error::InvalidConfig(format!(
                    "node {} ({}) has zero weight",
                    node.id, node.name
                )));
            }
        }
        for &(u, v) in &edges {
            if u >= nodes.len() || v >= nodes.len() || u == v {
                return Err(Error::InvalidConfig(format!("bad edge ({u}, {v})")));
            }
        }

        let mut sinks: Vec<usize> = (0..nodes.len())
            .filter(|&i| edges.iter().all(|&(u, _)| u != i))
            .collect();
        if sinks.is_empty() {
            return Err(Error::CyclicGraph);
        }
        if sinks.len() > 1 {
            let sink_id = nodes.len();
            nodes.push(OperatorNode {
                id: sink_id,
                name: "sink".into(),
                kind: OperatorKind::VirtualSink,
                per_token: 0,
                fixed: 0,
            });
            for s in sinks {
                edges.push((s, sink_id));
            }
            sinks = vec![sink_id];
        }

        let n = nodes.len();
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(u, v) in &edges {
            succ[u].push(v);
            pred[v].push(u);
        }
        for list in succ.iter_mut().chain(pred.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        // Kahn's algorithm; a leftover node means a cycle
        let mut indegree: Vec<usize> = pred.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        queue.sort_unstable();
        let mut topo = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            topo.push(u);
            for &v in &succ[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push(v);
                }
            }
        }
        if topo.len() != n {
            return Err(Error::CyclicGraph);
        }

        Ok(Self {
            nodes,
            edges,
            succ,
            pred,
            topo,
            sink: sinks[0],
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &OperatorNode {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, id: usize) -> &[usize] {
        &self.succ[id]
    }

    pub fn predecessors(&self, id: usize) -> &[usize] {
        &self.pred[id]
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    /// Node ids of every real (non-virtual) operator.
    pub fn real_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .filter(|n| !n.is_virtual_sink())
            .map(|n| n.id)
    }

    /// Stable text form: node list, edge list, sink id.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# attnpipe operator graph v1\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "node {} {} {} a={} c={}\n",
                n.id, n.name, n.kind, n.per_token, n.fixed
            ));
        }
        let mut edges = self.edges.clone();
        edges.sort_unstable();
        for (u, v) in edges {
            out.push_str(&format!("edge {u} {v}\n"));
        }
        out.push_str(&format!("sink {}\n", self.sink));
        out
    }
}

/// Priorities from the critical-path recurrence
/// `P(v) = W(v, s_avg) + max over successors of P`, with
/// `P(sink) = W(sink, s_avg)`: the maximum-weight path from `v` to the sink.
pub fn compute_priorities(graph: &OperatorGraph, s_avg: u64) -> Result<Vec<u64>> {
    let mut priority = vec![0u64; graph.len()];
    for &id in graph.topo.iter().rev() {
        let own = operator_weight(graph.node(id), s_avg);
        let tail = graph
            .successors(id)
            .iter()
            .map(|&s| priority[s])
            .max()
            .unwrap_or(0);
        priority[id] = own + tail;
    }
    Ok(priority)
}

/// Compute-unit budget: DSP-equivalent units (one 8-bit MAC per unit per
/// cycle) and the clock they run at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResourceBudget {
    pub compute_units: u64,
    pub clock_hz: u64,
}

impl Default for ResourceBudget {
    fn default() -> Self {
        Self {
            compute_units: 3000,
            clock_hz: 200_000_000,
        }
    }
}

/// Allocation knobs: the inner-parallelism tile cap and the replication
/// search bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleParams {
    /// One operator instance processes up to this many MACs per cycle.
    pub tile_width: u64,
    /// Largest replication factor tried per stage.
    pub r_max: u64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            tile_width: 64,
            r_max: 8,
        }
    }
}

/// Compute units consumed by one instance of an operator: its per-token MAC
/// width capped at the tile size. The virtual sink costs nothing.
pub fn units_per_instance(node: &OperatorNode, params: &ScheduleParams) -> u64 {
    if node.is_virtual_sink() {
        return 0;
    }
    node.per_token.max(1).min(params.tile_width)
}

/// Units consumed by a stage: `sum over nodes of N(v) * units_per_instance`.
/// `parallelism` is indexed by node id.
pub fn stage_resource_cost(
    graph: &OperatorGraph,
    stage: &[usize],
    parallelism: &[u64],
    params: &ScheduleParams,
) -> u64 {
    stage
        .iter()
        .map(|&id| parallelism[id] * units_per_instance(graph.node(id), params))
        .sum()
}

/// One entry of the allocation's replayable visit log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VisitStep {
    /// `node` opened stage `stage` (parallelism stays 1).
    Opened { stage: usize, node: usize },
    /// `node` joined stage `stage`; each `(member, factor)` records the
    /// ceil-ratio multiplier applied to an existing member's parallelism.
    Joined {
        stage: usize,
        node: usize,
        updates: Vec<(usize, u64)>,
    },
}

/// Partition of the operator graph into pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageAllocation {
    /// Node ids per stage, in decreasing-priority visit order.
    pub stages: Vec<Vec<usize>>,
    /// Parallelism `N(v)`, indexed by node id (1 for the virtual sink).
    pub parallelism: Vec<u64>,
    /// MACs per cycle of one instance, indexed by node id.
    pub inner_width: Vec<u64>,
    /// Replication factor per stage, all 1 until
    /// [`enumerate_replication`] raises them.
    pub replication: Vec<u64>,
    /// Replayable record of every allocation decision.
    pub visit_log: Vec<VisitStep>,
}

impl StageAllocation {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Stage index containing a node.
    pub fn stage_of(&self, node: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.contains(&node))
    }

    /// Units consumed by one replica of a stage.
    pub fn stage_units(&self, stage: usize) -> u64 {
        self.stages[stage]
            .iter()
            .map(|&id| self.parallelism[id] * self.inner_width[id])
            .sum()
    }

    /// Stable text form: stage membership, replication, per-node parallelism.
    pub fn to_text(&self, graph: &OperatorGraph) -> String {
        let mut out = String::from("# attnpipe stage allocation v1\n");
        for (idx, stage) in self.stages.iter().enumerate() {
            let ids: Vec<String> = stage.iter().map(|id| id.to_string()).collect();
            out.push_str(&format!(
                "stage {idx} r={} units={} nodes={}\n",
                self.replication[idx],
                self.stage_units(idx),
                ids.join(",")
            ));
        }
        for stage in &self.stages {
            for &id in stage {
                out.push_str(&format!(
                    "node {id} {} n={} width={}\n",
                    graph.node(id).name,
                    self.parallelism[id],
                    self.inner_width[id]
                ));
            }
        }
        out
    }
}

/// Stage allocation with default [`ScheduleParams`].
pub fn allocate_stages(
    graph: &OperatorGraph,
    s_avg: u64,
    budget: &ResourceBudget,
) -> Result<StageAllocation> {
    allocate_stages_with(graph, s_avg, budget, &ScheduleParams::default())
}

/// Walk real nodes in decreasing priority (ties by ascending id). A node
/// tentatively enters the current stage with parallelism 1 while every
/// member `v_j` is scaled by `ceil(W(v_j)/W(v_i))`; the node joins if the
/// scaled stage still fits the budget, otherwise it opens a new stage.
pub fn allocate_stages_with(
    graph: &OperatorGraph,
    s_avg: u64,
    budget: &ResourceBudget,
    params: &ScheduleParams,
) -> Result<StageAllocation> {
    let priorities = compute_priorities(graph, s_avg)?;
    let mut order: Vec<usize> = graph.real_nodes().collect();
    order.sort_by_key(|&id| (std::cmp::Reverse(priorities[id]), id));
    if order.is_empty() {
        return Err(Error::InvalidConfig("graph has no real nodes".into()));
    }

    for &id in &order {
        let required = units_per_instance(graph.node(id), params);
        if required > budget.compute_units {
            return Err(Error::NodeExceedsBudget {
                node: id,
                required,
                budget: budget.compute_units,
            });
        }
    }

    let mut parallelism = vec![1u64; graph.len()];
    let mut stages: Vec<Vec<usize>> = Vec::new();
    let mut visit_log = Vec::new();

    for &id in &order {
        let weight = operator_weight(graph.node(id), s_avg);
        if let Some(current) = stages.last_mut() {
            // tentative parallelism for existing members
            let mut tentative = parallelism.clone();
            let mut updates = Vec::with_capacity(current.len());
            for &member in current.iter() {
                let member_weight = operator_weight(graph.node(member), s_avg);
                let factor = member_weight.div_ceil(weight);
                tentative[member] = parallelism[member] * factor;
                updates.push((member, factor));
            }
            let mut candidate = current.clone();
            candidate.push(id);
            if stage_resource_cost(graph, &candidate, &tentative, params) <= budget.compute_units {
                current.push(id);
                parallelism = tentative;
                visit_log.push(VisitStep::Joined {
                    stage: stages.len() - 1,
                    node: id,
                    updates,
                });
                continue;
            }
        }
        stages.push(vec![id]);
        visit_log.push(VisitStep::Opened {
            stage: stages.len() - 1,
            node: id,
        });
    }

    let inner_width = graph
        .nodes()
        .iter()
        .map(|n| units_per_instance(n, params).max(1))
        .collect();
    let replication = vec![1; stages.len()];
    Ok(StageAllocation {
        stages,
        parallelism,
        inner_width,
        replication,
        visit_log,
    })
}

/// Per-replica service time of a stage in cycles at sequence length `s`:
/// `sum over stage nodes of ceil(W(v, s) / (N(v) * width(v)))`.
pub fn stage_service_cycles(
    graph: &OperatorGraph,
    alloc: &StageAllocation,
    stage: usize,
    s: u64,
) -> u64 {
    alloc.stages[stage]
        .iter()
        .map(|&id| {
            let w = operator_weight(graph.node(id), s);
            w.div_ceil(alloc.parallelism[id] * alloc.inner_width[id])
        })
        .sum()
}

/// Replication factors maximizing the modeled pipeline throughput
/// `min over stages of R_k / service_cycles_k(s_avg)` subject to
/// `sum R_k * stage_units_k <= budget` and `R_k <= r_max`.
///
/// The search raises the bottleneck stage one replica at a time (ties to
/// the earliest stage), which walks exactly the frontier of allocations
/// that can improve the minimum; when all ones already exceed the budget,
/// that floor is returned unchanged.
pub fn enumerate_replication(
    graph: &OperatorGraph,
    alloc: &StageAllocation,
    s_avg: u64,
    budget: &ResourceBudget,
    params: &ScheduleParams,
) -> Vec<u64> {
    let stage_count = alloc.stage_count();
    let latency: Vec<u64> = (0..stage_count)
        .map(|k| stage_service_cycles(graph, alloc, k, s_avg).max(1))
        .collect();
    let units: Vec<u64> = (0..stage_count).map(|k| alloc.stage_units(k)).collect();

    let mut replication = vec![1u64; stage_count];
    let mut total: u64 = units.iter().sum();
    loop {
        // bottleneck: smallest R/L, ties to the earliest stage
        let bottleneck = (0..stage_count)
            .min_by(|&a, &b| {
                let lhs = u128::from(replication[a]) * u128::from(latency[b]);
                let rhs = u128::from(replication[b]) * u128::from(latency[a]);
                lhs.cmp(&rhs).then(a.cmp(&b))
            })
            .expect("at least one stage");
        if replication[bottleneck] >= params.r_max
            || total + units[bottleneck] > budget.compute_units
        {
            break;
        }
        replication[bottleneck] += 1;
        total += units[bottleneck];
    }
    replication
}

/// Model presets from the evaluation configurations.
pub mod presets {
    /// (layers, hidden, heads)
    pub const DISTILBERT: (usize, usize, usize) = (6, 768, 12);
    pub const BERT_BASE: (usize, usize, usize) = (12, 768, 12);
    pub const BERT_LARGE: (usize, usize, usize) = (24, 1024, 16);
}

/// One encoder layer's operator DAG with closed-form MAC coefficients.
///
/// Projections and feed-forward matmuls carry their per-token MAC counts
/// (`hidden^2`, `4*hidden^2` with the standard `ff = 4*hidden`). Attention
/// operators are linear in length with slope proportional to `k`: candidate
/// load moves `2*k*hidden` words, exact re-scoring and value aggregation
/// each run `k*hidden` MACs per token. The quantized pre-selection is priced
/// at its quantization and merge-select bookkeeping (`2*hidden + 4*k` per
/// token); its low-bit LUT products run on lookup-table fabric outside the
/// compute-unit budget and are accounted separately by
/// [`crate::attention::OpCounts`].
pub fn build_encoder_graph(
    layers: usize,
    hidden: usize,
    heads: usize,
    k: usize,
) -> Result<OperatorGraph> {
    if layers == 0 || hidden == 0 || heads == 0 || k == 0 {
        return Err(Error::InvalidConfig(
            "layers, hidden, heads and k must be positive".into(),
        ));
    }
    if !hidden.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "hidden {hidden} not divisible by {heads} heads"
        )));
    }
    let h = hidden as u64;
    let k = k as u64;
    let heads = heads as u64;
    let ff = 4 * h;

    let mut b = GraphBuilder::new();
    let q_proj = b.node("q_proj", OperatorKind::MatMul, h * h, 0);
    let k_proj = b.node("k_proj", OperatorKind::MatMul, h * h, 0);
    let v_proj = b.node("v_proj", OperatorKind::MatMul, h * h, 0);
    let select = b.node("atten_select", OperatorKind::AttenSelect, 2 * h + 4 * k, 0);
    let load = b.node("atten_load", OperatorKind::AttenLoad, 2 * k * h, 0);
    let score = b.node(
        "atten_score",
        OperatorKind::AttenScore,
        k * h + k * heads,
        0,
    );
    let av = b.node("atten_av", OperatorKind::AttenAV, k * h + h, 0);
    let out_proj = b.node("out_proj", OperatorKind::MatMul, h * h, 0);
    let add1 = b.node("add_residual_1", OperatorKind::Add, h, 0);
    let ln1 = b.node("layer_norm_1", OperatorKind::LayerNorm, 5 * h, 32);
    let ffn1 = b.node("ffn_in", OperatorKind::MatMul, h * ff, 0);
    let gelu = b.node("gelu", OperatorKind::Gelu, 4 * ff, 0);
    let ffn2 = b.node("ffn_out", OperatorKind::MatMul, ff * h, 0);
    let add2 = b.node("add_residual_2", OperatorKind::Add, h, 0);
    let ln2 = b.node("layer_norm_2", OperatorKind::LayerNorm, 5 * h, 32);

    b.edge(q_proj, select);
    b.edge(k_proj, select);
    b.edge(select, load);
    b.edge(k_proj, load);
    b.edge(v_proj, load);
    b.edge(q_proj, score);
    b.edge(load, score);
    b.edge(score, av);
    b.edge(av, out_proj);
    b.edge(out_proj, add1);
    b.edge(add1, ln1);
    b.edge(ln1, ffn1);
    b.edge(ffn1, gelu);
    b.edge(gelu, ffn2);
    b.edge(ffn2, add2);
    b.edge(ln1, add2); // residual around the feed-forward block
    b.edge(add2, ln2);
    b.build()
}

//! Material-graph DAG: generator/proxy nodes and filter nodes composed into
//! SVBRDF maps, with every generator node swappable between its original
//! pattern generator and a differentiable proxy.
//!
//! Runtime parameter storage is normalized ([0,1] per coordinate), which
//! makes collect/apply round trips bitwise and keeps optimization
//! box-constrained. Graph files store raw parameter values for hand
//! authoring; the loader normalizes and validates against the registries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, FilterKind};
use crate::generators::{self, ParamVector};
use crate::paramspace;
use crate::proxynet::ProxyModel;
use crate::render::MapsT;
use crate::tensor::{Tape, Tensor};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    Original,
    Proxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum OutputChannel {
    Albedo,
    Normal,
    Roughness,
    Metallic,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Generator {
        generator: String,
        spec_hash: String,
        /// Normalized parameter vector (unit cube).
        params_norm: Vec<f64>,
        seed: u64,
        mode: GeneratorMode,
    },
    Filter {
        filter: FilterKind,
        /// Normalized parameter vector (unit cube).
        params_norm: Vec<f64>,
    },
    /// Identity marker binding a wire to a named output map.
    Output { channel: OutputChannel },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    #[serde(default)]
    pub src_slot: usize,
    pub dst: String,
    pub dst_slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputBindings {
    pub albedo: String,
    pub normal: String,
    pub roughness: String,
    pub metallic: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub outputs: OutputBindings,
}

/// SVBRDF map bundle as plain arrays.
#[derive(Clone, Debug)]
pub struct MaterialMaps {
    pub albedo: Array3<f64>,
    pub normal: Array3<f64>,
    pub roughness: Array2<f64>,
    pub metallic: Array2<f64>,
}

impl MaterialMaps {
    pub fn resolution(&self) -> (usize, usize) {
        self.roughness.dim()
    }

    /// Type invariants: common resolution, unit-length normals (1e-3),
    /// roughness/metallic inside [0,1].
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution();
        if self.albedo.dim() != (3, h, w) || self.normal.dim() != (3, h, w) || self.metallic.dim() != (h, w) {
            return Err(Error::Graph("material map resolutions differ".into()));
        }
        for y in 0..h {
            for x in 0..w {
                let n = [
                    self.normal[[0, y, x]] * 2.0 - 1.0,
                    self.normal[[1, y, x]] * 2.0 - 1.0,
                    self.normal[[2, y, x]] * 2.0 - 1.0,
                ];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > 1e-3 {
                    return Err(Error::Numeric(format!(
                        "normal at ({y},{x}) has length {len}"
                    )));
                }
                for (name, v) in [
                    ("roughness", self.roughness[[y, x]]),
                    ("metallic", self.metallic[[y, x]]),
                ] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Numeric(format!("{name} at ({y},{x}) = {v}")));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File format (raw parameter values)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    nodes: Vec<NodeFile>,
    edges: Vec<Edge>,
    outputs: OutputBindings,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeFileKind {
    Generator {
        generator: String,
        spec_hash: String,
        params: Vec<f64>,
        seed: u64,
        mode: GeneratorMode,
    },
    Filter {
        filter: FilterKind,
        params: Vec<f64>,
    },
    Output { channel: OutputChannel },
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    id: String,
    #[serde(flatten)]
    kind: NodeFileKind,
}

impl MaterialGraph {
    /// Serialize with raw parameter units (the hand-authorable form).
    pub fn to_file_value(&self) -> Result<serde_json::Value> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| -> Result<NodeFile> {
                let kind = match &n.kind {
                    NodeKind::Generator {
                        generator,
                        spec_hash,
                        params_norm,
                        seed,
                        mode,
                    } => {
                        let spec = generators::generator_spec(generator)?;
                        NodeFileKind::Generator {
                            generator: generator.clone(),
                            spec_hash: spec_hash.clone(),
                            params: paramspace::denormalize(params_norm, spec)?,
                            seed: *seed,
                            mode: *mode,
                        }
                    }
                    NodeKind::Filter { filter, params_norm } => NodeFileKind::Filter {
                        filter: *filter,
                        params: filters::denormalize_values(*filter, params_norm)?,
                    },
                    NodeKind::Output { channel } => NodeFileKind::Output { channel: *channel },
                };
                Ok(NodeFile {
                    id: n.id.clone(),
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::to_value(GraphFile {
            version: GRAPH_FORMAT_VERSION,
            nodes,
            edges: self.edges.clone(),
            outputs: self.outputs.clone(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json_pretty(path, &self.to_file_value()?)
    }

    pub fn load(path: &Path) -> Result<MaterialGraph> {
        let file: GraphFile = crate::util::read_json(path)?;
        if file.version != GRAPH_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported graph format version {}",
                file.version
            )));
        }
        let nodes = file
            .nodes
            .into_iter()
            .map(|n| -> Result<Node> {
                let kind = match n.kind {
                    NodeFileKind::Generator {
                        generator,
                        spec_hash,
                        params,
                        seed,
                        mode,
                    } => {
                        let spec = generators::generator_spec(&generator)?;
                        if spec_hash != spec.version_hash {
                            return Err(Error::SpecHashMismatch {
                                expected: spec.version_hash.clone(),
                                got: spec_hash,
                            });
                        }
                        let pv = ParamVector {
                            spec_hash: spec.version_hash.clone(),
                            values: params,
                            seed,
                        };
                        NodeKind::Generator {
                            generator,
                            spec_hash: spec.version_hash.clone(),
                            params_norm: paramspace::normalize(&pv, spec)?,
                            seed,
                            mode,
                        }
                    }
                    NodeFileKind::Filter { filter, params } => NodeKind::Filter {
                        filter,
                        params_norm: filters::normalize_values(filter, &params)?,
                    },
                    NodeFileKind::Output { channel } => NodeKind::Output { channel },
                };
                Ok(Node { id: n.id, kind })
            })
            .collect::<Result<Vec<_>>>()?;
        let graph = MaterialGraph {
            nodes,
            edges: file.edges,
            outputs: file.outputs,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Content hash of the canonical serialized form.
    pub fn structural_hash(&self) -> Result<String> {
        crate::util::canonical_json_hash(&self.to_file_value()?)
    }

    fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::Graph(format!("unknown node id `{id}`")))
    }

    fn input_arity(&self, idx: usize) -> usize {
        match &self.nodes[idx].kind {
            NodeKind::Generator { .. } => 0,
            NodeKind::Filter { filter, .. } => filters::arity(*filter),
            NodeKind::Output { .. } => 1,
        }
    }

    /// Inputs per node: `inputs[i][slot] = source node index`.
    fn wiring(&self) -> Result<Vec<Vec<usize>>> {
        let mut inputs: Vec<Vec<Option<usize>>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, _)| vec![None; self.input_arity(i)])
            .collect();
        for e in &self.edges {
            let src = self.node_index(&e.src)?;
            let dst = self.node_index(&e.dst)?;
            if e.src_slot != 0 {
                return Err(Error::Graph(format!(
                    "node `{}` has a single output slot",
                    e.src
                )));
            }
            let slots = &mut inputs[dst];
            if e.dst_slot >= slots.len() {
                return Err(Error::Graph(format!(
                    "edge into `{}` slot {} exceeds arity {}",
                    e.dst,
                    e.dst_slot,
                    slots.len()
                )));
            }
            if slots[e.dst_slot].is_some() {
                return Err(Error::Graph(format!(
                    "node `{}` slot {} wired twice",
                    e.dst, e.dst_slot
                )));
            }
            slots[e.dst_slot] = Some(src);
        }
        inputs
            .into_iter()
            .enumerate()
            .map(|(i, slots)| {
                slots
                    .into_iter()
                    .enumerate()
                    .map(|(s, v)| {
                        v.ok_or_else(|| {
                            Error::Graph(format!(
                                "node `{}` input slot {s} unbound",
                                self.nodes[i].id
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Deterministic topological order (Kahn, by node index).
    fn topo_order(&self, wiring: &[Vec<usize>]) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, inputs) in wiring.iter().enumerate() {
            indegree[i] = inputs.len();
            for &src in inputs {
                dependents[src].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.push(d);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("cycle detected".into()));
        }
        Ok(order)
    }

    /// Channel count each node produces.
    fn channel_map(&self, wiring: &[Vec<usize>], order: &[usize]) -> Result<Vec<usize>> {
        let mut channels = vec![0usize; self.nodes.len()];
        for &i in order {
            channels[i] = match &self.nodes[i].kind {
                NodeKind::Generator { .. } => 1,
                NodeKind::Filter { filter, .. } => {
                    let in_ch: Vec<usize> =
                        wiring[i].iter().map(|&s| channels[s]).collect();
                    filters::output_channels(*filter, &in_ch)?
                }
                NodeKind::Output { .. } => channels[wiring[i][0]],
            };
        }
        Ok(channels)
    }

    /// Structural validation: ids unique, wiring complete, acyclic, channel
    /// arities coherent, output bindings complete and correctly shaped.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(&n.id) {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
            match &n.kind {
                NodeKind::Generator {
                    generator,
                    params_norm,
                    ..
                } => {
                    let spec = generators::generator_spec(generator)?;
                    if params_norm.len() != spec.entry_count() {
                        return Err(Error::Graph(format!(
                            "node `{}` parameter arity mismatch",
                            n.id
                        )));
                    }
                }
                NodeKind::Filter { filter, params_norm } => {
                    if params_norm.len() != filters::param_defs(*filter).len() {
                        return Err(Error::Graph(format!(
                            "node `{}` parameter arity mismatch",
                            n.id
                        )));
                    }
                }
                NodeKind::Output { .. } => {}
            }
        }
        let wiring = self.wiring()?;
        let order = self.topo_order(&wiring)?;
        let channels = self.channel_map(&wiring, &order)?;
        for (name, id, want) in [
            ("albedo", &self.outputs.albedo, 3usize),
            ("normal", &self.outputs.normal, 3),
            ("roughness", &self.outputs.roughness, 1),
            ("metallic", &self.outputs.metallic, 1),
        ] {
            let idx = self.node_index(id)?;
            if channels[idx] != want {
                return Err(Error::Graph(format!(
                    "{name} output bound to `{id}` with {} channels, expected {want}",
                    channels[idx]
                )));
            }
        }
        Ok(())
    }

    /// Switch a generator node between original and proxy evaluation.
    /// Entering original mode snaps discrete parameters onto their grid;
    /// nothing else in the graph changes.
    pub fn set_mode(&mut self, node_id: &str, mode: GeneratorMode) -> Result<()> {
        let idx = self.node_index(node_id)?;
        match &mut self.nodes[idx].kind {
            NodeKind::Generator {
                generator,
                params_norm,
                mode: m,
                ..
            } => {
                if mode == GeneratorMode::Original {
                    let spec = generators::generator_spec(generator)?;
                    *params_norm = paramspace::snap_normalized(params_norm, spec)?;
                }
                *m = mode;
                Ok(())
            }
            _ => Err(Error::Graph(format!(
                "node `{node_id}` is not a generator"
            ))),
        }
    }

    pub fn generator_node_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Generator { .. }))
            .map(|n| n.id.clone())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Parameter collection: θ = (θ_g, θ_f) in normalized units
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaSplit {
    /// Generator parameters, concatenated per generator node in node order.
    pub theta_g: Vec<f64>,
    /// Filter parameters, concatenated per filter node in node order.
    pub theta_f: Vec<f64>,
}

/// Gather the optimizable parameters. The pairing with [`apply_params`] is
/// bijective: apply(collect(g)) leaves the graph bitwise unchanged.
pub fn collect_params(g: &MaterialGraph) -> ThetaSplit {
    let mut theta_g = Vec::new();
    let mut theta_f = Vec::new();
    for n in &g.nodes {
        match &n.kind {
            NodeKind::Generator { params_norm, .. } => theta_g.extend_from_slice(params_norm),
            NodeKind::Filter { params_norm, .. } => theta_f.extend_from_slice(params_norm),
            NodeKind::Output { .. } => {}
        }
    }
    ThetaSplit { theta_g, theta_f }
}

/// Write parameters back into the graph (inverse of [`collect_params`]).
pub fn apply_params(g: &mut MaterialGraph, theta: &ThetaSplit) -> Result<()> {
    let mut ig = 0usize;
    let mut ifl = 0usize;
    for n in &mut g.nodes {
        match &mut n.kind {
            NodeKind::Generator { params_norm, .. } => {
                let len = params_norm.len();
                if ig + len > theta.theta_g.len() {
                    return Err(Error::DimensionMismatch {
                        expected: ig + len,
                        got: theta.theta_g.len(),
                        context: "theta_g".into(),
                    });
                }
                params_norm.copy_from_slice(&theta.theta_g[ig..ig + len]);
                ig += len;
            }
            NodeKind::Filter { params_norm, .. } => {
                let len = params_norm.len();
                if ifl + len > theta.theta_f.len() {
                    return Err(Error::DimensionMismatch {
                        expected: ifl + len,
                        got: theta.theta_f.len(),
                        context: "theta_f".into(),
                    });
                }
                params_norm.copy_from_slice(&theta.theta_f[ifl..ifl + len]);
                ifl += len;
            }
            NodeKind::Output { .. } => {}
        }
    }
    if ig != theta.theta_g.len() || ifl != theta.theta_f.len() {
        return Err(Error::DimensionMismatch {
            expected: ig,
            got: theta.theta_g.len(),
            context: "theta length".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Differentiable stand-ins for generator nodes in proxy mode: trained
/// networks per generator name, or the oracle test double that wraps the
/// original generator behind the proxy interface (forward-exact,
/// gradient-free; used to isolate pipeline logic from proxy error).
#[derive(Default, Clone)]
pub struct ProxyStore {
    models: BTreeMap<String, Arc<ProxyModel>>,
    oracle: bool,
}

impl ProxyStore {
    pub fn oracle() -> Self {
        ProxyStore {
            models: BTreeMap::new(),
            oracle: true,
        }
    }

    pub fn with_model(mut self, generator: &str, model: ProxyModel) -> Self {
        self.models.insert(generator.to_string(), Arc::new(model));
        self
    }

    pub fn is_oracle(&self) -> bool {
        self.oracle
    }

    /// Load `<generator>.proxy` checkpoints from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = ProxyStore::default();
        for name in generators::GENERATOR_NAMES {
            let path = dir.join(format!("{name}.proxy"));
            if path.exists() {
                store
                    .models
                    .insert(name.to_string(), Arc::new(crate::proxynet::load_proxy(&path)?));
            }
        }
        Ok(store)
    }

    pub fn get(&self, generator: &str) -> Option<&Arc<ProxyModel>> {
        self.models.get(generator)
    }
}

pub struct GraphEvalOptions {
    pub resolution: (usize, usize),
    /// Expose θ as differentiable leaves (otherwise constants).
    pub differentiable: bool,
}

/// Result of one tape evaluation: the four map tensors plus the parameter
/// leaves for gradient extraction, keyed by node id.
pub struct GraphEval {
    pub maps: MapsT,
    pub generator_leaves: BTreeMap<String, Tensor>,
    pub filter_leaves: BTreeMap<String, Tensor>,
}

/// Evaluate the graph on a tape. Deterministic: any valid topological order
/// yields identical maps (node evaluations are pure). In proxy mode the
/// result is differentiable w.r.t. normalized generator parameters (network
/// proxies only) and all filter parameters.
pub fn evaluate_graph_t(
    g: &MaterialGraph,
    tape: &Tape,
    proxies: &ProxyStore,
    opts: &GraphEvalOptions,
) -> Result<GraphEval> {
    g.validate()?;
    let (h, w) = opts.resolution;
    if h == 0 || w == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let wiring = g.wiring()?;
    let order = g.topo_order(&wiring)?;

    let mut values: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
    let mut generator_leaves = BTreeMap::new();
    let mut filter_leaves = BTreeMap::new();

    for &i in &order {
        let node = &g.nodes[i];
        let out = match &node.kind {
            NodeKind::Generator {
                generator,
                spec_hash,
                params_norm,
                seed,
                mode,
            } => {
                let spec = generators::generator_spec(generator)?;
                match mode {
                    GeneratorMode::Original => {
                        let raw = paramspace::denormalize(params_norm, spec)?;
                        let pv = ParamVector {
                            spec_hash: spec.version_hash.clone(),
                            values: raw,
                            seed: *seed,
                        };
                        let img = generators::evaluate_generator(generator, &pv, (h, w))?;
                        constant_image(tape, &img.pixels)
                    }
                    GeneratorMode::Proxy => {
                        let leaf = if opts.differentiable {
                            tape.var(
                                ArrayD::from_shape_vec(
                                    IxDyn(&[params_norm.len()]),
                                    params_norm.clone(),
                                )
                                .unwrap(),
                            )
                        } else {
                            tape.constant(
                                ArrayD::from_shape_vec(
                                    IxDyn(&[params_norm.len()]),
                                    params_norm.clone(),
                                )
                                .unwrap(),
                            )
                        };
                        generator_leaves.insert(node.id.clone(), leaf.clone());
                        if proxies.is_oracle() {
                            // forward-exact double: evaluate the original
                            // generator; gradients w.r.t. θ_g are zero
                            let raw = paramspace::denormalize(params_norm, spec)?;
                            let pv = ParamVector {
                                spec_hash: spec.version_hash.clone(),
                                values: raw,
                                seed: *seed,
                            };
                            let img = generators::evaluate_generator(generator, &pv, (h, w))?;
                            constant_image(tape, &img.pixels)
                        } else {
                            let model = proxies.get(generator).ok_or_else(|| {
                                Error::Graph(format!(
                                    "no proxy loaded for generator `{generator}` (node `{}`)",
                                    node.id
                                ))
                            })?;
                            if model.spec.version_hash != *spec_hash {
                                return Err(Error::SpecHashMismatch {
                                    expected: spec_hash.clone(),
                                    got: model.spec.version_hash.clone(),
                                });
                            }
                            let raw = model.forward_t(&leaf)?;
                            resample_to(raw, (h, w))?
                        }
                    }
                }
            }
            NodeKind::Filter { filter, params_norm } => {
                let leaf = if opts.differentiable {
                    tape.var(
                        ArrayD::from_shape_vec(IxDyn(&[params_norm.len()]), params_norm.clone())
                            .unwrap(),
                    )
                } else {
                    tape.constant(
                        ArrayD::from_shape_vec(IxDyn(&[params_norm.len()]), params_norm.clone())
                            .unwrap(),
                    )
                };
                filter_leaves.insert(node.id.clone(), leaf.clone());
                let inputs: Vec<Tensor> = wiring[i]
                    .iter()
                    .map(|&s| values[s].clone().expect("topo order"))
                    .collect();
                let input_refs: Vec<&Tensor> = inputs.iter().collect();
                filters::apply_filter(*filter, &leaf, &input_refs)?
            }
            NodeKind::Output { .. } => values[wiring[i][0]].clone().expect("topo order"),
        };
        values[i] = Some(out);
    }

    let get = |id: &str| -> Result<Tensor> {
        let idx = g.node_index(id)?;
        Ok(values[idx].clone().expect("evaluated"))
    };
    let maps = MapsT {
        albedo: get(&g.outputs.albedo)?,
        normal: get(&g.outputs.normal)?,
        roughness: get(&g.outputs.roughness)?,
        metallic: get(&g.outputs.metallic)?,
    };
    Ok(GraphEval {
        maps,
        generator_leaves,
        filter_leaves,
    })
}

/// Evaluate to plain material maps (non-differentiable path) and check the
/// map invariants.
pub fn evaluate_graph(
    g: &MaterialGraph,
    proxies: &ProxyStore,
    resolution: (usize, usize),
) -> Result<MaterialMaps> {
    let tape = Tape::new();
    let eval = evaluate_graph_t(
        g,
        &tape,
        proxies,
        &GraphEvalOptions {
            resolution,
            differentiable: false,
        },
    )?;
    let (h, w) = resolution;
    let chan3 = |t: &Tensor| -> Array3<f64> {
        let v = t.value();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| v[[c, y, x]])
    };
    let chan1 = |t: &Tensor| -> Array2<f64> {
        let v = t.value();
        Array2::from_shape_fn((h, w), |(y, x)| v[[0, y, x]])
    };
    let maps = MaterialMaps {
        albedo: chan3(&eval.maps.albedo),
        normal: chan3(&eval.maps.normal),
        roughness: chan1(&eval.maps.roughness),
        metallic: chan1(&eval.maps.metallic),
    };
    maps.validate()?;
    Ok(maps)
}

fn constant_image(tape: &Tape, img: &Array2<f64>) -> Tensor {
    let (h, w) = img.dim();
    tape.constant(
        img.clone()
            .into_dyn()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .unwrap(),
    )
}

/// Periodic power-of-two resampling of a proxy output onto the evaluation
/// resolution: nearest upsampling when finer, average pooling when coarser.
fn resample_to(mut t: Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (th, tw) = target;
    loop {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        if (h, w) == (th, tw) {
            return Ok(t);
        }
        if h < th && w < tw && th % h == 0 && tw % w == 0 {
            t = t.upsample2();
        } else if h > th && w > tw && h % th == 0 && w % tw == 0 {
            t = t.avg_pool2(2);
        } else {
            return Err(Error::Graph(format!(
                "cannot resample proxy output {h}x{w} to {th}x{tw}"
            )));
        }
    }
}

// ---------------------------------------------------------------------------
// Fixture graphs
// ---------------------------------------------------------------------------

/// A compact single-generator material: mask -> blur -> colorize for albedo,
/// levels for roughness, blur + normal-from-height for the normal map, and a
/// constant-ish levels chain for metallic.
pub fn simple_material_graph(generator: &str, seed: u64) -> Result<MaterialGraph> {
    let spec = generators::generator_spec(generator)?;
    let prior = spec.prior_means();
    let pv = ParamVector {
        spec_hash: spec.version_hash.clone(),
        values: prior,
        seed,
    };
    let params_norm = paramspace::normalize(&pv, spec)?;
    let filter_node = |id: &str, filter: FilterKind, raw: Vec<f64>| -> Result<Node> {
        Ok(Node {
            id: id.into(),
            kind: NodeKind::Filter {
                filter,
                params_norm: filters::normalize_values(filter, &raw)?,
            },
        })
    };
    let nodes = vec![
        Node {
            id: "pattern".into(),
            kind: NodeKind::Generator {
                generator: generator.to_string(),
                spec_hash: spec.version_hash.clone(),
                params_norm,
                seed,
                mode: GeneratorMode::Original,
            },
        },
        filter_node("soften", FilterKind::Blur, vec![0.6])?,
        filter_node(
            "tint",
            FilterKind::Colorize,
            vec![0.28, 0.16, 0.10, 0.55, 0.36, 0.24, 0.86, 0.78, 0.66],
        )?,
        filter_node("rough_levels", FilterKind::Levels, vec![0.0, 1.0, 1.25, 0.25, 0.85])?,
        filter_node("bump", FilterKind::NormalFromHeight, vec![2.5])?,
        filter_node("metal_levels", FilterKind::Levels, vec![0.0, 1.0, 1.0, 0.05, 0.08])?,
        Node {
            id: "out_albedo".into(),
            kind: NodeKind::Output {
                channel: OutputChannel::Albedo,
            },
        },
        Node {
            id: "out_normal".into(),
            kind: NodeKind::Output {
                channel: OutputChannel::Normal,
            },
        },
        Node {
            id: "out_rough".into(),
            kind: NodeKind::Output {
                channel: OutputChannel::Roughness,
            },
        },
        Node {
            id: "out_metal".into(),
            kind: NodeKind::Output {
                channel: OutputChannel::Metallic,
            },
        },
    ];
    let edge = |src: &str, dst: &str, slot: usize| Edge {
        src: src.into(),
        src_slot: 0,
        dst: dst.into(),
        dst_slot: slot,
    };
    let graph = MaterialGraph {
        nodes,
        edges: vec![
            edge("pattern", "soften", 0),
            edge("soften", "tint", 0),
            edge("soften", "rough_levels", 0),
            edge("soften", "bump", 0),
            edge("soften", "metal_levels", 0),
            edge("tint", "out_albedo", 0),
            edge("bump", "out_normal", 0),
            edge("rough_levels", "out_rough", 0),
            edge("metal_levels", "out_metal", 0),
        ],
        outputs: OutputBindings {
            albedo: "out_albedo".into(),
            normal: "out_normal".into(),
            roughness: "out_rough".into(),
            metallic: "out_metal".into(),
        },
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;

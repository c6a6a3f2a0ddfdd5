//! Discrete Boolean circuits extracted from trained networks.
//!
//! A [`Circuit`] reads feature values through comparators, wires two-input
//! gates in topological order and sums gate or comparator outputs per
//! class. Every pass here returns a new circuit with identical input/output
//! behaviour on features in [0,1].

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::network::{argmax_class, DlnModel};
use crate::ops::{self, OPERATORS};

/// Gate OPs charged for one 16-bit magnitude comparison.
pub const COMPARATOR_OPS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `x >= threshold`
    Ge,
    /// `x <= threshold`
    Le,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    pub feature: usize,
    pub direction: Direction,
    pub threshold: f64,
    /// Position in the network's binarized input vector.
    pub bit: usize,
}

impl Comparator {
    #[inline]
    pub fn eval(&self, x: f64) -> bool {
        match self.direction {
            Direction::Ge => x >= self.threshold,
            Direction::Le => x <= self.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    Const(bool),
    Comparator(usize),
    Gate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gate {
    pub op: u8,
    pub a: NodeRef,
    pub b: NodeRef,
}

/// Where a network neuron that folded to a constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeuronId {
    Threshold(usize),
    Logic { layer: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldedNeuron {
    pub neuron: NeuronId,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassSum {
    /// Unconditional +1 contributions.
    pub bias: u32,
    /// Summed nodes; repeats count repeatedly.
    pub terms: Vec<NodeRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub comparators: Vec<Comparator>,
    pub gates: Vec<Gate>,
    pub classes: Vec<ClassSum>,
    pub folded: Vec<FoldedNeuron>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub gate_ops: u64,
    pub comparator_ops: u64,
    pub total_ops: u64,
    pub live_feature_count: usize,
}

/// Turns a trained network into a circuit: argmax gates and links, sum
/// connections at `Sigmoid(S/tau_final) >= 0.8`, comparators for in-range
/// thresholds and constants for thresholds outside [0,1].
pub fn discretize(model: &DlnModel) -> Circuit {
    let mut folded = Vec::new();
    let mut comparators = Vec::new();
    let mut binarized = Vec::with_capacity(model.binarized_width());
    let thr = &model.threshold;
    for i in 0..thr.width() {
        let (s, b) = (thr.slope[i], thr.bias[i]);
        let constant = if s == 0.0 {
            Some(true)
        } else if b < 0.0 {
            Some(s > 0.0)
        } else if b > 1.0 {
            Some(s < 0.0)
        } else {
            None
        };
        match constant {
            Some(value) => {
                folded.push(FoldedNeuron {
                    neuron: NeuronId::Threshold(i),
                    value,
                });
                binarized.push(NodeRef::Const(value));
            }
            None => {
                comparators.push(Comparator {
                    feature: thr.input_index[i],
                    direction: if s > 0.0 { Direction::Ge } else { Direction::Le },
                    threshold: b,
                    bit: i,
                });
                binarized.push(NodeRef::Comparator(comparators.len() - 1));
            }
        }
    }
    for &j in &model.bit_inputs {
        comparators.push(Comparator {
            feature: j,
            direction: Direction::Ge,
            threshold: 0.5,
            bit: binarized.len(),
        });
        binarized.push(NodeRef::Comparator(comparators.len() - 1));
    }

    let mut gates = Vec::new();
    let mut cur: Vec<NodeRef> = binarized.clone();
    for (l, layer) in model.logic_layers.iter().enumerate() {
        if l > 0 && model.config.concat_input {
            cur.extend_from_slice(&binarized);
        }
        let mut next = Vec::with_capacity(layer.out_width);
        for n in 0..layer.out_width {
            let (op, a, b) = layer.hard_choice(n);
            gates.push(Gate {
                op,
                a: cur[a],
                b: cur[b],
            });
            next.push(NodeRef::Gate(gates.len() - 1));
        }
        cur = next;
    }

    let mut classes = vec![ClassSum::default(); model.num_classes()];
    for (j, &node) in cur.iter().enumerate() {
        for (c, class) in classes.iter_mut().enumerate() {
            if model.sum.connected(j, c, model.final_tau) {
                class.terms.push(node);
            }
        }
    }

    let names = model.features.iter().map(|c| c.name.clone()).collect();
    Circuit {
        feature_names: names,
        class_names: model.class_names.clone(),
        comparators,
        gates,
        classes,
        folded,
    }
}

impl Circuit {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Evaluates every gate given the comparator outputs.
    pub fn gate_values(&self, inputs: &[bool]) -> Vec<bool> {
        let mut values = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            let read = |r: NodeRef, values: &[bool]| match r {
                NodeRef::Const(v) => v,
                NodeRef::Comparator(i) => inputs[i],
                NodeRef::Gate(i) => values[i],
            };
            let (a, b) = (read(g.a, &values), read(g.b, &values));
            values.push(OPERATORS[usize::from(g.op)].hard(a, b));
        }
        values
    }

    /// Per-class counts given the comparator outputs.
    pub fn scores_from_inputs(&self, inputs: &[bool]) -> Vec<u32> {
        let values = self.gate_values(inputs);
        self.classes
            .iter()
            .map(|c| {
                c.bias
                    + c.terms
                        .iter()
                        .filter(|&&t| match t {
                            NodeRef::Const(v) => v,
                            NodeRef::Comparator(i) => inputs[i],
                            NodeRef::Gate(i) => values[i],
                        })
                        .count() as u32
            })
            .collect()
    }

    pub fn comparator_outputs(&self, features: &[f64]) -> Vec<bool> {
        self.comparators
            .iter()
            .map(|c| c.eval(features[c.feature]))
            .collect()
    }

    pub fn scores(&self, features: &[f64]) -> Vec<u32> {
        self.scores_from_inputs(&self.comparator_outputs(features))
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        argmax_class(&self.scores(features))
    }

    /// Refs must point backwards and at existing nodes; gates must not read
    /// constants once folded (`allow_consts = false`).
    pub fn check_topology(&self, allow_consts: bool) -> Result<(), String> {
        let ok = |r: NodeRef, limit: usize| match r {
            NodeRef::Const(_) => allow_consts,
            NodeRef::Comparator(i) => i < self.comparators.len(),
            NodeRef::Gate(i) => i < limit,
        };
        for (i, g) in self.gates.iter().enumerate() {
            if usize::from(g.op) >= ops::NUM_OPS || !ok(g.a, i) || !ok(g.b, i) {
                return Err(format!("gate {i} has an invalid operand or operator: {g:?}"));
            }
        }
        for (c, class) in self.classes.iter().enumerate() {
            for &t in &class.terms {
                if !ok(t, self.gates.len()) || matches!(t, NodeRef::Const(_)) && !allow_consts {
                    return Err(format!("class {c} references invalid node {t:?}"));
                }
            }
        }
        Ok(())
    }

    /// Drops gates and comparators that no class reads and renumbers the
    /// rest, preserving order.
    fn prune(&self) -> Circuit {
        let mut live_gate = vec![false; self.gates.len()];
        let mut live_cmp = vec![false; self.comparators.len()];
        let mut mark = |r: NodeRef, live_gate: &mut Vec<bool>| match r {
            NodeRef::Gate(i) => live_gate[i] = true,
            NodeRef::Comparator(i) => live_cmp[i] = true,
            NodeRef::Const(_) => {}
        };
        for class in &self.classes {
            for &t in &class.terms {
                mark(t, &mut live_gate);
            }
        }
        for i in (0..self.gates.len()).rev() {
            if live_gate[i] {
                let g = self.gates[i];
                mark(g.a, &mut live_gate);
                mark(g.b, &mut live_gate);
            }
        }
        let mut cmp_map = vec![usize::MAX; self.comparators.len()];
        let mut comparators = Vec::new();
        for (i, c) in self.comparators.iter().enumerate() {
            if live_cmp[i] {
                cmp_map[i] = comparators.len();
                comparators.push(*c);
            }
        }
        let mut gate_map = vec![usize::MAX; self.gates.len()];
        let mut gates = Vec::new();
        let remap = |r: NodeRef, gate_map: &[usize]| match r {
            NodeRef::Gate(i) => NodeRef::Gate(gate_map[i]),
            NodeRef::Comparator(i) => NodeRef::Comparator(cmp_map[i]),
            c => c,
        };
        for (i, g) in self.gates.iter().enumerate() {
            if live_gate[i] {
                gate_map[i] = gates.len();
                gates.push(Gate {
                    op: g.op,
                    a: remap(g.a, &gate_map),
                    b: remap(g.b, &gate_map),
                });
            }
        }
        let classes = self
            .classes
            .iter()
            .map(|c| ClassSum {
                bias: c.bias,
                terms: c.terms.iter().map(|&t| remap(t, &gate_map)).collect(),
            })
            .collect();
        Circuit {
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            comparators,
            gates,
            classes,
            folded: self.folded.clone(),
        }
    }
}

/// Result of rewriting one gate: an existing node, or a (possibly negated)
/// node. Negations become explicit NOT gates when materialised.
#[derive(Debug, Clone, Copy)]
enum Rewritten {
    Node(NodeRef),
    Gate(Gate),
}

/// Gate builder shared by the folding and simplification passes.
struct Builder {
    gates: Vec<Gate>,
    simplify: bool,
    cse: HashMap<Gate, usize>,
    /// For NOT gates: the gate index holding `x` for each `NOT(x)`.
    negation_of: HashMap<usize, NodeRef>,
}

impl Builder {
    fn new(simplify: bool) -> Self {
        Builder {
            gates: Vec::new(),
            simplify,
            cse: HashMap::new(),
            negation_of: HashMap::new(),
        }
    }

    fn emit(&mut self, g: Gate) -> NodeRef {
        if self.simplify {
            if let Some(&i) = self.cse.get(&g) {
                return NodeRef::Gate(i);
            }
        }
        self.gates.push(g);
        let idx = self.gates.len() - 1;
        if self.simplify {
            self.cse.insert(g, idx);
            if g.op == ops::NOT_A && g.a == g.b {
                self.negation_of.insert(idx, g.a);
            }
        }
        NodeRef::Gate(idx)
    }

    fn not(&mut self, x: NodeRef) -> NodeRef {
        match x {
            NodeRef::Const(v) => NodeRef::Const(!v),
            NodeRef::Gate(i) if self.simplify && self.negation_of.contains_key(&i) => {
                self.negation_of[&i]
            }
            _ => self.emit(Gate {
                op: ops::NOT_A,
                a: x,
                b: x,
            }),
        }
    }

    fn negated(&self, x: NodeRef) -> Option<NodeRef> {
        match x {
            NodeRef::Gate(i) => self.negation_of.get(&i).copied(),
            _ => None,
        }
    }

    /// Gate as a function of one variable `x` given its values at x=0, x=1.
    fn unary(&mut self, at0: bool, at1: bool, x: NodeRef) -> NodeRef {
        match (at0, at1) {
            (false, false) => NodeRef::Const(false),
            (true, true) => NodeRef::Const(true),
            (false, true) => x,
            (true, false) => self.not(x),
        }
    }

    fn add(&mut self, op: u8, a: NodeRef, b: NodeRef) -> NodeRef {
        let f = &OPERATORS[usize::from(op)];
        // Constant operands: partially evaluate the truth table.
        match (a, b) {
            (NodeRef::Const(va), NodeRef::Const(vb)) => return NodeRef::Const(f.hard(va, vb)),
            (NodeRef::Const(va), _) => return self.unary(f.hard(va, false), f.hard(va, true), b),
            (_, NodeRef::Const(vb)) => return self.unary(f.hard(false, vb), f.hard(true, vb), a),
            _ => {}
        }
        match op {
            ops::FALSE => return NodeRef::Const(false),
            ops::TRUE => return NodeRef::Const(true),
            _ => {}
        }
        if !self.simplify {
            return self.emit(Gate { op, a, b });
        }
        match op {
            ops::PASS_A => return a,
            ops::PASS_B => return b,
            ops::NOT_A => return self.not(a),
            ops::NOT_B => return self.not(b),
            _ => {}
        }
        if a == b {
            return self.unary(f.hard(false, false), f.hard(true, true), a);
        }
        if self.negated(a) == Some(b) || self.negated(b) == Some(a) {
            // b = NOT a
            return self.unary(f.hard(false, true), f.hard(true, false), a);
        }
        match self.canonical(op, a, b) {
            Rewritten::Node(n) => n,
            Rewritten::Gate(g) => self.emit(g),
        }
    }

    /// Rewrites implications into AND/OR with a NOT and orders operands of
    /// commutative gates.
    fn canonical(&mut self, op: u8, a: NodeRef, b: NodeRef) -> Rewritten {
        let (op, a, b) = match op {
            ops::A_AND_NOT_B => (ops::AND, a, self.not(b)),
            ops::NOT_A_AND_B => (ops::AND, self.not(a), b),
            ops::A_OR_NOT_B => (ops::OR, a, self.not(b)),
            ops::NOT_A_OR_B => (ops::OR, self.not(a), b),
            _ => (op, a, b),
        };
        if a == b || self.negated(a) == Some(b) || self.negated(b) == Some(a) {
            return Rewritten::Node(self.add(op, a, b));
        }
        let (a, b) = if OPERATORS[usize::from(op)].is_commutative() && b < a {
            (b, a)
        } else {
            (a, b)
        };
        Rewritten::Gate(Gate { op, a, b })
    }
}

fn rebuild(circuit: &Circuit, simplify: bool) -> Circuit {
    let mut builder = Builder::new(simplify);
    let mut map: Vec<NodeRef> = Vec::with_capacity(circuit.gates.len());
    let resolve = |r: NodeRef, map: &[NodeRef]| match r {
        NodeRef::Gate(i) => map[i],
        other => other,
    };
    for g in &circuit.gates {
        let (a, b) = (resolve(g.a, &map), resolve(g.b, &map));
        map.push(builder.add(g.op, a, b));
    }
    let classes = circuit
        .classes
        .iter()
        .map(|c| {
            let mut sum = ClassSum {
                bias: c.bias,
                terms: Vec::new(),
            };
            for &t in &c.terms {
                match resolve(t, &map) {
                    NodeRef::Const(true) => sum.bias += 1,
                    NodeRef::Const(false) => {}
                    n => sum.terms.push(n),
                }
            }
            sum
        })
        .collect();
    Circuit {
        feature_names: circuit.feature_names.clone(),
        class_names: circuit.class_names.clone(),
        comparators: circuit.comparators.clone(),
        gates: builder.gates,
        classes,
        folded: circuit.folded.clone(),
    }
    .prune()
}

fn fixpoint(circuit: &Circuit, simplify: bool) -> Circuit {
    let mut cur = rebuild(circuit, simplify);
    loop {
        let next = rebuild(&cur, simplify);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Propagates constants through gates and into class sums, then removes
/// nodes no class reads.
pub fn fold_constants(circuit: &Circuit) -> Circuit {
    fixpoint(circuit, false)
}

/// Local rewrites on top of constant folding: pass-through and double
/// negation removal, idempotence and complementation, implication
/// canonicalisation, and sharing of identical gates.
pub fn simplify_rules(circuit: &Circuit) -> Circuit {
    fixpoint(circuit, true)
}

pub fn count_ops(circuit: &Circuit) -> CostReport {
    let gate_ops: u64 = circuit
        .gates
        .iter()
        .map(|g| u64::from(OPERATORS[usize::from(g.op)].cost))
        .sum();
    let comparator_ops = u64::from(COMPARATOR_OPS) * circuit.comparators.len() as u64;
    let live: BTreeSet<usize> = circuit.comparators.iter().map(|c| c.feature).collect();
    CostReport {
        gate_ops,
        comparator_ops,
        total_ops: gate_ops + comparator_ops,
        live_feature_count: live.len(),
    }
}

/// Discretize, fold and simplify in one go.
pub fn compile(model: &DlnModel) -> Circuit {
    simplify_rules(&fold_constants(&discretize(model)))
}

fn infix(op: u8) -> Option<&'static str> {
    Some(match op {
        ops::AND => "∧",
        ops::OR => "∨",
        ops::XOR => "⊕",
        ops::NAND => "↑",
        ops::NOR => "↓",
        ops::XNOR => "↔",
        _ => return None,
    })
}

impl Circuit {
    fn render(&self, r: NodeRef, out: &mut String) {
        match r {
            NodeRef::Const(v) => out.push_str(if v { "⊤" } else { "⊥" }),
            NodeRef::Comparator(i) => {
                let c = &self.comparators[i];
                let rel = match c.direction {
                    Direction::Ge => "≥",
                    Direction::Le => "≤",
                };
                let _ = write!(out, "(feat[{}] {rel} {:?})", c.feature, c.threshold);
            }
            NodeRef::Gate(i) => {
                let g = self.gates[i];
                let bin = |sym: &str, na: bool, nb: bool, out: &mut String| {
                    out.push('(');
                    if na {
                        out.push('¬');
                    }
                    self.render(g.a, out);
                    let _ = write!(out, " {sym} ");
                    if nb {
                        out.push('¬');
                    }
                    self.render(g.b, out);
                    out.push(')');
                };
                match g.op {
                    ops::FALSE => out.push('⊥'),
                    ops::TRUE => out.push('⊤'),
                    ops::PASS_A => self.render(g.a, out),
                    ops::PASS_B => self.render(g.b, out),
                    ops::NOT_A => {
                        out.push('¬');
                        self.render(g.a, out);
                    }
                    ops::NOT_B => {
                        out.push('¬');
                        self.render(g.b, out);
                    }
                    ops::A_AND_NOT_B => bin("∧", false, true, out),
                    ops::NOT_A_AND_B => bin("∧", true, false, out),
                    ops::A_OR_NOT_B => bin("∨", false, true, out),
                    ops::NOT_A_OR_B => bin("∨", true, false, out),
                    op => bin(infix(op).expect("binary operator"), false, false, out),
                }
            }
        }
    }

    /// Infix form of one node.
    pub fn expression(&self, r: NodeRef) -> String {
        let mut s = String::new();
        self.render(r, &mut s);
        s
    }

    /// One summed rule per line:
    ///
    /// ```text
    /// # feat[0] = mean
    /// class 1 += ((feat[0] ≥ 0.42) ∧ ¬(feat[7] ≥ 0.91))
    /// class 0 += ⊤
    /// ```
    ///
    /// `#` lines are comments. Expressions use `¬ ∧ ∨ ⊕ ↑ ↓ ↔`, comparator
    /// atoms `(feat[i] ≥ t)` or `(feat[i] ≤ t)`, and `⊤`/`⊥`; every binary
    /// operation is parenthesised. Thresholds are printed so that they parse
    /// back to the same `f64`.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.feature_names.iter().enumerate() {
            let _ = writeln!(out, "# feat[{i}] = {name}");
        }
        for (c, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(out, "# class {c} = {name}");
        }
        for (c, class) in self.classes.iter().enumerate() {
            for _ in 0..class.bias {
                let _ = writeln!(out, "class {c} += ⊤");
            }
            for &t in &class.terms {
                let _ = writeln!(out, "class {c} += {}", self.expression(t));
            }
        }
        out
    }

    /// Graphviz DOT: features, comparators, gates and class sums as nodes,
    /// dataflow as edges.
    pub fn export_dot(&self) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph circuit {\n  rankdir=LR;\n");
        let features: BTreeSet<usize> = self.comparators.iter().map(|c| c.feature).collect();
        for &f in &features {
            let name = self.feature_names.get(f).map_or("?", String::as_str);
            let _ = writeln!(out, "  f{f} [shape=box, label=\"{}\"];", esc(name));
        }
        for (i, c) in self.comparators.iter().enumerate() {
            let rel = match c.direction {
                Direction::Ge => ">=",
                Direction::Le => "<=",
            };
            let _ = writeln!(out, "  c{i} [shape=diamond, label=\"{rel} {:?}\"];", c.threshold);
            let _ = writeln!(out, "  f{} -> c{i};", c.feature);
        }
        let node_id = |r: NodeRef| match r {
            NodeRef::Const(true) => "true".to_string(),
            NodeRef::Const(false) => "false".to_string(),
            NodeRef::Comparator(i) => format!("c{i}"),
            NodeRef::Gate(i) => format!("g{i}"),
        };
        let uses_const = self
            .gates
            .iter()
            .flat_map(|g| [g.a, g.b])
            .chain(self.classes.iter().flat_map(|c| c.terms.iter().copied()))
            .filter_map(|r| match r {
                NodeRef::Const(v) => Some(v),
                _ => None,
            })
            .collect::<BTreeSet<bool>>();
        for v in uses_const {
            let _ = writeln!(out, "  {v} [shape=plaintext, label=\"{v}\"];");
        }
        for (i, g) in self.gates.iter().enumerate() {
            let op = OPERATORS[usize::from(g.op)].name;
            let _ = writeln!(out, "  g{i} [shape=ellipse, label=\"{op}\"];");
            let _ = writeln!(out, "  {} -> g{i} [label=\"a\"];", node_id(g.a));
            let _ = writeln!(out, "  {} -> g{i} [label=\"b\"];", node_id(g.b));
        }
        for (c, class) in self.classes.iter().enumerate() {
            let name = self.class_names.get(c).map_or("?", String::as_str);
            let _ = writeln!(
                out,
                "  class{c} [shape=doublecircle, label=\"class {} (+{})\"];",
                esc(name),
                class.bias
            );
            for &t in &class.terms {
                let _ = writeln!(out, "  {} -> class{c};", node_id(t));
            }
        }
        out.push_str("}\n");
        out
    }
}

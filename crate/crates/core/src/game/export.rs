//! Deterministic text and Graphviz renderings of game trees,
//! optionally annotated with a solved strategy profile.

use std::fmt::Write;

use super::{GameNode, Solution, PPM};

fn format_probability(ppm: u32) -> String {
    if ppm == PPM {
        return "1".to_string();
    }
    let mut s = format!("0.{:06}", ppm);
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// Indented tree listing. When a solution is given, chosen actions are
/// marked with `<- chosen`.
pub fn render_text(root: &GameNode, solution: Option<&Solution>) -> String {
    let mut out = String::new();
    text_lines(root, solution, 0, &mut out);
    out
}

fn pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push(' ');
    }
}

fn text_lines(node: &GameNode, solution: Option<&Solution>, indent: usize, out: &mut String) {
    match node {
        GameNode::Terminal { payoff, note } => {
            pad(out, indent);
            let _ = writeln!(
                out,
                "({} sat bridge, {} sat gateway, {} sat iot) {}",
                payoff.bridge, payoff.gateway, payoff.iot, note
            );
        }
        GameNode::Decision {
            player,
            name,
            actions,
        } => {
            pad(out, indent);
            let _ = writeln!(out, "{name} [{player} decides]");
            let chosen = solution.and_then(|s| s.action_at(name));
            for (action, child) in actions {
                pad(out, indent + 2);
                let marker = if chosen == Some(*action) {
                    "  <- chosen"
                } else {
                    ""
                };
                let _ = writeln!(out, "{action}:{marker}");
                text_lines(child, solution, indent + 4, out);
            }
        }
        GameNode::Chance { name, branches } => {
            pad(out, indent);
            let _ = writeln!(out, "{name} [chance]");
            for (ppm, child) in branches {
                pad(out, indent + 2);
                let _ = writeln!(out, "p={}:", format_probability(*ppm));
                text_lines(child, solution, indent + 4, out);
            }
        }
    }
}

/// Graphviz digraph of the tree. Decision nodes are boxes, chance
/// nodes circles, terminals plain payoff records; chosen edges are
/// drawn bold when a solution is given.
pub fn render_dot(root: &GameNode, solution: Option<&Solution>) -> String {
    let mut out = String::new();
    out.push_str("digraph game {\n  rankdir=TB;\n  node [fontname=\"monospace\"];\n");
    let mut counter = 0usize;
    dot_node(root, solution, &mut counter, &mut out);
    out.push_str("}\n");
    out
}

fn dot_node(
    node: &GameNode,
    solution: Option<&Solution>,
    counter: &mut usize,
    out: &mut String,
) -> String {
    let id = format!("n{}", *counter);
    *counter += 1;
    match node {
        GameNode::Terminal { payoff, note } => {
            let _ = writeln!(
                out,
                "  {id} [shape=plaintext, label=\"({}, {}, {})\\n{}\"];",
                payoff.bridge, payoff.gateway, payoff.iot, note
            );
        }
        GameNode::Decision {
            player,
            name,
            actions,
        } => {
            let _ = writeln!(out, "  {id} [shape=box, label=\"{name}\\n{player}\"];");
            let chosen = solution.and_then(|s| s.action_at(name));
            for (action, child) in actions {
                let child_id = dot_node(child, solution, counter, out);
                let style = if chosen == Some(*action) {
                    ", penwidth=2"
                } else {
                    ""
                };
                let _ = writeln!(out, "  {id} -> {child_id} [label=\"{action}\"{style}];");
            }
        }
        GameNode::Chance { name, branches } => {
            let _ = writeln!(out, "  {id} [shape=circle, label=\"{name}\"];");
            for (ppm, child) in branches {
                let child_id = dot_node(child, solution, counter, out);
                let _ = writeln!(
                    out,
                    "  {id} -> {child_id} [label=\"p={}\", style=dashed];",
                    format_probability(*ppm)
                );
            }
        }
    }
    id
}

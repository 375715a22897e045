//! Pixel-labeling graph and exact min-cut via Dinic's max-flow.
//!
//! Label convention: pixels left on the source side of the cut are
//! foreground. `source_cap[p]` (arc source→p) is therefore the cost paid when
//! p is labeled background; `sink_cap[p]` (arc p→sink) the cost paid when p
//! is labeled foreground. Pairwise arcs carry equal capacity both ways and
//! are paid when their endpoints take different labels.

use crate::error::{Error, Result};

/// Terminal capacity used to clamp a pixel to one label.
pub const CLAMP_CAP: f64 = 1e9;

#[derive(Clone, Debug)]
pub struct SegGraph {
    pub n_pixels: usize,
    pub source_cap: Vec<f64>,
    pub sink_cap: Vec<f64>,
    /// (pixel, pixel, weight) with weight >= 0; stored once per unordered pair.
    pub edges: Vec<(u32, u32, f64)>,
}

impl SegGraph {
    pub fn new(n_pixels: usize) -> Self {
        SegGraph {
            n_pixels,
            source_cap: vec![0.0; n_pixels],
            sink_cap: vec![0.0; n_pixels],
            edges: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !self.source_cap.iter().all(|&v| ok(v)) || !self.sink_cap.iter().all(|&v| ok(v)) {
            return Err(Error::Contract(
                "terminal capacities must be finite and non-negative".into(),
            ));
        }
        for &(a, b, w) in &self.edges {
            if !ok(w) || a as usize >= self.n_pixels || b as usize >= self.n_pixels || a == b {
                return Err(Error::Contract(format!(
                    "bad pairwise arc ({}, {}, {})",
                    a, b, w
                )));
            }
        }
        Ok(())
    }

    /// Energy of a labeling (true = foreground) under this graph's costs.
    /// This is exactly the value a cut separating the labels would pay.
    pub fn energy(&self, labels: &[bool]) -> f64 {
        debug_assert_eq!(labels.len(), self.n_pixels);
        let mut e = 0.0;
        for p in 0..self.n_pixels {
            e += if labels[p] {
                self.sink_cap[p]
            } else {
                self.source_cap[p]
            };
        }
        for &(a, b, w) in &self.edges {
            if labels[a as usize] != labels[b as usize] {
                e += w;
            }
        }
        e
    }
}

struct Dinic {
    // arc arrays; arcs stored in pairs (e, e^1)
    to: Vec<u32>,
    cap: Vec<f64>,
    head: Vec<i32>,
    next: Vec<i32>,
    level: Vec<i32>,
    iter: Vec<i32>,
}

impl Dinic {
    fn new(n: usize) -> Self {
        Dinic {
            to: Vec::new(),
            cap: Vec::new(),
            head: vec![-1; n],
            next: Vec::new(),
            level: vec![-1; n],
            iter: vec![-1; n],
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) {
        let e = self.to.len();
        self.to.push(v as u32);
        self.cap.push(cap_uv);
        self.next.push(self.head[u]);
        self.head[u] = e as i32;
        self.to.push(u as u32);
        self.cap.push(cap_vu);
        self.next.push(self.head[v]);
        self.head[v] = (e + 1) as i32;
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.fill(-1);
        self.level[s] = 0;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let mut e = self.head[u];
            while e >= 0 {
                let v = self.to[e as usize] as usize;
                if self.cap[e as usize] > 0.0 && self.level[v] < 0 {
                    self.level[v] = self.level[u] + 1;
                    queue.push_back(v);
                }
                e = self.next[e as usize];
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, u: usize, t: usize, f: f64) -> f64 {
        if u == t {
            return f;
        }
        while self.iter[u] >= 0 {
            let e = self.iter[u] as usize;
            let v = self.to[e] as usize;
            if self.cap[e] > 0.0 && self.level[v] == self.level[u] + 1 {
                let d = self.dfs(v, t, f.min(self.cap[e]));
                if d > 0.0 {
                    self.cap[e] -= d;
                    self.cap[e ^ 1] += d;
                    return d;
                }
            }
            self.iter[u] = self.next[e];
        }
        0.0
    }

    fn run(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(s, t) {
            self.iter.copy_from_slice(&self.head);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= 0.0 {
                    break;
                }
                flow += f;
            }
        }
        flow
    }
}

/// Cut result: per-pixel labels (true = foreground / source side) and the cut
/// value, which equals the max flow.
pub struct CutResult {
    pub labels: Vec<bool>,
    pub flow: f64,
}

/// Exact min-cut of a pixel graph. Deterministic for a fixed graph: arcs are
/// visited in insertion order.
pub fn min_cut(graph: &SegGraph) -> Result<CutResult> {
    graph.validate()?;
    let n = graph.n_pixels;
    let (s, t) = (n, n + 1);
    let mut net = Dinic::new(n + 2);
    for p in 0..n {
        if graph.source_cap[p] > 0.0 {
            net.add_edge(s, p, graph.source_cap[p], 0.0);
        }
        if graph.sink_cap[p] > 0.0 {
            net.add_edge(p, t, graph.sink_cap[p], 0.0);
        }
    }
    for &(a, b, w) in &graph.edges {
        if w > 0.0 {
            net.add_edge(a as usize, b as usize, w, w);
        }
    }
    let flow = net.run(s, t);
    // source side of the residual graph = foreground
    let mut labels = vec![false; n];
    let mut seen = vec![false; n + 2];
    seen[s] = true;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(s);
    while let Some(u) = queue.pop_front() {
        let mut e = net.head[u];
        while e >= 0 {
            let v = net.to[e as usize] as usize;
            if net.cap[e as usize] > 0.0 && !seen[v] {
                seen[v] = true;
                if v < n {
                    labels[v] = true;
                }
                queue.push_back(v);
            }
            e = net.next[e as usize];
        }
    }
    Ok(CutResult { labels, flow })
}

//! Feasibility oracles for the bottleneck threshold search: maximum bipartite
//! matching (Hopcroft–Karp) and integer max-flow (Dinic).

use std::collections::VecDeque;

const NONE: usize = usize::MAX;

/// Maximum matching of the bipartite graph `adj[left] = [right...]`.
/// Returns the partner of every left vertex.
pub fn hopcroft_karp(n_left: usize, n_right: usize, adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut match_l = vec![NONE; n_left];
    let mut match_r = vec![NONE; n_right];
    let mut dist = vec![0usize; n_left];
    let mut queue = VecDeque::new();
    loop {
        // layered BFS from free left vertices
        queue.clear();
        let mut found = false;
        for u in 0..n_left {
            if match_l[u] == NONE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = NONE;
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = match_r[v];
                if w == NONE {
                    found = true;
                } else if dist[w] == NONE {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !found {
            break;
        }
        let mut it = vec![0usize; n_left];
        for u in 0..n_left {
            if match_l[u] == NONE {
                augment(u, adj, &mut match_l, &mut match_r, &mut dist, &mut it);
            }
        }
    }
    match_l.into_iter().map(|m| (m != NONE).then_some(m)).collect()
}

// iterative DFS along the BFS layers
fn augment(
    root: usize,
    adj: &[Vec<usize>],
    match_l: &mut [usize],
    match_r: &mut [usize],
    dist: &mut [usize],
    it: &mut [usize],
) -> bool {
    let mut stack = vec![root];
    while let Some(&u) = stack.last() {
        if it[u] < adj[u].len() {
            let v = adj[u][it[u]];
            it[u] += 1;
            let w = match_r[v];
            if w == NONE {
                // flip the path recorded on the stack
                let mut v = v;
                while let Some(u) = stack.pop() {
                    let prev = match_l[u];
                    match_l[u] = v;
                    match_r[v] = u;
                    v = prev;
                }
                return true;
            }
            if dist[w] == dist[u].wrapping_add(1) {
                stack.push(w);
            }
        } else {
            dist[u] = NONE;
            stack.pop();
        }
    }
    false
}

/// Dinic max-flow on integer capacities.
pub struct MaxFlow {
    head: Vec<usize>,
    to: Vec<usize>,
    next: Vec<usize>,
    cap: Vec<i64>,
    orig: Vec<i64>,
}

impl MaxFlow {
    pub fn new(n: usize) -> Self {
        Self {
            head: vec![NONE; n],
            to: Vec::new(),
            next: Vec::new(),
            cap: Vec::new(),
            orig: Vec::new(),
        }
    }

    /// Adds `u -> v` and returns its edge id.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: i64) -> usize {
        let id = self.to.len();
        for (a, b, c) in [(u, v, cap), (v, u, 0)] {
            self.to.push(b);
            self.cap.push(c);
            self.orig.push(c);
            self.next.push(self.head[a]);
            self.head[a] = self.to.len() - 1;
        }
        id
    }

    pub fn flow(&self, edge: usize) -> i64 {
        self.orig[edge] - self.cap[edge]
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        let n = self.head.len();
        let mut level = vec![NONE; n];
        let mut it = vec![NONE; n];
        let mut total = 0;
        loop {
            level.iter_mut().for_each(|l| *l = NONE);
            level[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                let mut e = self.head[u];
                while e != NONE {
                    let v = self.to[e];
                    if self.cap[e] > 0 && level[v] == NONE {
                        level[v] = level[u] + 1;
                        q.push_back(v);
                    }
                    e = self.next[e];
                }
            }
            if level[t] == NONE {
                return total;
            }
            it.copy_from_slice(&self.head);
            loop {
                let f = self.blocking(s, t, &level, &mut it);
                if f == 0 {
                    break;
                }
                total += f;
            }
        }
    }

    // one augmenting path in the level graph, found iteratively
    fn blocking(&mut self, s: usize, t: usize, level: &[usize], it: &mut [usize]) -> i64 {
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let f = path.iter().map(|&e| self.cap[e]).min().unwrap_or(0);
                for &e in &path {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                }
                return f;
            }
            let mut advanced = false;
            while it[u] != NONE {
                let e = it[u];
                let v = self.to[e];
                if self.cap[e] > 0 && level[v] == level[u] + 1 {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                it[u] = self.next[e];
            }
            if !advanced {
                // dead end: retreat
                match path.pop() {
                    None => return 0,
                    Some(e) => {
                        u = self.to[e ^ 1];
                        it[u] = self.next[it[u]];
                    }
                }
            }
        }
    }
}

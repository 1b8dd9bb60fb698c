//! Primal network simplex for uncapacitated min-cost flow with integer
//! supplies and real costs.
//!
//! The spanning tree is stored with parent/thread/reverse-thread lists,
//! subtree sizes and last successors, and pivots use block search. Each node
//! starts attached to an artificial root, with a prohibitive cost on the
//! artificial arcs that carry demand.

use crate::error::{invalid, Result};

const STATE_UPPER: i8 = -1;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const INF_CAP: i64 = i64::MAX / 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Some demand could only be met through an artificial arc.
    Infeasible,
}

pub struct NetworkSimplex {
    node_num: usize,
    arc_num: usize,
    root: usize,
    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<i64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pred_dir: Vec<i8>,
    dirty_revs: Vec<usize>,
    // pivot bookkeeping
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: i64,
    next_arc: usize,
    block_size: usize,
    tol: f64,
    cost_bound: f64,
}

const NONE: usize = usize::MAX;

impl NetworkSimplex {
    /// `arcs[e] = (from, to)` with cost `costs[e]`; `supply` sums to zero.
    pub fn new(node_num: usize, arcs: &[(usize, usize)], costs: &[f64], supply: &[i64]) -> Result<Self> {
        let max_cost = costs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        Self::with_cost_bound(node_num, arcs, costs, supply, max_cost)
    }

    /// Like [`NetworkSimplex::new`], but sizes the artificial costs from
    /// `cost_bound`, which must bound `|cost|` of every arc ever added.
    pub fn with_cost_bound(
        node_num: usize,
        arcs: &[(usize, usize)],
        costs: &[f64],
        supply: &[i64],
        cost_bound: f64,
    ) -> Result<Self> {
        if arcs.len() != costs.len() || supply.len() != node_num {
            return Err(invalid("network", "arc, cost and supply lengths disagree"));
        }
        if supply.iter().sum::<i64>() != 0 {
            return Err(invalid("supply", "must sum to zero"));
        }
        if arcs.iter().any(|&(u, v)| u >= node_num || v >= node_num) {
            return Err(invalid("arcs", "endpoint out of range"));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("costs", "must be finite"));
        }
        let arc_num = arcs.len();
        let all = arc_num + node_num;
        let root = node_num;
        let max_cost = costs.iter().fold(cost_bound, |m, c| m.max(c.abs()));
        let art_cost = (max_cost + 1.0) * node_num as f64;

        let mut ns = Self {
            node_num,
            arc_num,
            root,
            source: Vec::with_capacity(all),
            target: Vec::with_capacity(all),
            cost: Vec::with_capacity(all),
            flow: vec![0; all],
            state: vec![STATE_LOWER; all],
            pi: vec![0.0; node_num + 1],
            parent: vec![NONE; node_num + 1],
            pred: vec![NONE; node_num + 1],
            thread: vec![0; node_num + 1],
            rev_thread: vec![0; node_num + 1],
            succ_num: vec![0; node_num + 1],
            last_succ: vec![0; node_num + 1],
            pred_dir: vec![0; node_num + 1],
            dirty_revs: Vec::new(),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0,
            next_arc: 0,
            block_size: ((arc_num as f64).sqrt().ceil() as usize).max(10),
            tol: 1e-12 * (max_cost + 1.0),
            cost_bound: max_cost,
        };
        // artificial arcs occupy indices 0..node_num, user arcs follow
        ns.source.resize(node_num, 0);
        ns.target.resize(node_num, 0);
        ns.cost.resize(node_num, 0.0);
        for (&(u, v), &c) in arcs.iter().zip(costs) {
            ns.source.push(u);
            ns.target.push(v);
            ns.cost.push(c);
        }

        // initial tree: every node hangs off the artificial root
        ns.parent[root] = NONE;
        ns.pred[root] = NONE;
        ns.thread[root] = 0;
        ns.rev_thread[0] = root;
        ns.succ_num[root] = node_num + 1;
        ns.last_succ[root] = if node_num > 0 { root - 1 } else { root };
        ns.pi[root] = 0.0;
        for u in 0..node_num {
            let e = u;
            ns.parent[u] = root;
            ns.pred[u] = e;
            ns.thread[u] = u + 1;
            ns.rev_thread[u + 1] = u;
            ns.succ_num[u] = 1;
            ns.last_succ[u] = u;
            ns.state[e] = STATE_TREE;
            if supply[u] >= 0 {
                ns.pred_dir[u] = DIR_UP;
                ns.pi[u] = 0.0;
                ns.source[e] = u;
                ns.target[e] = root;
                ns.flow[e] = supply[u];
                ns.cost[e] = 0.0;
            } else {
                ns.pred_dir[u] = DIR_DOWN;
                ns.pi[u] = art_cost;
                ns.source[e] = root;
                ns.target[e] = u;
                ns.flow[e] = -supply[u];
                ns.cost[e] = art_cost;
            }
        }
        Ok(ns)
    }

    #[inline]
    fn reduced(&self, e: usize) -> f64 {
        self.state[e] as f64 * (self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]])
    }

    fn find_entering_arc(&mut self) -> bool {
        let (base, m) = (self.node_num, self.arc_num);
        if m == 0 {
            return false;
        }
        let mut min = -self.tol;
        let mut cnt = self.block_size;
        let mut found = NONE;
        let start = self.next_arc;
        for k in 0..m {
            let e = if start + k < m { start + k } else { start + k - m };
            let c = self.reduced(base + e);
            if c < min {
                min = c;
                found = e;
            }
            cnt -= 1;
            if cnt == 0 {
                if found != NONE {
                    self.in_arc = base + found;
                    self.next_arc = if e + 1 < m { e + 1 } else { 0 };
                    return true;
                }
                cnt = self.block_size;
            }
        }
        if found != NONE {
            self.in_arc = base + found;
            self.next_arc = found;
            return true;
        }
        false
    }

    fn find_join_node(&mut self) {
        let mut u = self.source[self.in_arc];
        let mut v = self.target[self.in_arc];
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Returns false when the entering arc itself blocks (never for uncapacitated arcs).
    fn find_leaving_arc(&mut self) -> bool {
        let (first, second) = if self.state[self.in_arc] == STATE_LOWER {
            (self.source[self.in_arc], self.target[self.in_arc])
        } else {
            (self.target[self.in_arc], self.source[self.in_arc])
        };
        self.delta = INF_CAP;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_DOWN { INF_CAP } else { self.flow[e] };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP { INF_CAP } else { self.flow[e] };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self, change: bool) {
        if self.delta > 0 {
            let val = self.state[self.in_arc] as i64 * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.source[self.in_arc];
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
            let mut u = self.target[self.in_arc];
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
        }
        if change {
            self.state[self.in_arc] = STATE_TREE;
            let out = self.pred[self.u_out];
            self.state[out] = if self.flow[out] == 0 { STATE_LOWER } else { STATE_UPPER };
        } else {
            self.state[self.in_arc] = -self.state[self.in_arc];
        }
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let join = self.join;
        let in_arc = self.in_arc;
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);

                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;

                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;

            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }

        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }

        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let u_in = self.u_in;
        let sigma = self.pi[self.v_in] - self.pi[u_in] - self.pred_dir[u_in] as f64 * self.cost[self.in_arc];
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    pub fn run(&mut self) -> SolveStatus {
        while self.find_entering_arc() {
            self.find_join_node();
            let change = self.find_leaving_arc();
            debug_assert!(self.delta < INF_CAP, "uncapacitated cycle with negative cost");
            self.change_flow(change);
            if change {
                self.update_tree_structure();
                self.update_potential();
            }
        }
        if self.flow[..self.node_num].iter().any(|&f| f != 0) {
            SolveStatus::Infeasible
        } else {
            SolveStatus::Optimal
        }
    }

    /// Node potentials; `cost[e] + pi[source] - pi[target] >= 0` at optimality.
    pub fn potentials(&self) -> &[f64] {
        &self.pi[..self.node_num]
    }

    /// Flow on the user arcs, in insertion order.
    pub fn flows(&self) -> &[i64] {
        &self.flow[self.node_num..]
    }

    pub fn total_cost(&self) -> f64 {
        (self.node_num..self.node_num + self.arc_num)
            .map(|e| self.flow[e] as f64 * self.cost[e])
            .sum()
    }

    /// Appends arcs (flow zero, non-basic) keeping the current basis, so a
    /// following [`NetworkSimplex::run`] continues from the last tree.
    pub fn add_arcs(&mut self, arcs: &[(usize, usize)], costs: &[f64]) -> Result<()> {
        if arcs.len() != costs.len() {
            return Err(invalid("network", "arc and cost lengths disagree"));
        }
        if arcs.iter().any(|&(u, v)| u >= self.node_num || v >= self.node_num) {
            return Err(invalid("arcs", "endpoint out of range"));
        }
        if costs.iter().any(|c| !c.is_finite() || c.abs() > self.cost_bound) {
            return Err(invalid("costs", "must be finite and within the declared bound"));
        }
        for (&(u, v), &c) in arcs.iter().zip(costs) {
            self.source.push(u);
            self.target.push(v);
            self.cost.push(c);
            self.flow.push(0);
            self.state.push(STATE_LOWER);
        }
        self.arc_num += arcs.len();
        self.block_size = ((self.arc_num as f64).sqrt().ceil() as usize).max(10);
        Ok(())
    }

    #[allow(dead_code)]
    fn root(&self) -> usize {
        self.root
    }
}

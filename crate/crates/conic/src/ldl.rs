//! Sparse LDLᵀ factorization for symmetric quasi-definite systems.
//!
//! The pivot order comes from a minimum-degree ordering computed once on the
//! sparsity pattern. Numeric factorization is up-looking (one row of L per
//! step) and never pivots: every quasi-definite matrix admits an LDLᵀ
//! factorization for any symmetric permutation, and the expected sign of each
//! pivot is known in advance. Pivots with the wrong sign or negligible
//! magnitude are replaced by a signed regularization value.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

const NONE: usize = usize::MAX;

/// Elimination order minimizing the degree of each pivot in the (explicit)
/// elimination graph. Ties break on the lower index so the result is
/// deterministic.
pub fn minimum_degree(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let mut eliminated = vec![false; n];
    let mut mark = vec![NONE; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|i| Reverse((adj[i].len(), i))).collect();
    let mut order = Vec::with_capacity(n);
    let mut nbrs: Vec<usize> = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        nbrs.clear();
        nbrs.extend(adj[v].iter().copied().filter(|&u| !eliminated[u]));
        adj[v] = Vec::new();
        for &u in &nbrs {
            // adj[u] := (adj[u] ∪ nbrs) \ {u, v}, dropping eliminated nodes
            let stamp = u;
            let mut merged: Vec<usize> = Vec::with_capacity(adj[u].len() + nbrs.len());
            for &w in adj[u].iter().chain(nbrs.iter()) {
                if w != u && !eliminated[w] && mark[w] != stamp {
                    mark[w] = stamp;
                    merged.push(w);
                }
            }
            for &w in &merged {
                mark[w] = NONE;
            }
            merged.sort_unstable();
            adj[u] = merged;
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    debug_assert_eq!(order.len(), n);
    order
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LdlError {
    #[error("pivot {0} is not finite")]
    NonFinitePivot(usize),
}

/// Symbolic + numeric LDLᵀ factor of a fixed-pattern symmetric matrix.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    /// perm[k] = original index of the k-th pivot
    perm: Vec<usize>,
    /// Permuted upper triangle, CSC.
    ap: Vec<usize>,
    ai: Vec<usize>,
    ax: Vec<f64>,
    /// Position in `ax` of each input entry (duplicates share a slot).
    entry_map: Vec<usize>,
    /// Expected pivot signs in permuted order.
    signs: Vec<f64>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    regularized: usize,
}

impl LdlFactor {
    /// Build ordering and symbolic factor from the pattern of a symmetric
    /// matrix. `entries` lists (row, col) positions of either triangle; every
    /// diagonal position is added implicitly. `signs[i]` is +1 or -1, the
    /// expected sign of pivot i.
    pub fn new(n: usize, entries: &[(usize, usize)], signs: &[f64]) -> Self {
        assert_eq!(signs.len(), n);
        let perm = minimum_degree(n, entries.iter().copied());
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        // Permuted upper-triangular positions: input entries then diagonal.
        let mut keyed: Vec<(usize, usize, usize)> = Vec::with_capacity(entries.len() + n);
        for (idx, &(r, c)) in entries.iter().enumerate() {
            let (pr, pc) = (pinv[r], pinv[c]);
            let (row, col) = if pr <= pc { (pr, pc) } else { (pc, pr) };
            keyed.push((col, row, idx));
        }
        for k in 0..n {
            keyed.push((k, k, NONE));
        }
        keyed.sort_unstable();
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::with_capacity(keyed.len());
        let mut entry_map = vec![0usize; entries.len()];
        let mut last = (NONE, NONE);
        for &(col, row, idx) in &keyed {
            if (col, row) != last {
                ai.push(row);
                ap[col + 1] += 1;
                last = (col, row);
            }
            if idx != NONE {
                entry_map[idx] = ai.len() - 1;
            }
        }
        for k in 0..n {
            ap[k + 1] += ap[k];
        }
        let ax = vec![0.0; ai.len()];

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &i0 in &ai[ap[j]..ap[j + 1]] {
                let mut i = i0;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz_l = lp[n];
        let signs = perm.iter().map(|&p| signs[p]).collect();
        Self {
            n,
            perm,
            ap,
            ai,
            ax,
            entry_map,
            signs,
            etree,
            lp,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            regularized: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    /// Number of pivots replaced by regularization in the last factorization.
    pub fn regularized_pivots(&self) -> usize {
        self.regularized
    }

    /// Numeric factorization. `values` aligns with the `entries` passed to
    /// [`LdlFactor::new`]; `diag_shift[i]` (original order) is added to the
    /// diagonal.
    pub fn factor(
        &mut self,
        values: &[f64],
        diag_shift: &[f64],
        eps: f64,
        delta: f64,
    ) -> Result<(), LdlError> {
        assert_eq!(values.len(), self.entry_map.len());
        self.ax.iter_mut().for_each(|v| *v = 0.0);
        for (idx, &pos) in self.entry_map.iter().enumerate() {
            self.ax[pos] += values[idx];
        }
        for k in 0..self.n {
            // the diagonal is the last entry of each permuted upper column
            let pos = self.ap[k + 1] - 1;
            debug_assert_eq!(self.ai[pos], k);
            self.ax[pos] += diag_shift[self.perm[k]];
        }

        let n = self.n;
        let mut y_vals = vec![0.0; n];
        let mut y_marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_in_col: Vec<usize> = self.lp[..n].to_vec();
        self.regularized = 0;

        for k in 0..n {
            let mut nnz_y = 0usize;
            self.d[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    self.d[k] = self.ax[p];
                    continue;
                }
                y_vals[b] = self.ax[p];
                if !y_marked[b] {
                    y_marked[b] = true;
                    elim[0] = b;
                    let mut n_e = 1usize;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_marked[next] {
                            break;
                        }
                        y_marked[next] = true;
                        elim[n_e] = next;
                        n_e += 1;
                        next = self.etree[next];
                    }
                    while n_e > 0 {
                        n_e -= 1;
                        y_idx[nnz_y] = elim[n_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let tmp = next_in_col[c];
                let yc = y_vals[c];
                for j in self.lp[c]..tmp {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                let l = yc * self.dinv[c];
                self.lx[tmp] = l;
                self.d[k] -= yc * l;
                next_in_col[c] += 1;
                y_vals[c] = 0.0;
                y_marked[c] = false;
            }
            let s = self.signs[k];
            if !self.d[k].is_finite() {
                return Err(LdlError::NonFinitePivot(self.perm[k]));
            }
            if s * self.d[k] <= eps {
                self.d[k] = s * delta;
                self.regularized += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solve (P'LDL'P) x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for (k, &p) in self.perm.iter().enumerate() {
            b[p] = x[k];
        }
    }
}

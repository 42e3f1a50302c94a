//! Maximum-clique search over small dense graphs.
//!
//! Consistency graphs in this crate have at most a few hundred vertices, so
//! the solver favors exactness and reproducibility over asymptotics:
//!
//! * up to `exact_cap` vertices (and at most 128, the bitmask width) a
//!   branch-and-bound search with a greedy-coloring bound finds a maximum
//!   clique and then extracts the lexicographically smallest one of that
//!   size;
//! * beyond the cap, a degeneracy-ordered greedy pass returns a maximal
//!   clique flagged as uncertified.
//!
//! Ties are always broken toward the lexicographically smallest ascending
//! vertex sequence, which keeps downstream acceptance decisions stable under
//! re-runs.

/// Widest vertex count the exact bitmask solver supports.
pub const EXACT_SOLVER_LIMIT: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaxCliqueResult {
    /// Clique members in ascending order.
    pub members: Vec<usize>,
    /// True when produced by the exact solver.
    pub certified: bool,
}

/// Finds a maximum clique of an undirected graph given as a dense adjacency
/// matrix (symmetric; diagonal ignored).
pub fn max_clique(adjacency: &[Vec<bool>], exact_cap: usize) -> MaxCliqueResult {
    let n = adjacency.len();
    if n == 0 {
        return MaxCliqueResult {
            members: Vec::new(),
            certified: true,
        };
    }
    if n <= exact_cap.min(EXACT_SOLVER_LIMIT) {
        MaxCliqueResult {
            members: exact_lexicographic(adjacency),
            certified: true,
        }
    } else {
        MaxCliqueResult {
            members: greedy_degeneracy(adjacency),
            certified: false,
        }
    }
}

fn neighbor_masks(adjacency: &[Vec<bool>]) -> Vec<u128> {
    let n = adjacency.len();
    let mut masks = vec![0u128; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && adjacency[i][j] {
                masks[i] |= 1 << j;
            }
        }
    }
    masks
}

struct BranchBound<'a> {
    adj: &'a [u128],
    best: usize,
    /// When set, the search stops as soon as a clique of this size exists.
    target: Option<usize>,
}

impl<'a> BranchBound<'a> {
    fn reached(&self) -> bool {
        matches!(self.target, Some(t) if self.best >= t)
    }

    /// Greedy sequential coloring of `p`; returns vertices with their color
    /// numbers, colors non-decreasing.
    fn color_order(&self, p: u128) -> Vec<(usize, usize)> {
        let mut order = Vec::with_capacity(p.count_ones() as usize);
        let mut remaining = p;
        let mut color = 0;
        while remaining != 0 {
            color += 1;
            let mut class = remaining;
            while class != 0 {
                let v = class.trailing_zeros() as usize;
                order.push((v, color));
                remaining &= !(1u128 << v);
                // Keep this color class independent.
                class &= !(1u128 << v);
                class &= !self.adj[v];
            }
        }
        order
    }

    fn expand(&mut self, r_size: usize, p: u128) {
        if self.reached() {
            return;
        }
        if p == 0 {
            if r_size > self.best {
                self.best = r_size;
            }
            return;
        }
        let order = self.color_order(p);
        let mut p = p;
        for &(v, color) in order.iter().rev() {
            if r_size + color <= self.best {
                return;
            }
            self.expand(r_size + 1, p & self.adj[v]);
            if self.reached() {
                return;
            }
            p &= !(1u128 << v);
        }
    }
}

fn clique_number(adj: &[u128], p: u128, lower_bound: usize) -> usize {
    let mut bb = BranchBound {
        adj,
        best: lower_bound,
        target: None,
    };
    bb.expand(0, p);
    bb.best
}

/// Does `p` contain a clique of at least `target` vertices?
fn has_clique_of(adj: &[u128], p: u128, target: usize) -> bool {
    if target == 0 {
        return true;
    }
    if (p.count_ones() as usize) < target {
        return false;
    }
    let mut bb = BranchBound {
        adj,
        best: target - 1,
        target: Some(target),
    };
    bb.expand(0, p);
    bb.best >= target
}

/// Maximum clique, lexicographically smallest among all maximum cliques.
fn exact_lexicographic(adjacency: &[Vec<bool>]) -> Vec<usize> {
    let n = adjacency.len();
    let adj = neighbor_masks(adjacency);
    let full: u128 = if n == 128 { !0 } else { (1u128 << n) - 1 };
    let size = clique_number(&adj, full, 0);

    // Commit vertices in ascending order whenever the remainder can still
    // complete a clique of the maximum size.
    let mut members = Vec::with_capacity(size);
    let mut pool = full;
    let mut need = size;
    while need > 0 {
        let mut scan = pool;
        while scan != 0 {
            let v = scan.trailing_zeros() as usize;
            scan &= !(1u128 << v);
            let above: u128 = if v + 1 >= 128 { 0 } else { !((1u128 << (v + 1)) - 1) };
            let rest = pool & adj[v] & above;
            if has_clique_of(&adj, rest, need - 1) {
                members.push(v);
                pool = rest;
                need -= 1;
                break;
            }
        }
    }
    members
}

/// Greedy maximal clique from a degeneracy ordering; used past the exact
/// cap. Deterministic: all ties resolve to the smallest vertex index.
fn greedy_degeneracy(adjacency: &[Vec<bool>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree = |v: usize, alive: &[bool]| -> usize {
        (0..n).filter(|&u| alive[u] && u != v && adjacency[v][u]).count()
    };

    // Degeneracy order: repeatedly remove the minimum-degree vertex.
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (degree(v, &alive), v))
            .expect("vertex remains");
        alive[v] = false;
        order.push(v);
    }

    let mut best: Vec<usize> = Vec::new();
    // Seed a greedy clique from every vertex, scanning candidates by
    // descending residual degree.
    for &seed in order.iter().rev() {
        let mut clique = vec![seed];
        let mut candidates: Vec<usize> =
            (0..n).filter(|&u| u != seed && adjacency[seed][u]).collect();
        while !candidates.is_empty() {
            let pick = *candidates
                .iter()
                .max_by_key(|&&u| {
                    let d = candidates.iter().filter(|&&w| w != u && adjacency[u][w]).count();
                    (d, usize::MAX - u)
                })
                .expect("candidate remains");
            clique.push(pick);
            candidates.retain(|&u| u != pick && adjacency[pick][u]);
        }
        clique.sort_unstable();
        if clique.len() > best.len() || (clique.len() == best.len() && clique < best) {
            best = clique;
        }
    }
    best
}

use std::collections::{HashMap, HashSet, VecDeque};

use super::RawInteractions;
use crate::error::{Error, Result};

/// Peels users and items with fewer than `k` interactions until a fixpoint is reached.
///
/// The result is the maximal subgraph in which every user and every item has degree
/// at least `k`. Duplicate (user, item) records are collapsed to their first occurrence
/// before degrees are counted; record order is otherwise preserved.
pub fn k_core_filter(raw: &RawInteractions, k: usize) -> Result<RawInteractions> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be at least 1".into()));
    }

    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut seen = HashSet::new();
    // (record index, user node, item node)
    let mut edges = Vec::with_capacity(raw.records.len());
    for (idx, r) in raw.records.iter().enumerate() {
        let next = users.len();
        let u = *users.entry(r.user.as_str()).or_insert(next);
        let next = items.len();
        let i = *items.entry(r.item.as_str()).or_insert(next);
        if seen.insert((u, i)) {
            edges.push((idx, u, i));
        }
    }

    let n_users = users.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_users + items.len()];
    for (e, &(_, u, i)) in edges.iter().enumerate() {
        adj[u].push(e);
        adj[n_users + i].push(e);
    }
    let mut degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut removed = vec![false; adj.len()];
    let mut edge_alive = vec![true; edges.len()];

    let mut queue: VecDeque<usize> = (0..adj.len()).filter(|&n| degree[n] < k).collect();
    for &n in &queue {
        removed[n] = true;
    }
    while let Some(node) = queue.pop_front() {
        for &e in &adj[node] {
            if !edge_alive[e] {
                continue;
            }
            edge_alive[e] = false;
            let (_, u, i) = edges[e];
            let other = if node == u { n_users + i } else { u };
            degree[other] -= 1;
            if !removed[other] && degree[other] < k {
                removed[other] = true;
                queue.push_back(other);
            }
        }
    }

    let records: Vec<_> = edges
        .iter()
        .zip(&edge_alive)
        .filter(|(_, &alive)| alive)
        .map(|(&(idx, _, _), _)| raw.records[idx].clone())
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("the {k}-core is empty")));
    }
    Ok(RawInteractions {
        records,
        malformed: raw.malformed,
    })
}

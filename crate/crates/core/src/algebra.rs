//! Finite monoids and groups as explicit Cayley tables, plus the exact
//! word-problem oracle used to label every dataset.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid table: {0}")]
    Validation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonoidKind {
    Group,
    Monoid,
}

/// Cayley table: `table[i][j]` is `i ∘ j`, read as "apply `i`, then `j`".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoidTable {
    pub size: usize,
    pub identity: usize,
    pub kind: MonoidKind,
    pub table: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl MonoidTable {
    /// Builds a table and checks closure, identity, associativity and (for groups) inverses.
    pub fn new(table: Vec<Vec<usize>>, identity: usize, kind: MonoidKind, names: Option<Vec<String>>) -> Result<Self, AlgebraError> {
        let t = Self {
            size: table.len(),
            identity,
            kind,
            table,
            names,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }

    pub fn validate(&self) -> Result<(), AlgebraError> {
        let n = self.size;
        if n == 0 || self.table.len() != n {
            return Err(AlgebraError::Validation("table must be non-empty and square".into()));
        }
        if let Some(names) = &self.names {
            if names.len() != n {
                return Err(AlgebraError::Validation(format!("{} names for {n} elements", names.len())));
            }
        }
        for (i, row) in self.table.iter().enumerate() {
            if row.len() != n {
                return Err(AlgebraError::Validation(format!("row {i} has {} entries", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&v| v >= n) {
                return Err(AlgebraError::Validation(format!("entry {bad} in row {i} is not an element")));
            }
        }
        let e = self.identity;
        if e >= n || (0..n).any(|m| self.table[e][m] != m || self.table[m][e] != m) {
            return Err(AlgebraError::Validation(format!("{e} is not a two-sided identity")));
        }
        if !check_associative(self) {
            return Err(AlgebraError::Validation("composition is not associative".into()));
        }
        if self.kind == MonoidKind::Group && !self.rows_and_columns_are_permutations() {
            return Err(AlgebraError::Validation("group table has an element without inverse".into()));
        }
        Ok(())
    }

    fn rows_and_columns_are_permutations(&self) -> bool {
        let n = self.size;
        (0..n).all(|i| {
            let mut row = vec![false; n];
            let mut col = vec![false; n];
            for j in 0..n {
                row[self.table[i][j]] = true;
                col[self.table[j][i]] = true;
            }
            row.iter().all(|&b| b) && col.iter().all(|&b| b)
        })
    }

    /// Inverse of `a` in a group, `None` if `a` has none.
    pub fn inverse(&self, a: usize) -> Option<usize> {
        (0..self.size).find(|&b| self.table[a][b] == self.identity && self.table[b][a] == self.identity)
    }

    pub fn name(&self, a: usize) -> String {
        self.names.as_ref().map_or_else(|| a.to_string(), |n| n[a].clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AlgebraError> {
        let t: Self = serde_json::from_str(s).map_err(|e| AlgebraError::Validation(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn is_even(p: &[usize]) -> bool {
    let inversions = (0..p.len())
        .flat_map(|i| (i + 1..p.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| p[i] > p[j])
        .count();
    inversions % 2 == 0
}

fn permutation_table(perms: Vec<Vec<usize>>) -> MonoidTable {
    let index = |p: &[usize]| perms.iter().position(|q| q == p).expect("closed under composition");
    let table = perms
        .iter()
        .map(|a| {
            perms
                .iter()
                .map(|b| {
                    let ab: Vec<usize> = a.iter().map(|&x| b[x]).collect();
                    index(&ab)
                })
                .collect()
        })
        .collect();
    let names = perms
        .iter()
        .map(|p| format!("[{}]", p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")))
        .collect();
    MonoidTable {
        size: perms.len(),
        identity: 0,
        kind: MonoidKind::Group,
        table,
        names: Some(names),
    }
}

/// Composes two permutations in one-line notation, `a` applied first.
pub fn compose_permutations(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().map(|&x| b[x]).collect()
}

/// Index of a permutation among the lexicographically ordered elements of S_n.
pub fn permutation_index(p: &[usize]) -> usize {
    permutations(p.len()).iter().position(|q| q == p).unwrap_or(usize::MAX)
}

/// All permutations of `0..n` in lexicographic order, composed left to right.
pub fn make_symmetric_group(n: usize) -> Result<MonoidTable, AlgebraError> {
    if !(2..=5).contains(&n) {
        return Err(AlgebraError::Domain(format!("symmetric group needs 2 <= n <= 5, got {n}")));
    }
    Ok(permutation_table(permutations(n)))
}

/// Even permutations of `0..n` in lexicographic order.
pub fn make_alternating_group(n: usize) -> Result<MonoidTable, AlgebraError> {
    if !(3..=5).contains(&n) {
        return Err(AlgebraError::Domain(format!("alternating group needs 3 <= n <= 5, got {n}")));
    }
    Ok(permutation_table(permutations(n).into_iter().filter(|p| is_even(p)).collect()))
}

/// Identity plus `r` reset elements: `a ∘ b = b` unless `b` is the identity.
pub fn make_reset_monoid(r: usize) -> Result<MonoidTable, AlgebraError> {
    if r == 0 {
        return Err(AlgebraError::Domain("reset monoid needs at least one reset".into()));
    }
    let n = r + 1;
    let table = (0..n).map(|a| (0..n).map(|b| if b == 0 { a } else { b }).collect()).collect();
    let names = std::iter::once("e".to_string()).chain((1..n).map(|i| format!("r{i}"))).collect();
    Ok(MonoidTable {
        size: n,
        identity: 0,
        kind: MonoidKind::Monoid,
        table,
        names: Some(names),
    })
}

/// Direct product `left × right` with flat index `l·|right| + r`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductMonoid {
    pub left: MonoidTable,
    pub right: MonoidTable,
    pub flattened: MonoidTable,
}

impl ProductMonoid {
    pub fn flat_index(&self, l: usize, r: usize) -> usize {
        l * self.right.size + r
    }

    pub fn components(&self, flat: usize) -> (usize, usize) {
        (flat / self.right.size, flat % self.right.size)
    }

    /// Simple elements carry the identity of the right (group) factor.
    pub fn is_simple(&self, flat: usize) -> bool {
        self.components(flat).1 == self.right.identity
    }
}

pub fn direct_product(left: &MonoidTable, right: &MonoidTable) -> Result<ProductMonoid, AlgebraError> {
    left.validate()?;
    right.validate()?;
    let (nl, nr) = (left.size, right.size);
    let n = nl * nr;
    let table = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| left.table[a / nr][b / nr] * nr + right.table[a % nr][b % nr])
                .collect()
        })
        .collect();
    let names = (0..n).map(|a| format!("({},{})", left.name(a / nr), right.name(a % nr))).collect();
    let kind = if left.kind == MonoidKind::Group && right.kind == MonoidKind::Group {
        MonoidKind::Group
    } else {
        MonoidKind::Monoid
    };
    let flattened = MonoidTable {
        size: n,
        identity: left.identity * nr + right.identity,
        kind,
        table,
        names: Some(names),
    };
    Ok(ProductMonoid {
        left: left.clone(),
        right: right.clone(),
        flattened,
    })
}

/// Running products `w_0 ∘ … ∘ w_k` for every `k`.
pub fn prefix_products(table: &MonoidTable, word: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(word.len());
    let mut acc: Option<usize> = None;
    for &w in word {
        let next = match acc {
            None => w,
            Some(a) => table.table[a][w],
        };
        out.push(next);
        acc = Some(next);
    }
    out
}

/// Brute-force associativity over all triples.
pub fn check_associative(table: &MonoidTable) -> bool {
    let t = &table.table;
    let n = table.size;
    (0..n).all(|i| {
        (0..n).all(|j| {
            let ij = t[i][j];
            (0..n).all(|k| t[ij][k] == t[i][t[j][k]])
        })
    })
}

/// True iff every element satisfies `m^k = m^(k+1)` for some `k ≤ size`.
pub fn check_aperiodic(table: &MonoidTable) -> bool {
    (0..table.size).all(|m| {
        let mut pow = m;
        for _ in 0..table.size {
            let next = table.table[pow][m];
            if next == pow {
                return true;
            }
            pow = next;
        }
        false
    })
}

fn closure(table: &MonoidTable, generators: &BTreeSet<usize>) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = generators.clone();
    set.insert(table.identity);
    let mut frontier: Vec<usize> = set.iter().copied().collect();
    while let Some(a) = frontier.pop() {
        for &g in generators {
            let p = table.table[a][g];
            if set.insert(p) {
                frontier.push(p);
            }
        }
    }
    set
}

/// Sizes along `G ⊇ [G,G] ⊇ …`, stopping at the trivial group or once the chain stalls.
pub fn derived_series(table: &MonoidTable) -> Result<Vec<usize>, AlgebraError> {
    if table.kind != MonoidKind::Group {
        return Err(AlgebraError::Domain("derived series needs a group".into()));
    }
    if table.size > 120 {
        return Err(AlgebraError::Domain(format!("group of order {} is too large", table.size)));
    }
    let inv: Vec<usize> = (0..table.size)
        .map(|a| {
            table
                .inverse(a)
                .ok_or_else(|| AlgebraError::Validation(format!("{a} has no inverse")))
        })
        .collect::<Result<_, _>>()?;
    let t = &table.table;
    let mut current: BTreeSet<usize> = (0..table.size).collect();
    let mut sizes = vec![current.len()];
    while current.len() > 1 {
        let commutators: BTreeSet<usize> = current
            .iter()
            .flat_map(|&a| current.iter().map(move |&b| (a, b)))
            .map(|(a, b)| t[t[t[inv[a]][inv[b]]][a]][b])
            .collect();
        let next = closure(table, &commutators);
        sizes.push(next.len());
        if next.len() == current.len() {
            break;
        }
        current = next;
    }
    Ok(sizes)
}

pub fn is_solvable(table: &MonoidTable) -> Result<bool, AlgebraError> {
    Ok(derived_series(table)?.last() == Some(&1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s2_is_z2() {
        let s2 = make_symmetric_group(2).unwrap();
        assert_eq!(s2.table, vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn s3_composition_applies_left_first() {
        let s3 = make_symmetric_group(3).unwrap();
        let a = permutation_index(&[1, 0, 2]);
        let b = permutation_index(&[0, 2, 1]);
        assert_eq!(s3.compose(a, b), permutation_index(&[2, 0, 1]));
        assert_eq!(compose_permutations(&[1, 0, 2], &[0, 2, 1]), vec![2, 0, 1]);
    }

    #[test]
    fn alternating_sizes() {
        assert_eq!(make_alternating_group(3).unwrap().size, 3);
        assert_eq!(make_alternating_group(4).unwrap().size, 12);
        assert_eq!(make_alternating_group(5).unwrap().size, 60);
        assert!(make_alternating_group(2).is_err());
        assert!(make_symmetric_group(6).is_err());
    }

    #[test]
    fn a3_is_cyclic() {
        let a3 = make_alternating_group(3).unwrap();
        let g = (1..3).find(|&g| a3.compose(g, g) != 0).unwrap();
        assert_eq!(a3.compose(a3.compose(g, g), g), 0);
    }

    #[test]
    fn reset_columns_are_constant() {
        let m = make_reset_monoid(3).unwrap();
        m.validate().unwrap();
        for b in 1..4 {
            assert!((0..4).all(|a| m.compose(a, b) == b));
        }
        assert_eq!(m.compose(1, 2), 2);
        assert!(check_aperiodic(&m));
        assert!(make_reset_monoid(0).is_err());
    }

    #[test]
    fn product_identity_and_components() {
        let p = direct_product(&make_reset_monoid(3).unwrap(), &make_alternating_group(5).unwrap()).unwrap();
        assert_eq!(p.flattened.size, 240);
        let e = p.flattened.identity;
        assert_eq!(p.flattened.compose(e, e), e);
        let (m, g1, g2) = (2, 7, 13);
        let a = p.flat_index(m, g1);
        let b = p.flat_index(0, g2);
        assert_eq!(p.flattened.compose(a, b), p.flat_index(m, p.right.compose(g1, g2)));
        assert!(p.is_simple(p.flat_index(3, 0)));
        assert!(!p.is_simple(a));
    }

    #[test]
    fn parity_prefixes() {
        let s2 = make_symmetric_group(2).unwrap();
        assert_eq!(prefix_products(&s2, &[1, 1, 1]), vec![1, 0, 1]);
        assert_eq!(prefix_products(&s2, &[0; 5]), vec![0; 5]);
        assert!(prefix_products(&s2, &[]).is_empty());
    }

    #[test]
    fn s3_prefixes() {
        let s3 = make_symmetric_group(3).unwrap();
        let w = [permutation_index(&[1, 0, 2]), permutation_index(&[0, 2, 1])];
        assert_eq!(prefix_products(&s3, &w), vec![w[0], permutation_index(&[2, 0, 1])]);
    }

    #[test]
    fn derived_series_small_cases() {
        assert_eq!(derived_series(&make_symmetric_group(2).unwrap()).unwrap(), vec![2, 1]);
        assert_eq!(derived_series(&make_symmetric_group(3).unwrap()).unwrap(), vec![6, 3, 1]);
        assert!(derived_series(&make_reset_monoid(2).unwrap()).is_err());
    }

    #[test]
    fn json_round_trip_and_rejects_bad_table() {
        let s3 = make_symmetric_group(3).unwrap();
        assert_eq!(MonoidTable::from_json(&s3.to_json()).unwrap(), s3);
        let bad = r#"{"size":2,"identity":0,"kind":"monoid","table":[[0,1],[1,1]]}"#;
        assert!(MonoidTable::from_json(bad).is_ok());
        let not_assoc = r#"{"size":3,"identity":0,"kind":"monoid","table":[[0,1,2],[1,2,1],[2,2,0]]}"#;
        assert!(MonoidTable::from_json(not_assoc).is_err());
    }
}

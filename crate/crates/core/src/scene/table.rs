use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneError, TaskSpec, Vocabulary, IRRELEVANT, MAX_LEVEL};

/// Rank level of every category under every (affordance, context) task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u8>", into = "BTreeMap<String, u8>")]
pub struct RankTable {
    /// `ranks[a][c][k]`.
    ranks: Vec<Vec<Vec<u8>>>,
    n_categories: usize,
}

impl RankTable {
    pub fn from_levels(ranks: Vec<Vec<Vec<u8>>>) -> Result<Self, SceneError> {
        let n_categories = ranks
            .first()
            .and_then(|a| a.first())
            .map(Vec::len)
            .ok_or_else(|| SceneError::Table("empty table".into()))?;
        for (a, ctxs) in ranks.iter().enumerate() {
            if ctxs.is_empty() {
                return Err(SceneError::Table(format!("affordance {a} has no contexts")));
            }
            for row in ctxs {
                if row.len() != n_categories {
                    return Err(SceneError::Table(format!("affordance {a}: ragged category rows")));
                }
                if let Some(r) = row.iter().find(|&&r| r == 0 || r > IRRELEVANT) {
                    return Err(SceneError::Table(format!("affordance {a}: rank {r} outside 1..=8")));
                }
            }
        }
        Ok(Self { ranks, n_categories })
    }

    pub fn n_affordances(&self) -> usize {
        self.ranks.len()
    }

    pub fn n_contexts(&self, affordance: usize) -> usize {
        self.ranks.get(affordance).map_or(0, Vec::len)
    }

    pub fn max_contexts(&self) -> usize {
        self.ranks.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            n_affordances: self.n_affordances(),
            max_contexts: self.max_contexts(),
        }
    }

    pub fn level(&self, affordance: usize, context: usize, category: usize) -> Result<u8, SceneError> {
        let ctxs = self
            .ranks
            .get(affordance)
            .ok_or(SceneError::UnknownAffordance(affordance))?;
        let row = ctxs
            .get(context)
            .ok_or(SceneError::UnknownContext { affordance, context })?;
        Ok(row.get(category).copied().unwrap_or(IRRELEVANT))
    }

    /// Categories with a relevant level under at least one context of `affordance`.
    pub fn relevant_categories(&self, affordance: usize) -> Vec<usize> {
        (0..self.n_categories)
            .filter(|&k| self.ranks[affordance].iter().any(|row| row[k] <= MAX_LEVEL))
            .collect()
    }

    /// Category pairs `(x, y)` ranked `x` before `y` under `c1` but `y`
    /// before `x` under `c2`.
    pub fn inverted_pairs(&self, affordance: usize, c1: usize, c2: usize) -> Vec<(usize, usize)> {
        let r1 = &self.ranks[affordance][c1];
        let r2 = &self.ranks[affordance][c2];
        let mut out = Vec::new();
        for x in 0..self.n_categories {
            for y in 0..self.n_categories {
                if r1[x] < r1[y] && r2[x] > r2[y] && r1[y] <= MAX_LEVEL && r2[x] <= MAX_LEVEL {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Distinct relevant levels configured anywhere in the table.
    pub fn configured_levels(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.ranks.iter().flatten().flatten().copied().filter(|&r| r <= MAX_LEVEL).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn key(a: usize, c: usize, k: usize) -> String {
    format!("{a}:{c}:{k}")
}

impl From<RankTable> for BTreeMap<String, u8> {
    fn from(t: RankTable) -> Self {
        let mut m = BTreeMap::new();
        for (a, ctxs) in t.ranks.iter().enumerate() {
            for (c, row) in ctxs.iter().enumerate() {
                for (k, &r) in row.iter().enumerate() {
                    m.insert(key(a, c, k), r);
                }
            }
        }
        m
    }
}

impl TryFrom<BTreeMap<String, u8>> for RankTable {
    type Error = SceneError;

    fn try_from(m: BTreeMap<String, u8>) -> Result<Self, Self::Error> {
        let mut entries = Vec::with_capacity(m.len());
        for (k, r) in m {
            let parts: Vec<usize> = k
                .split(':')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| SceneError::Table(format!("bad key '{k}'")))?;
            let [a, c, cat] = parts[..] else {
                return Err(SceneError::Table(format!("bad key '{k}'")));
            };
            entries.push((a, c, cat, r));
        }
        let n_aff = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let n_cat = entries.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        let mut ranks: Vec<Vec<Vec<u8>>> = vec![Vec::new(); n_aff];
        for &(a, c, _, _) in &entries {
            if ranks[a].len() <= c {
                ranks[a].resize(c + 1, vec![0; n_cat]);
            }
        }
        for (a, c, k, r) in entries {
            ranks[a][c][k] = r;
        }
        RankTable::from_levels(ranks)
    }
}

impl std::fmt::Display for RankTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m: BTreeMap<String, u8> = self.clone().into();
        write!(f, "{}", serde_json::to_string(&m).map_err(|_| std::fmt::Error)?)
    }
}

/// Builds a table where every affordance has a fixed relevant category set
/// and each context assigns those categories a different arrangement of
/// levels. Every later context inverts at least one category pair relative
/// to context 0.
pub fn build_rank_table(
    seed: u64,
    n_affordances: usize,
    contexts_per_affordance: usize,
    n_categories: usize,
) -> Result<RankTable, SceneError> {
    if n_affordances == 0 {
        return Err(SceneError::Infeasible("at least one affordance is required".into()));
    }
    if contexts_per_affordance < 2 {
        return Err(SceneError::Infeasible(format!(
            "each affordance needs at least two contexts, got {contexts_per_affordance}"
        )));
    }
    let n_relevant = (n_categories / 2).max(2);
    if n_categories < n_relevant {
        return Err(SceneError::Infeasible(format!(
            "{n_categories} categories cannot supply {n_relevant} relevant categories per affordance"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = Vec::with_capacity(n_affordances);
    for _ in 0..n_affordances {
        let mut cats: Vec<usize> = (0..n_categories).collect();
        cats.shuffle(&mut rng);
        let relevant = &cats[..n_relevant];

        let n_levels = rng.random_range(2..=n_relevant.min(MAX_LEVEL as usize));
        let mut pool: Vec<u8> = (1..=MAX_LEVEL).collect();
        pool.shuffle(&mut rng);
        let mut levels: Vec<u8> = pool[..n_levels].to_vec();
        levels.sort_unstable();
        let mut multiset = levels.clone();
        while multiset.len() < n_relevant {
            multiset.push(levels[rng.random_range(0..n_levels)]);
        }
        multiset.shuffle(&mut rng);

        let row_from = |assign: &[u8]| {
            let mut row = vec![IRRELEVANT; n_categories];
            for (&k, &r) in relevant.iter().zip(assign) {
                row[k] = r;
            }
            row
        };
        let base = multiset.clone();
        let mut ctx_rows = vec![row_from(&base)];
        for _ in 1..contexts_per_affordance {
            let mut assign = base.clone();
            let mut found = false;
            for _ in 0..64 {
                assign.shuffle(&mut rng);
                let row = row_from(&assign);
                let inverted = (0..n_relevant).any(|i| {
                    (0..n_relevant).any(|j| base[i] < base[j] && assign[i] > assign[j])
                });
                if inverted && !ctx_rows.contains(&row) {
                    found = true;
                    break;
                }
            }
            if !found {
                // Swap the best and worst categories of the base arrangement.
                assign = base.clone();
                let lo = (0..n_relevant).min_by_key(|&i| base[i]).expect("non-empty");
                let hi = (0..n_relevant).max_by_key(|&i| base[i]).expect("non-empty");
                assign.swap(lo, hi);
            }
            ctx_rows.push(row_from(&assign));
        }
        ranks.push(ctx_rows);
    }
    RankTable::from_levels(ranks)
}

/// Level of `category` under `task`; categories outside the table are irrelevant.
pub fn rank_lookup(table: &RankTable, task: &TaskSpec, category: usize) -> Result<u8, SceneError> {
    table.level(task.affordance_id, task.context_id, category)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_table() {
        assert_eq!(build_rank_table(3, 3, 2, 10).unwrap(), build_rank_table(3, 3, 2, 10).unwrap());
        assert_ne!(build_rank_table(3, 3, 2, 10).unwrap(), build_rank_table(4, 3, 2, 10).unwrap());
    }

    #[test]
    fn contexts_disagree_and_invert_a_pair() {
        for seed in 0..50 {
            let t = build_rank_table(seed, 4, 3, 9).unwrap();
            for a in 0..4 {
                for c in 1..3 {
                    assert!(!t.inverted_pairs(a, 0, c).is_empty(), "seed {seed} a {a} c {c}");
                }
                assert!(t.relevant_categories(a).len() >= 2);
            }
        }
    }

    #[test]
    fn infeasible_counts_rejected() {
        assert!(matches!(build_rank_table(0, 2, 2, 1), Err(SceneError::Infeasible(_))));
        assert!(matches!(build_rank_table(0, 2, 1, 6), Err(SceneError::Infeasible(_))));
    }

    #[test]
    fn lookup_rules() {
        let t = build_rank_table(11, 2, 2, 8).unwrap();
        let vocab = t.vocabulary();
        let task = TaskSpec::new(&vocab, 1, 0);
        for k in 0..8 {
            assert_eq!(rank_lookup(&t, &task, k).unwrap(), t.ranks[1][0][k]);
        }
        assert_eq!(rank_lookup(&t, &task, 99).unwrap(), IRRELEVANT);
        let bad = TaskSpec::new(&vocab, 5, 0);
        assert!(matches!(rank_lookup(&t, &bad, 0), Err(SceneError::UnknownAffordance(5))));
    }

    #[test]
    fn json_uses_flat_keys_and_round_trips() {
        let t = build_rank_table(5, 2, 2, 4).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"1:1:3\""));
        let back: RankTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
